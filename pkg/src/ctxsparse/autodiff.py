"""Minimal reverse-mode automatic differentiation over numpy arrays.

Each Tensor records its parents and one vector-Jacobian closure per parent;
``backward()`` walks the recorded graph in reverse topological order and
accumulates adjoints. Graph construction order is deterministic, so gradient
accumulation order is fixed and runs are reproducible bit-for-bit.
"""

from __future__ import annotations

import numpy as np

from .errors import ContractViolation


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum gradient over axes that were broadcast in the forward op."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """Node in the gradient tape wrapping a float64 numpy array."""

    __slots__ = ("data", "grad", "_parents", "requires_grad")

    def __init__(self, data, parents=(), requires_grad=True):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        # parents: tuple of (Tensor, vjp) where vjp maps out-grad -> parent-grad
        self._parents = tuple(parents)
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.data.shape

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def item(self) -> float:
        return float(self.data)

    # -- graph walk ---------------------------------------------------------

    def backward(self):
        if self.data.size != 1:
            raise ContractViolation("backward() requires a scalar output")
        topo, seen, stack = [], set(), [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent, _ in node._parents:
                if id(parent) not in seen:
                    stack.append((parent, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node.grad is None:
                continue
            for parent, vjp in node._parents:
                if not parent.requires_grad:
                    continue
                g = vjp(node.grad)
                if parent.grad is None:
                    # may alias another node's grad (e.g. pass-through ops);
                    # accumulation below is out-of-place, so that is safe
                    parent.grad = g
                else:
                    parent.grad = parent.grad + g

    # -- arithmetic ---------------------------------------------------------

    def __add__(self, other):
        other = _wrap(other)
        out_data = self.data + other.data
        return Tensor(out_data, (
            (self, lambda g: _unbroadcast(g, self.data.shape)),
            (other, lambda g: _unbroadcast(g, other.data.shape)),
        ))

    __radd__ = __add__

    def __mul__(self, other):
        other = _wrap(other)
        out_data = self.data * other.data
        return Tensor(out_data, (
            (self, lambda g: _unbroadcast(g * other.data, self.data.shape)),
            (other, lambda g: _unbroadcast(g * self.data, other.data.shape)),
        ))

    __rmul__ = __mul__

    def __neg__(self):
        return Tensor(-self.data, ((self, lambda g: -g),))

    def __sub__(self, other):
        return self + (-_wrap(other))

    def __rsub__(self, other):
        return _wrap(other) + (-self)

    def __truediv__(self, other):
        other = _wrap(other)
        return self * other ** -1.0

    def __rtruediv__(self, other):
        return _wrap(other) * self ** -1.0

    def __pow__(self, exponent: float):
        out_data = self.data ** exponent
        def vjp(g, x=self.data, p=exponent):
            return g * p * x ** (p - 1.0)
        return Tensor(out_data, ((self, vjp),))

    def __matmul__(self, other):
        other = _wrap(other)
        out_data = self.data @ other.data
        def vjp_a(g, b=other.data, sh=self.data.shape):
            return _unbroadcast(g @ np.swapaxes(b, -1, -2), sh)
        def vjp_b(g, a=self.data, sh=other.data.shape):
            return _unbroadcast(np.swapaxes(a, -1, -2) @ g, sh)
        return Tensor(out_data, ((self, vjp_a), (other, vjp_b)))

    # -- elementwise --------------------------------------------------------

    def exp(self):
        out_data = np.exp(self.data)
        return Tensor(out_data, ((self, lambda g, o=out_data: g * o),))

    def log(self):
        return Tensor(np.log(self.data), ((self, lambda g, x=self.data: g / x),))

    def sigmoid(self):
        x = self.data
        t = np.exp(-np.abs(x))
        out_data = np.where(x >= 0, 1.0 / (1.0 + t), t / (1.0 + t))
        return Tensor(out_data, ((self, lambda g, o=out_data: g * o * (1.0 - o)),))

    def abs(self):
        # subgradient at 0 is taken as 0
        return Tensor(np.abs(self.data), ((self, lambda g, x=self.data: g * np.sign(x)),))

    # -- reductions and shape ops -------------------------------------------

    def sum(self, axis=None, keepdims=False):
        out_data = self.data.sum(axis=axis, keepdims=keepdims)
        def vjp(g, sh=self.data.shape, ax=axis, kd=keepdims):
            if ax is not None and not kd:
                g = np.expand_dims(g, ax)
            return np.broadcast_to(g, sh).copy()
        return Tensor(out_data, ((self, vjp),))

    def mean(self, axis=None, keepdims=False):
        n = self.data.size if axis is None else np.prod(
            [self.data.shape[a] for a in (axis if isinstance(axis, tuple) else (axis,))]
        )
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / float(n))

    def reshape(self, *shape):
        out_data = self.data.reshape(*shape)
        return Tensor(out_data, ((self, lambda g, sh=self.data.shape: g.reshape(sh)),))

    def transpose(self, *axes):
        out_data = self.data.transpose(*axes)
        inv = np.argsort(axes)
        return Tensor(out_data, ((self, lambda g, iv=tuple(inv): g.transpose(iv)),))

    def __getitem__(self, idx):
        out_data = self.data[idx]
        def vjp(g, sh=self.data.shape, ix=idx):
            full = np.zeros(sh)
            np.add.at(full, ix, g)
            return full
        return Tensor(out_data, ((self, vjp),))


def _wrap(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64), requires_grad=False)


def constant(x) -> Tensor:
    """A tensor that never receives gradient."""
    return _wrap(x)


def concat(tensors, axis=0) -> Tensor:
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    parents = []
    offset = 0
    for t in tensors:
        n = t.data.shape[axis]
        sl = [slice(None)] * out_data.ndim
        sl[axis] = slice(offset, offset + n)
        parents.append((t, lambda g, s=tuple(sl): g[s]))
        offset += n
    return Tensor(out_data, tuple(parents))


def silu(x: Tensor) -> Tensor:
    return x * x.sigmoid()


def rms_norm(x: Tensor, gain: Tensor, eps: float = 1e-6) -> Tensor:
    scale = ((x * x).mean(axis=-1, keepdims=True) + eps) ** -0.5
    return x * scale * gain


def softmax_lastdim(x: Tensor) -> Tensor:
    """Softmax over the last axis; the max shift is treated as a constant."""
    shift = constant(np.max(x.data, axis=-1, keepdims=True))
    e = (x - shift).exp()
    return e / e.sum(axis=-1, keepdims=True)


def _exp_capped_zero(t: Tensor) -> Tensor:
    """exp(min(z, 0)): exact for z <= 0, saturated at 1 above.

    Entries above zero are always masked downstream, so saturating them
    keeps the forward bounded and the backward finite without touching the
    live entries.
    """
    out_data = np.exp(np.minimum(t.data, 0.0))
    live = t.data <= 0.0
    return Tensor(out_data, ((t, lambda g, o=out_data, m=live: g * o * m),))


def masked_softmax_lastdim(x: Tensor, mask: Tensor) -> Tensor:
    """Softmax over the last axis restricted by a binary mask.

    Differentiable in both the scores and the mask. Scores shift by the
    per-row max over unmasked entries, so the largest live entry maps to
    exp(0) = 1 and the denominator can never vanish; masked entries are
    exactly zero in the output.
    """
    keep = mask.data != 0.0
    if not keep.any(axis=-1).all():
        raise ContractViolation("masked_softmax: a mask row is all zeros")
    live_max = np.max(np.where(keep, x.data, -np.inf), axis=-1, keepdims=True)
    e = _exp_capped_zero(x - constant(live_max)) * mask
    return e / e.sum(axis=-1, keepdims=True)


def ste_hard_decision(relaxed: Tensor) -> Tensor:
    """Hard one-hot argmax over the last axis with a pass-through adjoint.

    Forward emits exact {0,1} one-hot rows (ties toward the lower index);
    backward copies the incoming adjoint onto the relaxed input unchanged.
    """
    idx = np.argmax(relaxed.data, axis=-1)
    hard = np.zeros_like(relaxed.data)
    np.put_along_axis(hard, idx[..., None], 1.0, axis=-1)
    return Tensor(hard, ((relaxed, lambda g: g),))


def gradcheck(fn, tensors, step: float = 1e-5, rtol: float = 1e-4,
              atol: float = 1e-7, rng=None, probes_per_input: int = 3):
    """Compare reverse-mode gradients against central finite differences.

    ``fn`` maps the given leaf tensors to a scalar Tensor. A few random
    coordinates per input are probed. Returns the worst relative error.
    """
    rng = rng or np.random.default_rng(0)
    for t in tensors:
        t.grad = None
    out = fn(*tensors)
    out.backward()
    worst = 0.0
    for t in tensors:
        if not t.requires_grad:
            continue
        flat = t.data.ravel()
        n_probe = min(probes_per_input, flat.size)
        coords = rng.choice(flat.size, size=n_probe, replace=False)
        for c in coords:
            orig = flat[c]
            flat[c] = orig + step
            hi = fn(*tensors).item()
            flat[c] = orig - step
            lo = fn(*tensors).item()
            flat[c] = orig
            numeric = (hi - lo) / (2.0 * step)
            analytic = t.grad.ravel()[c]
            err = abs(analytic - numeric) / max(abs(numeric), abs(analytic), atol / rtol)
            worst = max(worst, err)
            if err > rtol:
                raise AssertionError(
                    f"gradient mismatch at coord {c}: analytic {analytic!r} "
                    f"vs numeric {numeric!r} (rel err {err:.3e})"
                )
    return worst
