"""End-to-end sparsification training at toy scale.

Training never physically removes tokens. Every sequence runs with its full
token set; the keep/drop decisions become a binary mask matrix that
restricts the attention softmax in every layer beyond the sparsification
layer (layers at or below it use the plain causal mask). Masked-out tokens
still self-attend, so the loss can be computed at every output position,
which is exactly what naive zeroing of dropped tokens breaks (that "hard
drop" variant is kept behind a flag as a documented negative control).

Discrete decisions are trained with a temperature-annealed Gumbel-Softmax
relaxation and a straight-through estimator: the forward pass uses the hard
argmax mask, the backward pass copies the mask's adjoint onto the relaxed
decisions unchanged. A keep-rate regularizer pins the realized keep
fractions to the configured targets; the output-side term is gated off for
sequences shorter than ``min_output_len``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import ContractViolation
from .model import Model, causal_mask
from .predictors import Predictors
from .sparsify import SparsityConfig


@dataclass
class TrainConfig:
    lambda_reg: float = 100.0
    lambda_warmup_steps: int = 0  # ramp the constraint in over these steps
    min_output_len: int = 50   # output-side keep-rate constraint gate
    tau_initial: float = 1.0
    tau_final: float = 0.1
    total_steps: int = 1000
    optimizer: str = "adam"    # "adam" or "sgd"
    lr_model: float = 3e-3
    lr_predictor: float = 2e-3
    momentum: float = 0.9      # sgd only
    batch_size: int = 4
    seed: int = 0

    def validate(self):
        if self.lambda_reg < 0:
            raise ContractViolation("lambda_reg must be >= 0")
        if self.min_output_len < 0:
            raise ContractViolation("min_output_len must be >= 0")
        if not 0.0 < self.tau_final <= self.tau_initial:
            raise ContractViolation("need 0 < tau_final <= tau_initial")
        if self.total_steps < 1:
            raise ContractViolation("total_steps must be >= 1")
        if self.optimizer not in ("adam", "sgd"):
            raise ContractViolation(f"unknown optimizer {self.optimizer!r}")
        if self.lambda_warmup_steps < 0:
            raise ContractViolation("lambda_warmup_steps must be >= 0")
        return self

    def lambda_at(self, step: int) -> float:
        """Constraint weight at a step; ramps linearly over the warmup so
        task circuits can form on full context before pruning starts."""
        if self.lambda_warmup_steps == 0:
            return self.lambda_reg
        return self.lambda_reg * min(1.0, step / self.lambda_warmup_steps)


@dataclass
class LossBreakdown:
    cross_entropy: float
    regularizer: float
    total: float
    image_keep_fraction: float
    output_keep_fraction: float


@dataclass
class TrainBatch:
    """Equal-shape training sequences (image features may be empty)."""
    image_feats: np.ndarray  # (B, n_image, feat_dim)
    text_ids: np.ndarray     # (B, n_text)
    output_ids: np.ndarray   # (B, n_output)

    @property
    def size(self):
        return self.text_ids.shape[0]


def tau_at(step: int, cfg: TrainConfig) -> float:
    """Exponentially decayed temperature: tau(0)=tau_initial and
    tau(total_steps)=tau_final, geometric in between."""
    if not 0 <= step <= cfg.total_steps:
        raise ContractViolation("step outside [0, total_steps]")
    frac = step / cfg.total_steps
    return cfg.tau_initial * (cfg.tau_final / cfg.tau_initial) ** frac


def gumbel_noise(rng: np.random.Generator, shape) -> np.ndarray:
    """Gumbel(0,1) samples via the inverse CDF -ln(-ln(u))."""
    u = np.clip(rng.random(shape), 1e-12, 1.0 - 1e-12)
    return -np.log(-np.log(u))


def gumbel_softmax_rows(decisions, tau: float, noise) -> ad.Tensor:
    """Row-wise softmax of (decisions + noise) / tau; rows sum to 1."""
    if tau <= 0.0:
        raise ContractViolation("gumbel softmax temperature must be > 0")
    d = decisions if isinstance(decisions, ad.Tensor) else ad.Tensor(decisions)
    return ad.softmax_lastdim((d + ad.constant(noise)) * (1.0 / tau))


def ste_mask(d_relaxed: ad.Tensor) -> ad.Tensor:
    """Hard keep flags (last-axis argmax; ties drop) with a straight-through
    backward: the flags' adjoint lands on the relaxed keep column unchanged."""
    return ad.ste_hard_decision(d_relaxed)[..., 1]


def build_training_mask(m_image, n_text: int, m_output) -> np.ndarray:
    """Full-sequence mask matrix: the token keep flags broadcast over columns,
    intersected with the causal mask, with the diagonal forced to 1."""
    m_image = np.asarray(m_image, dtype=np.float64).reshape(-1)
    m_output = np.asarray(m_output, dtype=np.float64).reshape(-1)
    if n_text < 0:
        raise ContractViolation("n_text must be >= 0")
    flags = np.concatenate([m_image, np.ones(n_text), m_output])
    n = flags.shape[0]
    g = causal_mask(n) * flags[None, :]
    np.fill_diagonal(g, 1.0)
    return g


def _mask_matrix_t(flags: ad.Tensor, n: int) -> ad.Tensor:
    """Differentiable (B, N, N) version of ``build_training_mask``."""
    tri = ad.constant(causal_mask(n))
    eye = np.eye(n)
    g = flags.reshape(flags.shape[0], 1, n) * tri
    return g * ad.constant(1.0 - eye) + ad.constant(eye)


def keep_rate_regularizer(m_image, m_output, rate_image: float,
                          rate_output: float, min_output_len: int) -> float:
    """|keep fraction - target| for image tokens, plus the same for output
    tokens when the sequence is long enough. Empty image sets contribute 0."""
    m_image = np.asarray(m_image, dtype=np.float64).reshape(-1)
    m_output = np.asarray(m_output, dtype=np.float64).reshape(-1)
    value = 0.0
    if m_image.size:
        value += abs(m_image.mean() - rate_image)
    if m_output.size >= min_output_len and m_output.size:
        value += abs(m_output.mean() - rate_output)
    return value


# -- differentiable forward ------------------------------------------------------


def _layer_forward_t(params, idx, x: ad.Tensor, mask: ad.Tensor,
                     num_heads: int) -> ad.Tensor:
    bsz, n, d = x.shape
    dh = d // num_heads
    normed = ad.rms_norm(x, params[f"layers.{idx}.attn_norm_gain"])
    qkv = ad.concat([params[f"layers.{idx}.w_q"], params[f"layers.{idx}.w_k"],
                     params[f"layers.{idx}.w_v"]], axis=1)
    fused = (normed @ qkv).reshape(bsz, n, 3, num_heads, dh).transpose(0, 2, 3, 1, 4)
    q, k, v = fused[:, 0], fused[:, 1], fused[:, 2]
    scores = (q @ k.transpose(0, 1, 3, 2)) * dh ** -0.5
    probs = ad.masked_softmax_lastdim(scores, mask)
    ctx = (probs @ v).transpose(0, 2, 1, 3).reshape(bsz, n, d)
    x = x + ctx @ params[f"layers.{idx}.w_o"]
    normed2 = ad.rms_norm(x, params[f"layers.{idx}.ffn_norm_gain"])
    return x + ad.silu(normed2 @ params[f"layers.{idx}.ffn_in"]) \
        @ params[f"layers.{idx}.ffn_out"]


def _image_predictor_t(params, x: ad.Tensor, num_heads: int) -> ad.Tensor:
    bsz, n, _ = x.shape
    x = x @ params["image.proj"] + params["image.proj_bias"]
    h = x.shape[-1]
    dh = h // num_heads
    for i in range(2):
        pre = f"image.block{i}."
        normed = ad.rms_norm(x, params[pre + "attn_norm_gain"])
        def heads(t):
            return t.reshape(bsz, n, num_heads, dh).transpose(0, 2, 1, 3)
        q = heads(normed @ params[pre + "w_q"])
        k = heads(normed @ params[pre + "w_k"])
        v = heads(normed @ params[pre + "w_v"])
        scores = (q @ k.transpose(0, 1, 3, 2)) * dh ** -0.5
        probs = ad.softmax_lastdim(scores)  # bidirectional
        ctx = (probs @ v).transpose(0, 2, 1, 3).reshape(bsz, n, h)
        x = x + ctx @ params[pre + "w_o"]
        normed2 = ad.rms_norm(x, params[pre + "ffn_norm_gain"])
        x = x + ad.silu(normed2 @ params[pre + "ffn_in"]) @ params[pre + "ffn_out"]
    return _mlp_t(params, "image", x)


def _mlp_t(params, which: str, x: ad.Tensor) -> ad.Tensor:
    i = 0
    while f"{which}.mlp{i}.w" in params:
        x = x @ params[f"{which}.mlp{i}.w"] + params[f"{which}.mlp{i}.b"]
        if f"{which}.mlp{i + 1}.w" in params:
            x = ad.silu(x)
        i += 1
    return x


def _output_predictor_t(params, x: ad.Tensor) -> ad.Tensor:
    x = x @ params["output.proj"] + params["output.proj_bias"]
    return _mlp_t(params, "output", x)


def training_forward(params, model_cfg, batch: TrainBatch, sparsity: SparsityConfig,
                     train_cfg: TrainConfig, tau: float,
                     noise_image=None, noise_output=None,
                     forced_masks=None, hard_drop=False, trace_hidden=None,
                     predictor_heads: int = 4, lambda_weight=None):
    """Build the training graph for one equal-shape batch.

    Returns (loss Tensor, info dict). ``forced_masks`` bypasses the
    predictors with fixed (B, n_image) and (B, n_output) keep flags, which
    is how the masked-vs-hard equivalence suite drives this path.
    ``hard_drop`` zeroes dropped token vectors instead of masking attention
    (the documented breakage variant).
    """
    bsz = batch.size
    n_img = batch.image_feats.shape[1]
    n_txt = batch.text_ids.shape[1]
    n_out = batch.output_ids.shape[1]
    n_total = n_img + n_txt + n_out
    d = model_cfg.hidden_dim
    split = sparsity.sparsify_layer
    positions = np.arange(n_total)
    pos = params["pos_emb"][positions]
    segments = []
    if n_img:
        segments.append(ad.constant(batch.image_feats) @ params["image_proj"])
    if n_txt:
        segments.append(params["token_emb"][batch.text_ids])
    segments.append(params["token_emb"][batch.output_ids])
    x = ad.concat(segments, axis=1) if len(segments) > 1 else segments[0]
    x = x + pos
    tri = ad.constant(causal_mask(n_total)[None, None, :, :])
    for li in range(split):
        x = _layer_forward_t(params, li, x, tri, model_cfg.num_heads)
        if trace_hidden is not None:
            trace_hidden.append(x.data)

    if forced_masks is not None:
        m_img = ad.constant(np.asarray(forced_masks[0], dtype=np.float64))
        m_out = ad.constant(np.asarray(forced_masks[1], dtype=np.float64))
    else:
        # Predictors read the sparsify-layer features through a stop-gradient:
        # with the regularizer weight in the hundreds, letting its gradient
        # reach the trunk through this branch drowns the task loss at toy
        # scale. The predictors still train end-to-end through the masked
        # attention and the straight-through mask path.
        if n_img:
            d_img = _image_predictor_t(params, x[:, :n_img].detach(),
                                       predictor_heads)
            relaxed = gumbel_softmax_rows(d_img, tau, noise_image)
            m_img = ste_mask(relaxed)
        else:
            m_img = ad.constant(np.zeros((bsz, 0)))
        d_out = _output_predictor_t(params, x[:, n_img + n_txt:].detach())
        relaxed_out = gumbel_softmax_rows(d_out, tau, noise_output)
        m_out = ste_mask(relaxed_out)

    flags = ad.concat(
        [m_img, ad.constant(np.ones((bsz, n_txt))), m_out], axis=1)
    if hard_drop:
        x = x * flags.reshape(bsz, n_total, 1)
        mask_beyond = tri
    else:
        mask_beyond = _mask_matrix_t(flags, n_total).reshape(bsz, 1, n_total, n_total)
    for li in range(split, model_cfg.num_layers):
        x = _layer_forward_t(params, li, x, mask_beyond, model_cfg.num_heads)
        if trace_hidden is not None:
            trace_hidden.append(x.data)

    pred_rows = x[:, n_img + n_txt - 1: n_total - 1]
    logits = ad.rms_norm(pred_rows, params["final_norm_gain"]) @ params["lm_head"]
    shift = ad.constant(np.max(logits.data, axis=-1, keepdims=True))
    lse = (logits - shift).exp().sum(axis=-1).log() + shift.reshape(bsz, n_out)
    rows = np.arange(bsz)[:, None], np.arange(n_out)[None, :], batch.output_ids
    picked = logits[rows]
    ce = (lse - picked).mean()

    reg = ad.constant(np.zeros(()))
    if n_img:
        reg = reg + (m_img.mean(axis=1) - sparsity.image_keep_rate).abs().mean()
    gated = n_out >= train_cfg.min_output_len
    if gated and n_out:
        reg = reg + (m_out.mean(axis=1) - sparsity.output_keep_rate).abs().mean()
    lam = train_cfg.lambda_reg if lambda_weight is None else lambda_weight
    loss = ce + lam * reg
    info = {
        "cross_entropy": ce.item(),
        "regularizer": reg.item(),
        "image_keep_fraction": float(m_img.data.mean()) if n_img else float("nan"),
        "output_keep_fraction": float(m_out.data.mean()) if gated else float("nan"),
    }
    return loss, info


# -- optimizer and step ----------------------------------------------------------


def _grouped_arrays(model: Model, predictors: Predictors):
    for name, arr in model.parameters().items():
        yield "model." + name, arr
    for name, arr in predictors.parameters().items():
        yield "predictor." + name, arr


class SgdMomentum:
    """Plain SGD with momentum and two learning-rate groups: model weights
    and predictor weights. Update order is sorted by name, so steps are
    deterministic."""

    def __init__(self, model: Model, predictors: Predictors, cfg: TrainConfig):
        self.cfg = cfg
        self.slots = {}
        for name, arr in _grouped_arrays(model, predictors):
            lr = cfg.lr_predictor if name.startswith("predictor.") else cfg.lr_model
            self.slots[name] = (arr, np.zeros_like(arr), lr)

    def step(self, grads: dict):
        for name in sorted(self.slots):
            arr, vel, lr = self.slots[name]
            g = grads.get(name)
            if g is None:
                continue
            vel *= self.cfg.momentum
            vel -= lr * g
            arr += vel


class Adam:
    """Adam with the same two learning-rate groups; the default optimizer.

    Plain SGD with momentum stalls on the attention patterns the synthetic
    tasks need and leaves the predictors in degenerate all-keep/all-drop
    states, so the adaptive update is the configured default.
    """

    BETA1, BETA2, EPS = 0.9, 0.999, 1e-8

    def __init__(self, model: Model, predictors: Predictors, cfg: TrainConfig):
        self.t = 0
        self.slots = {}
        for name, arr in _grouped_arrays(model, predictors):
            lr = cfg.lr_predictor if name.startswith("predictor.") else cfg.lr_model
            self.slots[name] = (arr, np.zeros_like(arr), np.zeros_like(arr), lr)

    def step(self, grads: dict):
        self.t += 1
        for name in sorted(self.slots):
            arr, m, v, lr = self.slots[name]
            g = grads.get(name)
            if g is None:
                continue
            m *= self.BETA1
            m += (1.0 - self.BETA1) * g
            v *= self.BETA2
            v += (1.0 - self.BETA2) * g * g
            m_hat = m / (1.0 - self.BETA1 ** self.t)
            v_hat = v / (1.0 - self.BETA2 ** self.t)
            arr -= lr * m_hat / (np.sqrt(v_hat) + self.EPS)


def make_optimizer(model: Model, predictors: Predictors, cfg: TrainConfig):
    if cfg.optimizer == "sgd":
        return SgdMomentum(model, predictors, cfg)
    return Adam(model, predictors, cfg)


def _random_control_masks(rng, bsz, n_img, n_out, sparsity: SparsityConfig):
    """Fresh exact-count random keep flags for the frozen-predictor control."""
    m_img = np.zeros((bsz, n_img))
    m_out = np.zeros((bsz, n_out))
    k_img = int(np.floor(sparsity.image_keep_rate * n_img))
    k_out = int(np.floor(sparsity.output_keep_rate * n_out))
    for b in range(bsz):
        if n_img:
            m_img[b, rng.choice(n_img, size=k_img, replace=False)] = 1.0
        m_out[b, rng.choice(n_out, size=k_out, replace=False)] = 1.0
    return m_img, m_out


def training_step(model: Model, predictors: Predictors, batch: TrainBatch,
                  train_cfg: TrainConfig, sparsity: SparsityConfig,
                  step_index: int, optimizer, rng,
                  random_mask_control: bool = False) -> LossBreakdown:
    """One forward/backward/update pass; parameters are updated in place.

    With ``random_mask_control`` the predictors are frozen and every sample
    gets fresh random keep flags at the configured rates; only the model
    trains. This is the baseline the learned masks are compared against.
    """
    tau = tau_at(step_index, train_cfg)
    bsz = batch.size
    n_img = batch.image_feats.shape[1]
    n_out = batch.output_ids.shape[1]
    noise_image = gumbel_noise(rng, (bsz, n_img, 2)) if n_img else None
    noise_output = gumbel_noise(rng, (bsz, n_out, 2))
    leafs = {name: ad.Tensor(arr) for name, arr in model.parameters().items()}
    pred_names = set()
    for name, arr in predictors.parameters().items():
        leafs[name] = ad.Tensor(arr)
        pred_names.add(name)
    forced = None
    if random_mask_control:
        forced = _random_control_masks(rng, bsz, n_img, n_out, sparsity)
    lam = train_cfg.lambda_at(step_index)
    loss, info = training_forward(
        leafs, model.config, batch, sparsity, train_cfg, tau,
        noise_image=noise_image, noise_output=noise_output,
        forced_masks=forced,
        predictor_heads=predictors.config.num_heads, lambda_weight=lam)
    loss.backward()
    grads = {}
    for name, leaf in leafs.items():
        if leaf.grad is None:
            continue
        prefix = "predictor." if name in pred_names else "model."
        grads[prefix + name] = leaf.grad
    optimizer.step(grads)
    total = info["cross_entropy"] + lam * info["regularizer"]
    return LossBreakdown(
        cross_entropy=info["cross_entropy"],
        regularizer=info["regularizer"],
        total=total,
        image_keep_fraction=info["image_keep_fraction"],
        output_keep_fraction=info["output_keep_fraction"],
    )


def run_training(model: Model, predictors: Predictors, task,
                 train_cfg: TrainConfig, sparsity: SparsityConfig,
                 random_mask_control: bool = False) -> list:
    """Full training loop; returns one log record per step."""
    train_cfg.validate()
    sparsity.validate(model.config.num_layers)
    rng = np.random.default_rng(train_cfg.seed)
    noise_rng = np.random.default_rng((train_cfg.seed, 7))
    optimizer = make_optimizer(model, predictors, train_cfg)
    log = []
    for step in range(train_cfg.total_steps):
        batch = task.training_batch(rng, train_cfg.batch_size)
        breakdown = training_step(model, predictors, batch, train_cfg,
                                  sparsity, step, optimizer, noise_rng,
                                  random_mask_control=random_mask_control)
        log.append({
            "step": step,
            "tau": tau_at(step, train_cfg),
            "cross_entropy": breakdown.cross_entropy,
            "regularizer": breakdown.regularizer,
            "total": breakdown.total,
            "image_keep_fraction": breakdown.image_keep_fraction,
            "output_keep_fraction": breakdown.output_keep_fraction,
        })
    return log


# -- sparsified evaluation --------------------------------------------------------


def evaluate_policy_loss(model: Model, predictors: Predictors, samples,
                         sparsity: SparsityConfig) -> float:
    """Teacher-forced mean cross-entropy under hard sparsified decoding.

    Each sample's prompt goes through sparse prefill; its target tokens are
    then fed one by one through cached sparse decoding, scoring every target
    against the logits produced before it is consumed. This is the same
    next-token loss the paper's static baselines are compared on, with the
    active policy deciding which tokens survive.
    """
    from .model import embed_inputs, embed_output_token
    from .sparsify import sparse_decode_with_cache, sparse_prefill

    total, count = 0.0, 0
    for sample in samples:
        state = embed_inputs(model, sample.image_feats, sample.text_ids)
        logits, cache, _ = sparse_prefill(model, predictors, state, sparsity)
        admissions = []
        for t, target in enumerate(sample.output_ids):
            shifted = logits - logits.max()
            log_z = np.log(np.exp(shifted).sum())
            total += float(log_z - shifted[target])
            count += 1
            if t + 1 < len(sample.output_ids):
                vec = embed_output_token(model, int(target), state.n_prefill + t)
                logits, _ = sparse_decode_with_cache(
                    model, predictors, cache, admissions, vec,
                    state.n_prefill + t, sparsity)
    return total / max(count, 1)
