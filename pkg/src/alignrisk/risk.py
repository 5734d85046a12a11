"""Risk-prediction math: hazard head, censored BCE, feature alignment and temporal attention.

Batched routines take a leading batch axis; the single-sample helpers named
after each operation wrap them for direct use.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import metrics as M
from . import nn
from .grid import ConfigurationError, DimensionError, bilinear_sample, pixel_grid
from .records import T_MAX, SurvivalLabel, censor_mask  # noqa: F401  (re-export)

PROB_CLAMP = 1e-7


# ---------------------------------------------------------------- hazard head

@dataclass
class RiskOutput:
    cum_score: np.ndarray
    prob: np.ndarray


@dataclass
class HazardHead:
    base_w: np.ndarray  # (d,)
    base_b: float
    step_w: np.ndarray  # (d, T)
    step_b: np.ndarray  # (T,)

    @classmethod
    def from_params(cls, params, name):
        return cls(params[f"{name}.base.w"][:, 0], float(params[f"{name}.base.b"][0]),
                   params[f"{name}.steps.w"], params[f"{name}.steps.b"])

    def to_params(self, name) -> dict:
        return {
            f"{name}.base.w": np.asarray(self.base_w, dtype=np.float64).reshape(-1, 1),
            f"{name}.base.b": np.array([self.base_b], dtype=np.float64),
            f"{name}.steps.w": np.asarray(self.step_w, dtype=np.float64),
            f"{name}.steps.b": np.asarray(self.step_b, dtype=np.float64),
        }


def init_hazard(params, name, din, rng, t_max=T_MAX):
    nn.init_linear(params, f"{name}.base", din, 1, rng, scale=0.01)
    nn.init_linear(params, f"{name}.steps", din, t_max, rng, scale=0.01)
    params[f"{name}.base.b"][:] = -2.0
    params[f"{name}.steps.b"][:] = 0.1


def hazard_fwd(f, params, name):
    """Cumulative score ``base(f) + cumsum(relu(steps(f)))`` for ``f`` of shape ``(B, d)``."""
    base, c_base = nn.linear_fwd(f, params, f"{name}.base")
    steps, c_steps = nn.linear_fwd(f, params, f"{name}.steps")
    hz, mask = nn.relu_fwd(steps)
    cum = base + np.cumsum(hz, axis=-1)
    return cum, (c_base, c_steps, mask)


def hazard_bwd(dcum, cache):
    c_base, c_steps, mask = cache
    dbase = dcum.sum(axis=-1, keepdims=True)
    dhz = np.cumsum(dcum[..., ::-1], axis=-1)[..., ::-1]
    df1, g1 = nn.linear_bwd(dbase, c_base)
    df2, g2 = nn.linear_bwd(nn.relu_bwd(dhz, mask), c_steps)
    return df1 + df2, {**g1, **g2}


def cumulative_probability(head: HazardHead, f) -> RiskOutput:
    params = head.to_params("h")
    cum, _ = hazard_fwd(np.asarray(f, dtype=np.float64)[None], params, "h")
    return RiskOutput(cum[0], nn.sigmoid(cum[0]))


# ---------------------------------------------------------------- censored BCE

def masked_bce_from_scores(cum, y, delta):
    """Masked BCE summed over horizons, per sample, with gradient w.r.t. the scores.

    Shapes ``(B, T)``; returns ``(loss (B,), dloss/dcum (B, T))``.
    """
    p = nn.sigmoid(cum)
    pc = np.clip(p, PROB_CLAMP, 1.0 - PROB_CLAMP)
    ell = -(y * np.log(pc) + (1.0 - y) * np.log(1.0 - pc))
    loss = (delta * ell).sum(axis=-1)
    inside = (p > PROB_CLAMP) & (p < 1.0 - PROB_CLAMP)
    grad = delta * (p - y) * inside
    return loss, grad


def masked_bce(pred: RiskOutput, label: SurvivalLabel) -> float:
    p = np.clip(np.asarray(pred.prob, dtype=np.float64), PROB_CLAMP, 1.0 - PROB_CLAMP)
    if p.shape != label.y.shape:
        raise DimensionError(f"prediction has {p.shape[0]} horizons, label {label.y.shape[0]}")
    y, d = label.y, label.delta
    return float(np.sum(d * -(y * np.log(p) + (1.0 - y) * np.log(1.0 - p))))


# ---------------------------------------------------------------- feature alignment

def _check_fmap_pair(a, b):
    if np.shape(a) != np.shape(b):
        raise DimensionError(f"feature maps differ: {np.shape(a)} vs {np.shape(b)}")


def loss_feat(f_pri_aligned, f_cur, field, alpha=0.1, beta=1.0, lam=1e-5) -> float:
    """``alpha * MSE(f_pri_aligned, f_cur) + beta * (smoothness + lam * jd_penalty)``."""
    _check_fmap_pair(f_pri_aligned, f_cur)
    value, _, _ = loss_feat_batch(np.asarray(f_pri_aligned)[None], np.asarray(f_cur)[None],
                                  np.asarray(field)[None], alpha, beta, lam)
    return float(value)


def loss_feat_batch(fpa, fc, field, alpha, beta, lam):
    """Batch-mean feature loss; returns ``(value, d/d fpa, d/d field)``."""
    B = fpa.shape[0]
    diff = fpa - fc
    n = diff[0].size
    value = alpha * float(np.sum(diff * diff)) / (n * B)
    dfpa = (2.0 * alpha / (n * B)) * diff
    dfield = np.zeros_like(field)
    if beta:
        for b in range(B):
            f = field[b]
            value += beta * (M.smoothness_energy(f) + lam * M.jd_penalty(M.jacobian_map(f))) / B
            dfield[b] = (beta / B) * (M.smoothness_grad(f) + lam * M.jd_penalty_grad(f))
    return value, dfpa, dfield


def warp_features_fwd(fmap, field):
    """Channel-wise bilinear pull warp of ``(B, C, h, w)`` maps by ``(B, 2, h, w)`` fields."""
    B, C, h, w = fmap.shape
    if field.shape != (B, 2, h, w):
        raise DimensionError(f"field {field.shape} does not match feature grid {(B, 2, h, w)}")
    xs, ys = pixel_grid(h, w)
    out, dx, dy = bilinear_sample(fmap, xs + field[:, 0], ys + field[:, 1], with_grad=True)
    return out, (dx, dy)


def warp_features_bwd(dout, cache):
    """Gradient with respect to the field (feature maps are frozen inputs)."""
    dx, dy = cache
    return np.stack([(dout * dx).sum(axis=1), (dout * dy).sum(axis=1)], axis=1)


def warp_featuremap(fmap, field) -> np.ndarray:
    fmap = np.asarray(fmap, dtype=np.float64)
    field = np.asarray(field, dtype=np.float64)
    if fmap.ndim != 3 or field.shape != (2,) + fmap.shape[1:]:
        raise DimensionError(f"field {field.shape} does not match feature map {fmap.shape}")
    out, _ = warp_features_fwd(fmap[None], field[None])
    return out[0]


def diff_features(f_cur, f_pri_aligned) -> np.ndarray:
    _check_fmap_pair(f_cur, f_pri_aligned)
    return np.asarray(f_cur, dtype=np.float64) - np.asarray(f_pri_aligned, dtype=np.float64)


def init_alignment_block(params, name, channels, rng, hidden=16, final_scale=0.0):
    nn.init_conv(params, f"{name}.conv1", 2 * channels, hidden, rng)
    nn.init_conv(params, f"{name}.conv2", hidden, 2, rng, scale=final_scale)


def alignment_block_fwd(fc, fp, params, name):
    """Predict a feature-resolution field from concatenated current/prior maps."""
    x = np.concatenate([fc, fp], axis=1)
    h1, c1 = nn.conv3x3_fwd(x, params, f"{name}.conv1")
    h2, c2 = nn.instance_norm_fwd(h1)
    h3, c3 = nn.relu_fwd(h2)
    field, c4 = nn.conv3x3_fwd(h3, params, f"{name}.conv2")
    return field, (c1, c2, c3, c4)


def alignment_block_bwd(dfield, cache):
    """Parameter gradients only; the encoder inputs are frozen."""
    c1, c2, c3, c4 = cache
    d3, g2 = nn.conv3x3_bwd(dfield, c4)
    d2 = nn.relu_bwd(d3, c3)
    d1 = nn.instance_norm_bwd(d2, c2)
    _, g1 = nn.conv3x3_bwd(d1, c1)
    return {**g1, **g2}


def alignment_block(f_cur, f_pri, params, name="align") -> np.ndarray:
    _check_fmap_pair(f_cur, f_pri)
    field, _ = alignment_block_fwd(np.asarray(f_cur)[None], np.asarray(f_pri)[None], params, name)
    return field[0]


# ---------------------------------------------------------------- time encoding

PE_MONTHS_PER_POSITION = 6.0
PE_TABLE_LENGTH = 128


def sinusoid_table(length: int, dim: int) -> np.ndarray:
    if dim % 2:
        raise ConfigurationError("positional encoding dim must be even")
    pos = np.arange(length, dtype=np.float64)[:, None]
    i = np.arange(dim // 2, dtype=np.float64)[None, :]
    ang = pos / np.power(10000.0, 2.0 * i / dim)
    table = np.empty((length, dim))
    table[:, 0::2] = np.sin(ang)
    table[:, 1::2] = np.cos(ang)
    return table


def time_positional_encoding(gap_months: float, dim: int) -> np.ndarray:
    """Encoding of a screening gap: months/6 is the table position, linearly interpolated."""
    if gap_months < 0:
        raise ValueError("gap must be >= 0")
    table = sinusoid_table(PE_TABLE_LENGTH, dim)
    pos = min(gap_months / PE_MONTHS_PER_POSITION, PE_TABLE_LENGTH - 1.0)
    lo = int(np.floor(pos))
    frac = pos - lo
    if frac == 0.0:
        return table[lo].copy()
    return (1.0 - frac) * table[lo] + frac * table[lo + 1]


# ---------------------------------------------------------------- temporal attention

@dataclass
class AttentionConfig:
    dim: int = 16
    heads: int = 2
    ff_hidden: int = 32
    dropout: float = 0.0

    def __post_init__(self):
        if self.dim % self.heads:
            raise ConfigurationError(f"dim {self.dim} not divisible by heads {self.heads}")
        if self.dropout != 0.0:
            raise ConfigurationError("dropout is not supported; use 0.0")


def init_attention(params, name, cfg: AttentionConfig, rng):
    d = cfg.dim
    for k in ("q", "k", "v", "o"):
        nn.init_linear(params, f"{name}.{k}", d, d, rng, scale=1.0 / np.sqrt(d))
    nn.init_linear(params, f"{name}.ff1", d, cfg.ff_hidden, rng)
    nn.init_linear(params, f"{name}.ff2", cfg.ff_hidden, d, rng, scale=1.0 / np.sqrt(cfg.ff_hidden))
    for ln in ("ln1", "ln2"):
        params[f"{name}.{ln}.g"] = np.ones(d)
        params[f"{name}.{ln}.b"] = np.zeros(d)


def attention_fwd(x, params, name, cfg: AttentionConfig):
    """Post-norm transformer block over the time axis of ``x`` ``(B, T, d)``."""
    B, T, d = x.shape
    if d != cfg.dim:
        raise ConfigurationError(f"token width {d} != attention dim {cfg.dim}")
    h, dh = cfg.heads, d // cfg.heads
    q, cq = nn.linear_fwd(x, params, f"{name}.q")
    k, ck = nn.linear_fwd(x, params, f"{name}.k")
    v, cv = nn.linear_fwd(x, params, f"{name}.v")
    split = lambda t: t.reshape(B, T, h, dh).transpose(0, 2, 1, 3)  # noqa: E731
    qh, kh, vh = split(q), split(k), split(v)
    scale = 1.0 / np.sqrt(dh)
    attn = nn.softmax(qh @ kh.transpose(0, 1, 3, 2) * scale)
    oh = attn @ vh
    o = oh.transpose(0, 2, 1, 3).reshape(B, T, d)
    y, co = nn.linear_fwd(o, params, f"{name}.o")
    x1, cl1 = nn.layer_norm_fwd(x + y, params, f"{name}.ln1")
    f1, cf1 = nn.linear_fwd(x1, params, f"{name}.ff1")
    f2, cr = nn.relu_fwd(f1)
    f3, cf2 = nn.linear_fwd(f2, params, f"{name}.ff2")
    x2, cl2 = nn.layer_norm_fwd(x1 + f3, params, f"{name}.ln2")
    cache = (cq, ck, cv, qh, kh, vh, attn, scale, co, cl1, cf1, cr, cf2, cl2, (B, T, h, dh))
    return x2, attn, cache


def attention_bwd(dx2, cache):
    cq, ck, cv, qh, kh, vh, attn, scale, co, cl1, cf1, cr, cf2, cl2, (B, T, h, dh) = cache
    grads = {}
    ds2, g = nn.layer_norm_bwd(dx2, cl2)
    grads.update(g)
    df2, g = nn.linear_bwd(ds2, cf2)
    grads.update(g)
    df1, g = nn.linear_bwd(nn.relu_bwd(df2, cr), cf1)
    grads.update(g)
    dx1 = ds2 + df1
    ds1, g = nn.layer_norm_bwd(dx1, cl1)
    grads.update(g)
    do, g = nn.linear_bwd(ds1, co)
    grads.update(g)
    doh = do.reshape(B, T, h, dh).transpose(0, 2, 1, 3)
    dattn = doh @ vh.transpose(0, 1, 3, 2)
    dvh = attn.transpose(0, 1, 3, 2) @ doh
    dscore = attn * (dattn - (dattn * attn).sum(axis=-1, keepdims=True)) * scale
    dqh = dscore @ kh
    dkh = dscore.transpose(0, 1, 3, 2) @ qh
    merge = lambda t: t.transpose(0, 2, 1, 3).reshape(B, T, h * dh)  # noqa: E731
    dx = ds1
    for dt, c in ((merge(dqh), cq), (merge(dkh), ck), (merge(dvh), cv)):
        d_in, g = nn.linear_bwd(dt, c)
        grads.update(g)
        dx = dx + d_in
    return dx, grads


def temporal_self_attention(seq, cfg: AttentionConfig, params, name="attn"):
    """Apply the block to one sequence ``(T, d)``; returns ``(output, attention weights)``."""
    x = np.asarray(seq, dtype=np.float64)
    out, attn, _ = attention_fwd(x[None], params, name, cfg)
    return out[0], attn[0]


# ---------------------------------------------------------------- frozen encoder

ENCODER_CHANNELS = (8, 16, 16)
ENCODER_SEED = 20240611


def encoder_params(seed: int = ENCODER_SEED) -> dict:
    """Fixed random weights for the three conv+pool stages of the stand-in encoder."""
    rng = np.random.default_rng(seed)
    params = {}
    cin = 1
    for i, cout in enumerate(ENCODER_CHANNELS):
        nn.init_conv(params, f"enc{i}", cin, cout, rng)
        params[f"enc{i}.b"] = rng.normal(0.0, 0.05, size=cout)
        cin = cout
    return params


_DEFAULT_ENCODER = encoder_params()


def tiny_encoder(image, params=None) -> np.ndarray:
    """Frozen conv/ReLU/avg-pool stack: ``(H, W)`` image -> ``(16, H/8, W/8)`` features."""
    return encode_batch(np.asarray(image, dtype=np.float64)[None], params)[0]


def encode_batch(images, params=None) -> np.ndarray:
    images = np.asarray(images, dtype=np.float64)
    H, W = images.shape[-2:]
    if H % 8 or W % 8:
        raise ConfigurationError(f"encoder needs H, W divisible by 8, got {(H, W)}")
    params = _DEFAULT_ENCODER if params is None else params
    x = images[:, None]
    for i in range(len(ENCODER_CHANNELS)):
        x = nn.conv3x3_apply(x, params[f"enc{i}.w"], params[f"enc{i}.b"])
        x = nn.avgpool2(np.maximum(x, 0.0))
    return x
