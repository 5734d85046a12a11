"""The six longitudinal alignment strategies wired into one risk predictor.

Every strategy shares the frozen encoder and emits three cumulative-risk
outputs: fused (current + prior via temporal attention), current-only and
prior-only. Strategies differ only in how the prior reaches the fused head.
"""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field as dc_field

import numpy as np

from . import nn
from . import risk as R
from .grid import ConfigurationError, resize_field, warp_bilinear
from .optim import Adam
from .records import ExamPair, SurvivalLabel
from .registration import RegistrationConfig, register
from .survival import EvalRecord, UndefinedMetricError, c_index

log = logging.getLogger(__name__)


class StrategyKind(str, enum.Enum):
    NOALIGN = "noalign"
    IMPLICIT = "implicit"
    FEATALIGN = "featalign"
    FEATALIGNREG = "featalignreg"
    IMGALIGN = "imgalign"
    IMGFEATALIGN = "imgfeatalign"

    @property
    def uses_alignment_block(self) -> bool:
        return self in (StrategyKind.FEATALIGN, StrategyKind.FEATALIGNREG)

    @property
    def uses_registration(self) -> bool:
        return self in (StrategyKind.IMGALIGN, StrategyKind.IMGFEATALIGN)

    @property
    def has_diff_token(self) -> bool:
        return self.uses_alignment_block or self.uses_registration


class TrainingDivergenceError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 40
    batch_size: int = 20
    lr: float = 1e-3
    weight_decay: float = 0.0
    seed: int = 0
    alpha: float = 0.1
    beta: float | None = None  # None: 0 for featalign, 1 for featalignreg
    lambda_jd: float = 1e-5
    head_hidden: int = 16
    attn_heads: int = 2
    align_init_scale: float = 0.05
    lr_patience: int = 5  # halve the learning rate after this many epochs without a better validation C-index
    stop_patience: int = 15  # stop after this many

    def beta_for(self, strategy: StrategyKind) -> float:
        if self.beta is not None and strategy is StrategyKind.FEATALIGNREG:
            return self.beta
        return 1.0 if strategy is StrategyKind.FEATALIGNREG else 0.0


@dataclass
class Model:
    strategy: StrategyKind
    params: dict
    attn: R.AttentionConfig
    beta: float = 0.0
    alpha: float = 0.1
    lambda_jd: float = 1e-5
    loss_curve: list = dc_field(default_factory=list)
    val_curve: list = dc_field(default_factory=list)
    best_epoch: int | None = None

    @property
    def channels(self) -> int:
        return self.attn.dim


# ---------------------------------------------------------------- inputs

@dataclass
class Inputs:
    """Frozen per-exam tensors; features are standardized per channel."""

    fc: np.ndarray
    fp: np.ndarray
    fpw: np.ndarray | None  # registration-aligned prior features (Img* strategies)
    pe: np.ndarray
    y: np.ndarray
    delta: np.ndarray

    def __len__(self):
        return self.fc.shape[0]

    def take(self, idx) -> "Inputs":
        return Inputs(self.fc[idx], self.fp[idx], None if self.fpw is None else self.fpw[idx],
                      self.pe[idx], self.y[idx], self.delta[idx])


def aligned_prior_features(strategy: StrategyKind, pair: ExamPair, field: np.ndarray, fp_raw: np.ndarray):
    """Raw encoder features of the registration-aligned prior for Img* strategies."""
    if strategy is StrategyKind.IMGALIGN:
        return R.tiny_encoder(warp_bilinear(pair.prior, field))
    h, w = fp_raw.shape[1:]
    return R.warp_featuremap(fp_raw, resize_field(field, h, w))


def encode_pairs(strategy: StrategyKind, pairs, fields=None) -> dict:
    """Raw (unstandardized) features for a list of pairs."""
    strategy = StrategyKind(strategy)
    fc = R.encode_batch(np.stack([p.current for p in pairs]))
    fp = R.encode_batch(np.stack([p.prior for p in pairs]))
    fpw = None
    if strategy.uses_registration:
        if fields is None:
            raise ConfigurationError(f"{strategy.value} needs registration fields")
        fpw = np.stack([aligned_prior_features(strategy, p, f, fp[i]) for i, (p, f) in enumerate(zip(pairs, fields))])
    return {"fc": fc, "fp": fp, "fpw": fpw}


def build_inputs(model: Model, pairs, raw: dict) -> Inputs:
    mu = model.params["norm.mean"][None, :, None, None]
    sd = model.params["norm.std"][None, :, None, None]
    std = lambda a: None if a is None else (a - mu) / sd  # noqa: E731
    C = model.channels
    return Inputs(
        std(raw["fc"]), std(raw["fp"]), std(raw["fpw"]),
        np.stack([R.time_positional_encoding(p.gap_months, C) for p in pairs]),
        np.stack([p.label.y for p in pairs]),
        np.stack([p.label.delta for p in pairs]),
    )


# ---------------------------------------------------------------- model

def init_model(strategy, channels: int, cfg: TrainConfig, norm_mean=None, norm_std=None) -> Model:
    strategy = StrategyKind(strategy)
    rng = np.random.default_rng([cfg.seed, 1])
    attn = R.AttentionConfig(dim=channels, heads=cfg.attn_heads, ff_hidden=2 * channels)
    p = {}
    p["norm.mean"] = np.zeros(channels) if norm_mean is None else np.asarray(norm_mean, dtype=np.float64)
    p["norm.std"] = np.ones(channels) if norm_std is None else np.asarray(norm_std, dtype=np.float64)
    n_tokens = 3 if strategy.has_diff_token else 2
    for head, din in (("cur", channels), ("pri", channels), ("fused", n_tokens * channels)):
        nn.init_linear(p, f"{head}.hidden", din, cfg.head_hidden, rng)
        R.init_hazard(p, f"{head}.hazard", cfg.head_hidden, rng)
    R.init_attention(p, "attn", attn, rng)
    if strategy is StrategyKind.IMPLICIT:
        nn.init_conv(p, "implicit.conv1", 2 * channels, 2 * channels, rng)
        nn.init_conv(p, "implicit.conv2", 2 * channels, 2 * channels, rng)
    if strategy.uses_alignment_block:
        R.init_alignment_block(p, "align", channels, rng, final_scale=cfg.align_init_scale)
    if strategy.has_diff_token:
        p["norm.diff_mean"] = np.zeros(channels)
        p["norm.diff_std"] = np.ones(channels)
    return Model(strategy, p, attn, beta=cfg.beta_for(strategy), alpha=cfg.alpha, lambda_jd=cfg.lambda_jd)


FROZEN = ("norm.mean", "norm.std", "norm.diff_mean", "norm.diff_std")


def _head_fwd(z, params, name):
    h, c1 = nn.linear_fwd(z, params, f"{name}.hidden")
    a, c2 = nn.relu_fwd(h)
    cum, c3 = R.hazard_fwd(a, params, f"{name}.hazard")
    return cum, (c1, c2, c3)


def _head_bwd(dcum, cache):
    c1, c2, c3 = cache
    da, g3 = R.hazard_bwd(dcum, c3)
    dz, g1 = nn.linear_bwd(nn.relu_bwd(da, c2), c1)
    return dz, {**g1, **g3}


def forward(model: Model, x: Inputs):
    """Return cumulative scores per head plus everything backward needs."""
    s = model.strategy
    P = model.params
    B, C = x.fc.shape[:2]
    zc, _ = nn.gap_fwd(x.fc)
    zp, _ = nn.gap_fwd(x.fp)
    cache = {}
    out = {}
    field = fpa = None

    if s is StrategyKind.NOALIGN:
        tokens = np.stack([zc, zp], axis=1)
    elif s is StrategyKind.IMPLICIT:
        h, c1 = nn.conv3x3_fwd(np.concatenate([x.fc, x.fp], axis=1), P, "implicit.conv1")
        h, r1 = nn.relu_fwd(h)
        h, mp = nn.maxpool2_fwd(h)
        h, c2 = nn.conv3x3_fwd(h, P, "implicit.conv2")
        h, r2 = nn.relu_fwd(h)
        z, gshape = nn.gap_fwd(h)
        tokens = z.reshape(B, 2, C)
        cache["implicit"] = (c1, r1, mp, c2, r2, gshape)
    else:
        if s.uses_alignment_block:
            field, ca = R.alignment_block_fwd(x.fc, x.fp, P, "align")
            fpa, cw = R.warp_features_fwd(x.fp, field)
            cache["align"] = (ca, cw)
        else:
            fpa = x.fpw
        zpa, shape = nn.gap_fwd(fpa)
        zd = (zc - zpa - P["norm.diff_mean"]) / P["norm.diff_std"] + x.pe
        tokens = np.stack([zc, zpa, zd], axis=1)
        cache["fpa_shape"] = shape

    att, attn_w, c_att = R.attention_fwd(tokens, P, "attn", model.attn)
    cache["attn"] = c_att
    out["fused"], cache["fused"] = _head_fwd(att.reshape(B, -1), P, "fused")
    out["current"], cache["cur"] = _head_fwd(zc, P, "cur")
    out["prior"], cache["pri"] = _head_fwd(zp, P, "pri")
    out["attention"] = attn_w
    out["field"] = field
    out["fpa"] = fpa
    return out, cache


def backward(model: Model, x: Inputs, out, cache, dcum: dict, dfpa_extra=None, dfield_extra=None) -> dict:
    s = model.strategy
    B, C = x.fc.shape[:2]
    grads = {}

    def acc(g):
        for k, v in g.items():
            grads[k] = grads[k] + v if k in grads else v

    _, g = _head_bwd(dcum["current"], cache["cur"])
    acc(g)
    _, g = _head_bwd(dcum["prior"], cache["pri"])
    acc(g)
    dflat, g = _head_bwd(dcum["fused"], cache["fused"])
    acc(g)
    dtok, g = R.attention_bwd(dflat.reshape(B, -1, C), cache["attn"])
    acc(g)

    if s is StrategyKind.IMPLICIT:
        c1, r1, mp, c2, r2, gshape = cache["implicit"]
        d = nn.gap_bwd(dtok.reshape(B, 2 * C), gshape)
        d, g = nn.conv3x3_bwd(nn.relu_bwd(d, r2), c2)
        acc(g)
        d = nn.maxpool2_bwd(d, mp)
        _, g = nn.conv3x3_bwd(nn.relu_bwd(d, r1), c1)
        acc(g)
    elif s.uses_alignment_block:
        dzpa = dtok[:, 1] - dtok[:, 2] / model.params["norm.diff_std"]
        dfpa = nn.gap_bwd(dzpa, cache["fpa_shape"])
        if dfpa_extra is not None:
            dfpa = dfpa + dfpa_extra
        ca, cw = cache["align"]
        dfield = R.warp_features_bwd(dfpa, cw)
        if dfield_extra is not None:
            dfield = dfield + dfield_extra
        acc(R.alignment_block_bwd(dfield, ca))
    return grads


def loss_and_grads(model: Model, x: Inputs):
    """Mean over the batch of the three heads' masked BCE, plus the feature loss when aligning."""
    out, cache = forward(model, x)
    B = len(x)
    total = 0.0
    dcum = {}
    for head in ("fused", "current", "prior"):
        l, d = R.masked_bce_from_scores(out[head], x.y, x.delta)
        total += float(l.sum()) / B
        dcum[head] = d / B
    dfpa = dfield = None
    if model.strategy.uses_alignment_block:
        lf, dfpa, dfield = R.loss_feat_batch(out["fpa"], x.fc, out["field"], model.alpha,
                                             model.beta, model.lambda_jd)
        total += lf
    grads = backward(model, x, out, cache, dcum, dfpa, dfield)
    return total, grads


# ---------------------------------------------------------------- training

def feature_stats(raw: dict):
    both = np.concatenate([raw["fc"], raw["fp"]], axis=0)
    mean = both.mean(axis=(0, 2, 3))
    std = both.std(axis=(0, 2, 3))
    return mean, np.where(std > 1e-8, std, 1.0)


def set_diff_stats(model: Model, data: Inputs) -> None:
    """Standardize the current-minus-aligned-prior token; it is far smaller than the features.

    Alignment-block strategies take the statistics at the initial field.
    """
    fpa = data.fpw
    if model.strategy.uses_alignment_block:
        field, _ = R.alignment_block_fwd(data.fc, data.fp, model.params, "align")
        fpa, _ = R.warp_features_fwd(data.fp, field)
    d = data.fc.mean(axis=(2, 3)) - fpa.mean(axis=(2, 3))
    sd = d.std(axis=0)
    model.params["norm.diff_mean"] = d.mean(axis=0)
    model.params["norm.diff_std"] = np.where(sd > 1e-8, sd, 1.0)


def _val_c_index(model: Model, val: Inputs) -> float:
    out, _ = forward(model, val)
    recs = [EvalRecord(nn.sigmoid(out["fused"][i]), SurvivalLabel(val.y[i], val.delta[i], 0.0))
            for i in range(len(val))]
    try:
        return c_index(recs)
    except UndefinedMetricError:
        return float("nan")


def train(strategy, cohort, hyper: TrainConfig | None = None, fields=None, raw=None,
          val=None, val_raw=None, val_fields=None) -> Model:
    """Fit a strategy's trainable parts on ``cohort``; the encoder and any registration stay frozen.

    ``fields`` are the registration fields (one per pair) for Img* strategies;
    ``raw`` optionally supplies precomputed encoder features. With a ``val``
    cohort the fused-head C-index is tracked per epoch: the learning rate halves
    after ``lr_patience`` epochs without improvement, training stops after
    ``stop_patience``, and the best epoch's parameters are returned.
    """
    strategy = StrategyKind(strategy)
    hyper = hyper or TrainConfig()
    if not cohort:
        raise ValueError("empty cohort")
    shapes = {np.shape(p.current) for p in cohort}
    if len(shapes) != 1:
        raise ValueError(f"cohort mixes image shapes: {sorted(shapes)}")
    raw = raw if raw is not None else encode_pairs(strategy, cohort, fields)
    mean, std = feature_stats(raw)
    model = init_model(strategy, raw["fc"].shape[1], hyper, mean, std)
    data = build_inputs(model, cohort, raw)
    if strategy.has_diff_token:
        set_diff_stats(model, data)
    vdata = None
    if val:
        val_raw = val_raw if val_raw is not None else encode_pairs(strategy, val, val_fields)
        vdata = build_inputs(model, val, val_raw)
    opt = Adam(lr=hyper.lr, weight_decay=hyper.weight_decay)
    rng = np.random.default_rng([hyper.seed, 2])
    n = len(data)
    best, best_params, since_best, lr = -np.inf, None, 0, hyper.lr
    for epoch in range(hyper.epochs):
        order = rng.permutation(n)
        losses = []
        for start in range(0, n, hyper.batch_size):
            batch = data.take(order[start:start + hyper.batch_size])
            loss, grads = loss_and_grads(model, batch)
            if not np.isfinite(loss):
                raise TrainingDivergenceError(f"non-finite training loss at epoch {epoch}")
            losses.append(loss * len(batch))
            opt.step(model.params, {k: v for k, v in grads.items() if k not in FROZEN}, lr=lr)
        model.loss_curve.append(float(np.sum(losses)) / n)
        log.debug("%s epoch %d loss %.5f", strategy.value, epoch, model.loss_curve[-1])
        if vdata is None:
            continue
        score = _val_c_index(model, vdata)
        model.val_curve.append(score)
        if score > best:
            best, since_best = score, 0
            best_params = {k: v.copy() for k, v in model.params.items()}
            model.best_epoch = epoch
            continue
        since_best += 1
        if since_best >= hyper.stop_patience:
            break
        if since_best % hyper.lr_patience == 0:
            lr *= 0.5
    if best_params is not None:
        model.params = best_params
    return model


# ---------------------------------------------------------------- prediction

@dataclass
class Prediction:
    fused: R.RiskOutput
    current: R.RiskOutput
    prior: R.RiskOutput
    field: np.ndarray | None = None  # feature-resolution field for featalign variants
    diff: np.ndarray | None = None  # standardized difference features (aligned strategies)


def predict_batch(model: Model, pairs, raw=None, fields=None) -> list:
    raw = raw if raw is not None else encode_pairs(model.strategy, pairs, fields)
    x = build_inputs(model, pairs, raw)
    out, _ = forward(model, x)
    preds = []
    for i in range(len(pairs)):
        ro = {h: R.RiskOutput(out[h][i].copy(), nn.sigmoid(out[h][i])) for h in ("fused", "current", "prior")}
        diff = None if out["fpa"] is None else x.fc[i] - out["fpa"][i]
        field = None if out["field"] is None else out["field"][i].copy()
        preds.append(Prediction(ro["fused"], ro["current"], ro["prior"], field, diff))
    return preds


def predict(strategy, pair: ExamPair, model: Model, reg_cfg: RegistrationConfig | None = None,
            registration=None) -> Prediction:
    """Three risk outputs for one exam pair. Img* strategies need a registration or a config to run one."""
    strategy = StrategyKind(strategy)
    if strategy is not model.strategy:
        raise ConfigurationError(f"model was trained for {model.strategy.value}, not {strategy.value}")
    fields = None
    if strategy.uses_registration:
        if registration is None and reg_cfg is None:
            raise ConfigurationError(f"{strategy.value} needs a registration result or reg_cfg")
        if registration is None:
            registration = register(pair.current, pair.prior, reg_cfg)
        fields = [registration.final_field]
    return predict_batch(model, [pair], fields=fields)[0]


def model_tensors(model: Model) -> dict:
    """Parameters plus ``meta.*`` scalars needed to rebuild the model."""
    t = dict(model.params)
    t["meta.attn_heads"] = np.array([model.attn.heads], dtype=np.float64)
    t["meta.head_hidden"] = np.array([model.params["cur.hidden.w"].shape[1]], dtype=np.float64)
    t["meta.beta"] = np.array([model.beta])
    t["meta.alpha"] = np.array([model.alpha])
    t["meta.lambda_jd"] = np.array([model.lambda_jd])
    return t


def model_from_tensors(strategy, tensors: dict, cfg: TrainConfig | None = None) -> Model:
    cfg = cfg or TrainConfig()
    strategy = StrategyKind(strategy)
    channels = tensors["norm.mean"].shape[0]
    if "meta.attn_heads" in tensors:
        cfg = TrainConfig(**{**cfg.__dict__, "attn_heads": int(tensors["meta.attn_heads"][0]),
                             "head_hidden": int(tensors["meta.head_hidden"][0])})
    model = init_model(strategy, channels, cfg)
    for k in ("beta", "alpha", "lambda_jd"):
        if f"meta.{k}" in tensors:
            setattr(model, k, float(tensors[f"meta.{k}"][0]))
    missing = set(model.params) - set(tensors)
    if missing:
        raise ValueError(f"checkpoint lacks tensors: {sorted(missing)}")
    model.params = {k: np.asarray(tensors[k], dtype=np.float64) for k in model.params}
    return model
