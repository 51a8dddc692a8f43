"""Pretraining objectives: masked-ROI modelling, latent alignment, EMA targets.

One step works on two pseudo-FC views of every scan in a batch. View A feeds
the online branch unmasked (embedding ``Z``, predictor output ``q(Z)``) and the
masked-ROI branch with a fresh mask; view B feeds the EMA target branch
(``Z_hat``) without gradient. The online and masked branches share weights.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from . import encoder as enc
from . import numerics as nx
from .connectome import make_drop_plan, pfc_augment, view_seed
from .encoder import EncoderConfig
from .numerics import Tensor

DEFAULT_TAU = 0.996
DEFAULT_LAMBDA_C = 0.1
DEFAULT_LAMBDA_R = 5.0


class MaskError(ValueError):
    pass


@dataclass(frozen=True)
class MaskPlan:
    indices: tuple[int, ...]
    seed: int = 0

    def __len__(self):
        return len(self.indices)


@dataclass(frozen=True)
class LossWeights:
    lambda_c: float = DEFAULT_LAMBDA_C
    lambda_r: float = DEFAULT_LAMBDA_R


@dataclass(frozen=True)
class Objectives:
    """Which loss terms are active (the ablation switches)."""

    latent: bool = True
    mrm_cls: bool = True
    mrm_rec: bool = True

    @classmethod
    def without(cls, names: Sequence[str]) -> "Objectives":
        names = [n.strip() for n in names if n.strip()]
        bad = set(names) - {"latent", "mrm_cls", "mrm_rec"}
        if bad:
            raise ValueError(f"unknown objective(s): {sorted(bad)}")
        obj = cls(**{n: False for n in names})
        if not (obj.latent or obj.mrm_cls or obj.mrm_rec):
            raise ValueError("cannot disable every objective")
        return obj

    @property
    def label(self) -> str:
        return "+".join(n for n in ("latent", "mrm_cls", "mrm_rec") if getattr(self, n))


def sample_mask(v_rois: int, mask_ratio: float, seed: int) -> MaskPlan:
    if not 0.0 < mask_ratio < 1.0:
        raise MaskError(f"mask_ratio must be in (0, 1), got {mask_ratio}")
    p = int(round(mask_ratio * v_rois))
    if p < 1 or p >= v_rois:
        raise MaskError(f"mask_ratio {mask_ratio} gives P={p} masked ROIs of V={v_rois}")
    rng = np.random.default_rng(seed)
    idx = np.sort(rng.choice(v_rois, size=p, replace=False))
    return MaskPlan(tuple(int(i) for i in idx), int(seed))


# ---------------------------------------------------------------------------
# heads


def head_shapes(cfg: EncoderConfig) -> dict[str, tuple[int, ...]]:
    v, dv = cfg.v_rois, cfg.embedding_dim
    shapes = {}
    for h in ("cls", "rec"):
        shapes[f"{h}.w1"] = (v, v)
        shapes[f"{h}.b1"] = (v,)
        shapes[f"{h}.w2"] = (v, v)
        shapes[f"{h}.b2"] = (v,)
    shapes["pred.w1"] = (dv, dv)
    shapes["pred.b1"] = (dv,)
    shapes["pred.w2"] = (dv, dv)
    shapes["pred.b2"] = (dv,)
    return shapes


def online_shapes(cfg: EncoderConfig) -> dict[str, tuple[int, ...]]:
    """Canonical order of every trainable parameter: encoder, readout, heads, predictor."""
    return {**enc.param_shapes(cfg), **head_shapes(cfg)}


def _mlp(params: Mapping[str, Tensor], prefix: str, x: Tensor) -> Tensor:
    h = nx.gelu(nx.add(nx.matmul(x, params[prefix + ".w1"]), params[prefix + ".b1"]))
    return nx.add(nx.matmul(h, params[prefix + ".w2"]), params[prefix + ".b2"])


def predictor_forward(params: Mapping[str, Tensor], z) -> Tensor:
    """Two affine layers with GELU between (D*V -> D*V -> D*V); ``z`` is one embedding or a batch."""
    z = nx.as_tensor(z, dtype=params["pred.w1"].dtype)
    if len(z.shape) == 1:
        return nx.reshape(_mlp(params, "pred", nx.reshape(z, (1, z.shape[0]))), z.shape)
    return _mlp(params, "pred", z)


def cls_head(params, o) -> Tensor:
    return _mlp(params, "cls", o)


def rec_head(params, o) -> Tensor:
    return _mlp(params, "rec", o)


@dataclass
class Model:
    """Online parameters (trainable) and the EMA target (encoder + readout only)."""

    cfg: EncoderConfig
    online: dict[str, np.ndarray]
    target: dict[str, np.ndarray]

    @property
    def encoder_params(self) -> dict[str, np.ndarray]:
        return {k: self.online[k] for k in enc.param_names(self.cfg)}


def init_model(cfg: EncoderConfig, seed: int, dtype=np.float32) -> Model:
    rng = np.random.default_rng(seed)
    online = enc.init_params(cfg, rng, dtype)
    for name, shape in head_shapes(cfg).items():
        if ".b" in name:
            online[name] = np.zeros(shape, dtype=dtype)
        else:
            online[name] = rng.normal(0.0, enc.INIT_STD, size=shape).astype(dtype)
    target = {k: online[k].copy() for k in enc.param_names(cfg)}
    return Model(cfg, online, target)


# ---------------------------------------------------------------------------
# losses


@dataclass
class MrmOutputs:
    targets: Tensor  # (N, V) original connection profiles of masked ROIs
    cls: Tensor  # (N, V)
    rec: Tensor  # (N, V)

    @property
    def n(self) -> int:
        return self.targets.shape[0]


def loss_infonce(out: MrmOutputs) -> Tensor:
    """-(1/N) sum_i log softmax_j(c_i . x'_j)[i], negatives over all N masked patches."""
    scores = nx.matmul(out.cls, nx.transpose(out.targets))
    pos = nx.sum(nx.mul(out.cls, out.targets), axis=-1)
    return nx.mean(nx.sub(nx.logsumexp(scores, axis=-1), pos))


def loss_recon(out: MrmOutputs) -> Tensor:
    """Mean over masked patches of the squared L2 distance (summed over components)."""
    return nx.scale(nx.squared_error(out.rec, out.targets), 1.0 / out.n)


def loss_latent(q, z_hat) -> Tensor:
    """``2 - 2 cos(q, z_hat)``, averaged over a leading batch axis if present."""
    q, z_hat = nx.as_tensor(q), nx.as_tensor(z_hat)
    qn = nx.l2_norm(q, axis=-1)
    zn = nx.l2_norm(z_hat, axis=-1)
    if np.any(qn.value <= 1e-12) or np.any(zn.value <= 1e-12):
        raise nx.NumericError("loss_latent: embedding norm below 1e-12 (collapsed representation)")
    cos = nx.div(nx.sum(nx.mul(q, z_hat), axis=-1), nx.mul(qn, zn))
    return nx.mean(nx.sub(2.0, nx.scale(cos, 2.0)))


def total_loss(l_latent, l_c, l_r, w: LossWeights = LossWeights()):
    """``L_latent + lambda_c * L_c + lambda_r * L_r`` for Tensors or floats."""
    if isinstance(l_latent, Tensor) or isinstance(l_c, Tensor) or isinstance(l_r, Tensor):
        return nx.add(nx.add(l_latent, nx.scale(l_c, w.lambda_c)), nx.scale(l_r, w.lambda_r))
    return l_latent + w.lambda_c * l_c + w.lambda_r * l_r


def ema_update(target: Mapping[str, np.ndarray], online: Mapping[str, np.ndarray], tau: float) -> dict[str, np.ndarray]:
    """``xi <- tau * xi + (1 - tau) * theta`` over the target's parameter names."""
    if not 0.0 <= tau <= 1.0:
        raise ValueError(f"tau must be in [0, 1], got {tau}")
    out = {}
    for k, xi in target.items():
        th = online[k]
        if th.shape != xi.shape:
            raise ValueError(f"ema_update: {k} has shape {th.shape} online vs {xi.shape} target")
        out[k] = (tau * xi + (1.0 - tau) * th).astype(xi.dtype)
    return out


# ---------------------------------------------------------------------------
# one pretraining step


@dataclass
class Batch:
    view_a: np.ndarray  # (B, V, V)
    view_b: np.ndarray
    masks: list[MaskPlan]
    subject_ids: list[str] = field(default_factory=list)


def make_batch(scans: Sequence, cfg: EncoderConfig, drop_rate: float, seed: int) -> Batch:
    """Two independent pseudo-FC views and one mask per scan, all derived from ``seed``."""
    a, b, masks = [], [], []
    for s in scans:
        t = s.data.shape[1]
        pa = make_drop_plan(t, drop_rate, view_seed(seed, s.subject_id, 0))
        pb = make_drop_plan(t, drop_rate, view_seed(seed, s.subject_id, 1))
        a.append(pfc_augment(s.data, pa).matrix)
        b.append(pfc_augment(s.data, pb).matrix)
        masks.append(sample_mask(cfg.v_rois, cfg.mask_ratio, view_seed(seed, s.subject_id, 2)))
    return Batch(np.stack(a), np.stack(b), masks, [s.subject_id for s in scans])


@dataclass
class LossParts:
    total: Tensor
    l_latent: float
    l_c: float
    l_r: float

    @property
    def value(self) -> float:
        return float(self.total.value)


def batch_loss(params: Mapping[str, Tensor], target: Mapping[str, np.ndarray], cfg: EncoderConfig, batch: Batch,
               weights: LossWeights = LossWeights(), objectives: Objectives = Objectives(),
               symmetric: bool = False) -> LossParts:
    """Weighted pretraining objective for one batch.

    ``params`` holds the online Tensors (gradient flows into them); ``target``
    holds plain arrays and is evaluated without recording a graph.
    """
    dtype = params["pos_embed"].dtype
    xa = Tensor(batch.view_a.astype(dtype))
    xb = Tensor(batch.view_b.astype(dtype))
    zero = Tensor(np.zeros((), dtype=dtype))
    l_lat = l_c = l_r = zero

    if objectives.latent:
        pairs = [(xa, xb)] + ([(xb, xa)] if symmetric else [])
        terms = []
        for online_in, target_in in pairs:
            z = enc.readout(params, enc.encode(params, cfg, online_in))
            q = predictor_forward(params, z)
            with nx.no_grad():
                tp = enc.as_tensors(target)
                z_hat = enc.readout(tp, enc.encode(tp, cfg, target_in))
            terms.append(loss_latent(q, z_hat))
        l_lat = terms[0] if len(terms) == 1 else nx.scale(nx.add(terms[0], terms[1]), 0.5)

    if objectives.mrm_cls or objectives.mrm_rec:
        idx = enc._batch_index(batch.masks, xa.shape[:-2], cfg.v_rois)
        o = enc.encode(params, cfg, xa, mask=batch.masks).tokens
        o_masked = nx.gather_rows(o, idx)
        targets = Tensor(xa.value[idx])
        c = cls_head(params, o_masked) if objectives.mrm_cls else None
        r = rec_head(params, o_masked) if objectives.mrm_rec else None
        mrm = MrmOutputs(targets, c, r)
        if objectives.mrm_cls:
            l_c = loss_infonce(mrm)
        if objectives.mrm_rec:
            l_r = loss_recon(mrm)

    total = total_loss(l_lat, l_c, l_r, weights)
    return LossParts(total, float(l_lat.value), float(l_c.value), float(l_r.value))


def pretrain_step(model: Model, batch: Batch, apply_update: Callable[[dict, dict], None], tau: float = DEFAULT_TAU,
                  weights: LossWeights = LossWeights(), objectives: Objectives = Objectives(),
                  symmetric: bool = False, check_finite: bool = True) -> LossParts:
    """Loss, backward on the online parameters, optimizer update, then EMA.

    ``apply_update(params, grads)`` mutates ``model.online`` in place.
    """
    params = enc.as_tensors(model.online, requires_grad=True)
    parts = batch_loss(params, model.target, model.cfg, batch, weights, objectives, symmetric)
    if check_finite and not np.isfinite(parts.value):
        raise nx.NumericError(f"non-finite pretraining loss {parts.value}")
    nx.backward(parts.total)
    grads = {k: t.grad for k, t in params.items()}
    apply_update(model.online, grads)
    model.target = ema_update(model.target, model.online, tau)
    return parts
