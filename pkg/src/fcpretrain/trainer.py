"""Adam with linear warmup, the pretraining loop, and checkpoint files.

Checkpoint layout: ``BMASS1`` magic, u32 little-endian length + UTF-8 JSON
metadata, the parameter blob (float32 little-endian, canonical order), then a
u64 little-endian FNV-1a digest of the blob.
"""
from __future__ import annotations

import copy
import csv
import hashlib
import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import encoder as enc
from . import ssl
from .encoder import EncoderConfig

log = logging.getLogger(__name__)

CKPT_MAGIC = b"BMASS1"
CKPT_VERSION = 1


class CheckpointError(ValueError):
    pass


class CorruptCheckpoint(CheckpointError):
    pass


class IncompatibleCheckpoint(CheckpointError):
    pass


class DivergenceError(ArithmeticError):
    def __init__(self, msg, last_good=None):
        super().__init__(msg)
        self.last_good = last_good


@dataclass(frozen=True)
class TrainConfig:
    lr_init: float = 3e-5
    lr_peak: float = 3e-4
    warmup_epochs: float = 10
    epochs: int = 100
    batch_size: int = 256
    seed: int = 0
    deterministic: bool = True
    drop_rate: float = 0.15
    lambda_c: float = ssl.DEFAULT_LAMBDA_C
    lambda_r: float = ssl.DEFAULT_LAMBDA_R
    tau: float = ssl.DEFAULT_TAU
    weight_decay: float = 5e-5
    latent: bool = True
    mrm_cls: bool = True
    mrm_rec: bool = True
    symmetric: bool = False
    cosine_decay: bool = False

    def __post_init__(self):
        if self.lr_init > self.lr_peak:
            raise ValueError(f"lr_init {self.lr_init} exceeds lr_peak {self.lr_peak}")
        if self.warmup_epochs > self.epochs and self.epochs > 0:
            raise ValueError(f"warmup_epochs {self.warmup_epochs} exceeds epochs {self.epochs}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    @property
    def weights(self) -> ssl.LossWeights:
        return ssl.LossWeights(self.lambda_c, self.lambda_r)

    @property
    def objectives(self) -> ssl.Objectives:
        return ssl.Objectives(self.latent, self.mrm_cls, self.mrm_rec)

    @classmethod
    def from_dict(cls, doc: Mapping) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(doc) - names
        if unknown:
            raise ValueError(f"unknown train config fields: {sorted(unknown)}")
        return cls(**doc)


def lr_at(epoch: float, cfg: TrainConfig = TrainConfig()) -> float:
    """Linear warmup from ``lr_init`` to ``lr_peak``, then flat (or cosine if enabled)."""
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    if cfg.warmup_epochs > 0 and epoch < cfg.warmup_epochs:
        return cfg.lr_init + (cfg.lr_peak - cfg.lr_init) * (epoch / cfg.warmup_epochs)
    if cfg.cosine_decay and cfg.epochs > cfg.warmup_epochs:
        frac = min(1.0, (epoch - cfg.warmup_epochs) / (cfg.epochs - cfg.warmup_epochs))
        return cfg.lr_peak * 0.5 * (1.0 + math.cos(math.pi * frac))
    return cfg.lr_peak


# ---------------------------------------------------------------------------
# Adam


@dataclass
class OptimState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0

    @classmethod
    def zeros_like(cls, params: Mapping[str, np.ndarray], weight_decay: float = 0.0) -> "OptimState":
        return cls({k: np.zeros_like(p) for k, p in params.items()},
                   {k: np.zeros_like(p) for k, p in params.items()}, weight_decay=weight_decay)


def adam_step(params: dict[str, np.ndarray], grads: Mapping[str, np.ndarray], opt: OptimState, lr: float,
              check_finite: bool = True) -> dict[str, np.ndarray]:
    """Bias-corrected Adam with decoupled weight decay; updates ``params`` in place."""
    opt.t += 1
    b1, b2 = opt.beta1, opt.beta2
    c1 = 1.0 - b1 ** opt.t
    c2 = 1.0 - b2 ** opt.t
    for k, p in params.items():
        g = grads[k]
        if g.shape != p.shape:
            raise ValueError(f"adam_step: grad for {k} has shape {g.shape}, param {p.shape}")
        if check_finite and not np.all(np.isfinite(g)):
            raise ArithmeticError(f"adam_step: non-finite gradient for {k}")
        m = opt.m[k] = b1 * opt.m[k] + (1.0 - b1) * g
        v = opt.v[k] = b2 * opt.v[k] + (1.0 - b2) * (g * g)
        if opt.weight_decay and not enc.is_decay_exempt(k):
            p -= (lr * opt.weight_decay) * p
        p -= (lr * (m / c1) / (np.sqrt(v / c2) + opt.eps)).astype(p.dtype)
    return params


# ---------------------------------------------------------------------------
# checkpoints


def fnv1a64(data: bytes) -> int:
    h = 0xCBF29CE484222325
    prime = 0x100000001B3
    mask = 0xFFFFFFFFFFFFFFFF
    for byte in memoryview(data).cast("B"):
        h = ((h ^ byte) * prime) & mask
    return h


def enumeration_digest(shapes: Mapping[str, tuple[int, ...]]) -> str:
    text = ";".join(f"{k}:{'x'.join(map(str, s))}" for k, s in shapes.items())
    return hashlib.sha256(text.encode()).hexdigest()[:16]


@dataclass
class Checkpoint:
    cfg: EncoderConfig
    params: dict[str, np.ndarray]
    epoch: int = 0
    best_loss: float = math.inf
    train_config: dict = field(default_factory=dict)

    @property
    def encoder_params(self) -> dict[str, np.ndarray]:
        return {k: self.params[k] for k in enc.param_names(self.cfg)}


def _blob(cfg: EncoderConfig, params: Mapping[str, np.ndarray]) -> bytes:
    shapes = ssl.online_shapes(cfg)
    parts = []
    for k, s in shapes.items():
        if k not in params:
            raise CheckpointError(f"missing parameter {k}")
        if params[k].shape != s:
            raise CheckpointError(f"parameter {k} has shape {params[k].shape}, expected {s}")
        parts.append(np.ascontiguousarray(params[k], dtype="<f4").tobytes())
    return b"".join(parts)


def save_checkpoint(path, ckpt: Checkpoint) -> Path:
    path = Path(path)
    blob = _blob(ckpt.cfg, ckpt.params)
    meta = {
        "format_version": CKPT_VERSION,
        "encoder_config": asdict(ckpt.cfg),
        "train_config": ckpt.train_config,
        "epoch": ckpt.epoch,
        "best_loss": ckpt.best_loss if math.isfinite(ckpt.best_loss) else "untrained",
        "param_enumeration": enumeration_digest(ssl.online_shapes(ckpt.cfg)),
        "param_version": enc.PARAM_FORMAT_VERSION,
        "n_params": len(blob) // 4,
    }
    doc = json.dumps(meta, sort_keys=True).encode("utf-8")
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(CKPT_MAGIC + struct.pack("<I", len(doc)) + doc + blob + struct.pack("<Q", fnv1a64(blob)))
    return path


def load_checkpoint(path, expected: EncoderConfig | None = None) -> Checkpoint:
    raw = Path(path).read_bytes()
    if raw[:6] != CKPT_MAGIC:
        raise CorruptCheckpoint(f"{path}: bad magic")
    if len(raw) < 10:
        raise CorruptCheckpoint(f"{path}: truncated header")
    (n,) = struct.unpack("<I", raw[6:10])
    if len(raw) < 10 + n:
        raise CorruptCheckpoint(f"{path}: truncated metadata")
    try:
        meta = json.loads(raw[10:10 + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptCheckpoint(f"{path}: unreadable metadata ({exc})") from None
    if meta.get("format_version") != CKPT_VERSION:
        raise IncompatibleCheckpoint(f"{path}: format version {meta.get('format_version')}, expected {CKPT_VERSION}")
    cfg = EncoderConfig(**meta["encoder_config"])
    if expected is not None and expected != cfg:
        raise IncompatibleCheckpoint(f"{path}: checkpoint config {cfg} does not match expected {expected}")
    shapes = ssl.online_shapes(cfg)
    if meta.get("param_enumeration") != enumeration_digest(shapes):
        raise IncompatibleCheckpoint(f"{path}: parameter enumeration differs from this version")
    blob = raw[10 + n:-8]
    n_params = sum(int(np.prod(s)) for s in shapes.values())
    if len(raw) < 10 + n + 8 or len(blob) != 4 * n_params:
        raise CorruptCheckpoint(f"{path}: parameter blob has {len(blob)} bytes, expected {4 * n_params}")
    (digest,) = struct.unpack("<Q", raw[-8:])
    if digest != fnv1a64(blob):
        raise CorruptCheckpoint(f"{path}: digest mismatch")
    flat = np.frombuffer(blob, dtype="<f4")
    params, off = {}, 0
    for k, s in shapes.items():
        size = int(np.prod(s))
        params[k] = flat[off:off + size].reshape(s).astype(np.float32)
        off += size
    best = meta["best_loss"]
    return Checkpoint(cfg, params, meta["epoch"], math.inf if best == "untrained" else float(best),
                      meta.get("train_config", {}))


def checkpoint_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# ---------------------------------------------------------------------------
# the loop


@dataclass
class EpochRecord:
    epoch: int
    mean_loss: float
    l_latent: float
    l_c: float
    l_r: float
    lr: float


@dataclass
class PretrainResult:
    checkpoint: Checkpoint
    curve: list[EpochRecord]
    final: ssl.Model


def step_seed(seed: int, epoch: int, step: int) -> int:
    return int(np.random.SeedSequence([int(seed), int(epoch), int(step)]).generate_state(1, np.uint64)[0])


def epoch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(epoch), 0xE90C])).permutation(n)


def pretrain(scans: Sequence, cfg: EncoderConfig, tc: TrainConfig, model: ssl.Model | None = None,
             out_dir=None) -> PretrainResult:
    """Run the epoch loop; keep the parameters of the lowest mean-loss epoch.

    Scans are shuffled per epoch with a seeded permutation. Cohorts smaller
    than ``batch_size`` train full-batch. Batch composition, views and masks are
    pure functions of (seed, epoch, step).
    """
    if not scans:
        raise ValueError("pretrain: no scans")
    v = scans[0].data.shape[0]
    if v != cfg.v_rois:
        raise ValueError(f"cohort has V={v}, encoder config expects {cfg.v_rois}")
    model = model or ssl.init_model(cfg, tc.seed)
    opt = OptimState.zeros_like(model.online, tc.weight_decay)
    best = Checkpoint(cfg, copy.deepcopy(model.online), 0, math.inf, asdict(tc))
    curve: list[EpochRecord] = []
    n = len(scans)
    bs = min(tc.batch_size, n)
    steps = math.ceil(n / bs)
    for epoch in range(tc.epochs):
        order = epoch_order(n, tc.seed, epoch)
        sums = np.zeros(4)
        lr = lr_at(epoch, tc)
        for step in range(steps):
            lr = lr_at(epoch + step / steps, tc)
            chunk = [scans[i] for i in order[step * bs:(step + 1) * bs]]
            batch = ssl.make_batch(chunk, cfg, tc.drop_rate, step_seed(tc.seed, epoch, step))
            try:
                parts = ssl.pretrain_step(
                    model, batch, lambda p, g: adam_step(p, g, opt, lr),
                    tau=tc.tau, weights=tc.weights, objectives=tc.objectives, symmetric=tc.symmetric)
            except ArithmeticError as exc:
                if out_dir is not None and math.isfinite(best.best_loss):
                    save_checkpoint(Path(out_dir) / "checkpoint.bmass", best)
                raise DivergenceError(f"epoch {epoch} step {step}: {exc}", best) from exc
            sums += np.array([parts.value, parts.l_latent, parts.l_c, parts.l_r]) * len(chunk)
        means = sums / n
        rec = EpochRecord(epoch, *map(float, means), lr)
        curve.append(rec)
        log.debug("epoch %d loss %.5f", epoch, rec.mean_loss)
        if rec.mean_loss < best.best_loss:
            best = Checkpoint(cfg, copy.deepcopy(model.online), epoch + 1, rec.mean_loss, asdict(tc))
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        save_checkpoint(out / "checkpoint.bmass", best)
        write_loss_curve(out / "loss_curve.csv", curve)
    return PretrainResult(best, curve, model)


def write_loss_curve(path, curve: Sequence[EpochRecord]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "mean_loss", "l_latent", "l_c", "l_r", "lr"])
        for r in curve:
            w.writerow([r.epoch, repr(r.mean_loss), repr(r.l_latent), repr(r.l_c), repr(r.l_r), repr(r.lr)])
