"""Transformer encoder over ROI connection profiles.

Each ROI's row of the connectome is one token of width V, so the hidden width
equals the number of ROIs and there is no input projection. Blocks are
pre-norm: ``u = h + MHSA(LN(h))``, ``out = u + FFN(LN(u))``.

Parameters live in plain ``dict[str, np.ndarray]`` keyed by canonical names
(see :func:`param_names`); forward functions take the same mapping of
:class:`~fcpretrain.numerics.Tensor` so one code path serves the trainable
online network, the frozen target network, and finite-difference checks.
"""
from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Mapping

import numpy as np

from . import numerics as nx
from .numerics import Tensor

PARAM_FORMAT_VERSION = 1
INIT_STD = 0.02


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class EncoderConfig:
    v_rois: int = 16
    n_layers: int = 2
    n_heads: int = 2
    ffn_dim: int = 32
    readout_dim: int = 8
    mask_ratio: float = 0.2

    def __post_init__(self):
        if self.v_rois < 2:
            raise ConfigError(f"v_rois must be >= 2, got {self.v_rois}")
        if self.n_layers < 1:
            raise ConfigError(f"n_layers must be >= 1, got {self.n_layers}")
        if self.n_heads < 1 or self.v_rois % self.n_heads:
            raise ConfigError(f"v_rois={self.v_rois} is not divisible by n_heads={self.n_heads}")
        if self.ffn_dim < 1 or self.readout_dim < 1:
            raise ConfigError("ffn_dim and readout_dim must be >= 1")
        if not 0.0 < self.mask_ratio < 1.0:
            raise ConfigError(f"mask_ratio must be in (0, 1), got {self.mask_ratio}")

    @property
    def head_dim(self) -> int:
        return self.v_rois // self.n_heads

    @property
    def embedding_dim(self) -> int:
        return self.readout_dim * self.v_rois

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, doc: Mapping) -> "EncoderConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(doc) - names
        if unknown:
            raise ConfigError(f"unknown encoder config fields: {sorted(unknown)}")
        return cls(**doc)

    @classmethod
    def load(cls, path) -> "EncoderConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


# ---------------------------------------------------------------------------
# parameters


def param_shapes(cfg: EncoderConfig) -> dict[str, tuple[int, ...]]:
    """Canonical, ordered name -> shape map for the encoder and readout."""
    v, dk, f, d = cfg.v_rois, cfg.head_dim, cfg.ffn_dim, cfg.readout_dim
    shapes: dict[str, tuple[int, ...]] = {"pos_embed": (v, v), "mask_embed": (v,)}
    for layer in range(cfg.n_layers):
        p = f"layer{layer}."
        shapes[p + "ln1.gain"] = (v,)
        shapes[p + "ln1.bias"] = (v,)
        for c in range(cfg.n_heads):
            for w in ("wq", "wk", "wv"):
                shapes[f"{p}head{c}.{w}"] = (v, dk)
        shapes[p + "wo"] = (v, v)
        shapes[p + "ln2.gain"] = (v,)
        shapes[p + "ln2.bias"] = (v,)
        shapes[p + "ffn.w1"] = (v, f)
        shapes[p + "ffn.b1"] = (f,)
        shapes[p + "ffn.w2"] = (f, v)
        shapes[p + "ffn.b2"] = (v,)
    shapes["readout.w"] = (v, d)
    shapes["readout.b"] = (d,)
    return shapes


def param_names(cfg: EncoderConfig) -> list[str]:
    return list(param_shapes(cfg))


def param_count(cfg: EncoderConfig) -> int:
    """Closed-form number of scalars in the encoder plus readout."""
    v, f, d, n_layers = cfg.v_rois, cfg.ffn_dim, cfg.readout_dim, cfg.n_layers
    per_layer = 4 * v + 3 * v * v + v * v + 2 * v * f + f + v
    return v * v + v + n_layers * per_layer + v * d + d


def is_decay_exempt(name: str) -> bool:
    """Norm gains/biases and the embeddings are excluded from weight decay."""
    return ".ln" in name or name in ("pos_embed", "mask_embed")


def init_params(cfg: EncoderConfig, rng: np.random.Generator, dtype=np.float32) -> dict[str, np.ndarray]:
    out = {}
    for name, shape in param_shapes(cfg).items():
        if name.endswith(".gain"):
            arr = np.ones(shape)
        elif name.endswith(".bias") or name.endswith(".b1") or name.endswith(".b2") or name == "readout.b":
            arr = np.zeros(shape)
        else:
            arr = rng.normal(0.0, INIT_STD, size=shape)
        out[name] = arr.astype(dtype)
    return out


def as_tensors(params: Mapping[str, np.ndarray], requires_grad: bool = False) -> dict[str, Tensor]:
    return {k: Tensor(v, requires_grad=requires_grad, name=k) for k, v in params.items()}


# ---------------------------------------------------------------------------
# forward


@dataclass
class EncoderOutput:
    tokens: Tensor
    attention: np.ndarray | None = None  # (*batch, L, C, V, V)


def _batch_index(mask, lead: tuple[int, ...], v: int):
    """Normalize a mask spec to the index form used by gather/scatter."""
    if mask is None:
        return None
    if hasattr(mask, "indices"):
        mask = mask.indices
    if not lead:
        idx = np.asarray(sorted(mask), dtype=np.intp)
        if np.any(idx < 0) or np.any(idx >= v):
            raise IndexError(f"mask index out of range for V={v}: {idx.tolist()}")
        return idx
    if len(mask) != lead[0]:
        raise ValueError(f"need one mask per batch element ({lead[0]}), got {len(mask)}")
    bi, ri = [], []
    for b, m in enumerate(mask):
        idx = sorted(m.indices if hasattr(m, "indices") else m)
        if any(i < 0 or i >= v for i in idx):
            raise IndexError(f"mask index out of range for V={v}: {idx}")
        bi.extend([b] * len(idx))
        ri.extend(idx)
    return np.asarray(bi, dtype=np.intp), np.asarray(ri, dtype=np.intp)


def embed_tokens(params: Mapping[str, Tensor], x, mask=None) -> Tensor:
    """H0: connectome rows plus positional embeddings; masked rows use the mask embedding.

    ``x`` is V x V or B x V x V. ``mask`` is a :class:`MaskPlan`/index collection
    for a single input, or a sequence of them (one per batch element).
    """
    x = nx.as_tensor(x, dtype=params["pos_embed"].dtype)
    v = x.shape[-1]
    idx = _batch_index(mask, x.shape[:-2], v)
    if idx is not None and (len(idx) if not isinstance(idx, tuple) else len(idx[0])):
        x = nx.scatter_replace_rows(x, idx, params["mask_embed"])
    return nx.add(x, params["pos_embed"])


def attention_head(params: Mapping[str, Tensor], h: Tensor, layer: int, head: int):
    p = f"layer{layer}.head{head}."
    q = nx.matmul(h, params[p + "wq"])
    k = nx.matmul(h, params[p + "wk"])
    val = nx.matmul(h, params[p + "wv"])
    dk = params[p + "wq"].shape[-1]
    scores = nx.scale(nx.matmul(q, nx.transpose(k)), 1.0 / math.sqrt(dk))
    attn = nx.softmax(scores)
    return nx.matmul(attn, val), attn.value


def transformer_block(params: Mapping[str, Tensor], h: Tensor, layer: int, n_heads: int):
    """One pre-norm block; returns (output, per-head attention stacked on axis -3)."""
    p = f"layer{layer}."
    hn = nx.layer_norm(h, params[p + "ln1.gain"], params[p + "ln1.bias"])
    heads, maps = [], []
    for c in range(n_heads):
        out, a = attention_head(params, hn, layer, c)
        heads.append(out)
        maps.append(a)
    mhsa = nx.matmul(nx.concat(heads) if n_heads > 1 else heads[0], params[p + "wo"])
    u = nx.add(h, mhsa)
    un = nx.layer_norm(u, params[p + "ln2.gain"], params[p + "ln2.bias"])
    hidden = nx.gelu(nx.add(nx.matmul(un, params[p + "ffn.w1"]), params[p + "ffn.b1"]))
    ffn = nx.add(nx.matmul(hidden, params[p + "ffn.w2"]), params[p + "ffn.b2"])
    return nx.add(u, ffn), np.stack(maps, axis=-3)


def encode(params: Mapping[str, Tensor], cfg: EncoderConfig, x, mask=None, capture: bool = False) -> EncoderOutput:
    x = nx.as_tensor(x, dtype=params["pos_embed"].dtype)
    if x.shape[-2:] != (cfg.v_rois, cfg.v_rois):
        raise ConfigError(f"input {x.shape} does not match V={cfg.v_rois}")
    h = embed_tokens(params, x, mask)
    maps = []
    for layer in range(cfg.n_layers):
        h, a = transformer_block(params, h, layer, cfg.n_heads)
        if capture:
            maps.append(a)
    attn = np.stack(maps, axis=-4) if capture else None
    return EncoderOutput(h, attn)


def readout(params: Mapping[str, Tensor], tokens) -> Tensor:
    """Shared V -> D projection per token, concatenated in ROI order (length D*V)."""
    tokens = tokens.tokens if isinstance(tokens, EncoderOutput) else tokens
    proj = nx.add(nx.matmul(tokens, params["readout.w"]), params["readout.b"])
    lead = proj.shape[:-2]
    return nx.reshape(proj, lead + (proj.shape[-2] * proj.shape[-1],))


def embed(params: Mapping[str, np.ndarray], cfg: EncoderConfig, connectomes) -> np.ndarray:
    """Frozen embeddings (no graph) for a V x V or B x V x V input."""
    with nx.no_grad():
        t = as_tensors(params)
        return readout(t, encode(t, cfg, np.asarray(connectomes))).value


def attention_heatmap(params: Mapping[str, np.ndarray], cfg: EncoderConfig, connectomes, layer_sel: str = "mean",
                      batch_size: int = 64, threads: int = 1) -> np.ndarray:
    """Head- and subject-averaged attention, min-max scaled to [0, 1].

    ``layer_sel`` picks the ``first`` or ``last`` layer or the ``mean`` over all.
    A map whose range is below 1e-12 scales to all zeros. Per-batch sums are
    added in batch order regardless of ``threads``.
    """
    xs = np.asarray(connectomes)
    if xs.ndim == 2:
        xs = xs[None]
    if len(xs) == 0:
        raise ValueError("attention_heatmap: empty cohort")
    if layer_sel not in ("first", "last", "mean"):
        raise ValueError(f"layer_sel must be first, last or mean, got {layer_sel!r}")
    t = as_tensors(params)

    def run(chunk):
        with nx.no_grad():
            att = encode(t, cfg, chunk, capture=True).attention
        return att.astype(np.float64).mean(axis=2).sum(axis=0)

    chunks = [xs[i:i + batch_size] for i in range(0, len(xs), batch_size)]
    if threads > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(run, chunks))
    else:
        parts = [run(c) for c in chunks]
    total = np.zeros((cfg.n_layers, cfg.v_rois, cfg.v_rois))
    for part in parts:
        total += part
    per_layer = total / len(xs)
    m = {"first": per_layer[0], "last": per_layer[-1], "mean": per_layer.mean(axis=0)}[layer_sel]
    return minmax_normalize(m)


def minmax_normalize(m: np.ndarray) -> np.ndarray:
    lo, hi = float(m.min()), float(m.max())
    if hi - lo < 1e-12:
        return np.zeros_like(m, dtype=np.float64)
    return (m - lo) / (hi - lo)
