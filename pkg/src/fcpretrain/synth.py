"""Synthetic BOLD cohorts with planted community structure.

Each subject's timeseries is drawn i.i.d. over time from a zero-mean Gaussian
whose covariance has unit diagonal, ``within_block_corr`` inside communities and
``between_block_corr`` across them, plus per-class additive edits to selected
block pairs. Isotropic observation noise is added on top, so the population
correlation between distinct ROIs is ``latent_cov[i, j] / (1 + noise_sigma**2)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .ingest import ManifestEntry, TimeseriesScan, write_manifest, write_scan


class SpecError(ValueError):
    pass


BlockEffect = tuple[int, int, float]  # (block_a, block_b, delta)


def contiguous_blocks(v_rois: int, n_blocks: int) -> tuple[int, ...]:
    return tuple(int(i * n_blocks // v_rois) for i in range(v_rois))


def default_class_effect(n_classes: int, effect: float, n_blocks: int = 4) -> dict[int, tuple[BlockEffect, ...]]:
    """Class ``k >= 1`` couples block ``k-1`` with block ``k`` (mod ``n_blocks``) by ``effect``."""
    return {k: (((k - 1) % n_blocks, k % n_blocks, float(effect)),) for k in range(1, n_classes)}


@dataclass(frozen=True)
class SynthSpec:
    n_subjects: int = 200
    v_rois: int = 16
    t_points: int = 200
    n_classes: int = 2
    block_partition: tuple[int, ...] | None = None
    within_block_corr: float = 0.5
    between_block_corr: float = 0.0
    class_effect: dict[int, tuple[BlockEffect, ...]] = field(default_factory=dict)
    noise_sigma: float = 0.5
    seed: int = 0
    n_sites: int = 2

    @property
    def blocks(self) -> tuple[int, ...]:
        return self.block_partition if self.block_partition is not None else contiguous_blocks(self.v_rois, 4)


def latent_covariance(spec: SynthSpec, label: int) -> np.ndarray:
    """Community covariance for one class (unit diagonal)."""
    if not 0.0 < spec.within_block_corr < 1.0:
        raise SpecError(f"within_block_corr must be in (0, 1), got {spec.within_block_corr}")
    b = np.asarray(spec.blocks)
    if b.shape != (spec.v_rois,):
        raise SpecError(f"block_partition must assign all {spec.v_rois} ROIs")
    same = b[:, None] == b[None, :]
    cov = np.where(same, spec.within_block_corr, spec.between_block_corr).astype(np.float64)
    for ba, bb, delta in spec.class_effect.get(label, ()):
        sel = ((b[:, None] == ba) & (b[None, :] == bb)) | ((b[:, None] == bb) & (b[None, :] == ba))
        cov = cov + np.where(sel, delta, 0.0)
    np.fill_diagonal(cov, 1.0)
    off = cov[~np.eye(spec.v_rois, dtype=bool)]
    if np.any(off <= -1.0) or np.any(off >= 1.0):
        raise SpecError(f"class {label}: class_effect pushes a correlation outside (-1, 1)")
    return cov


def population_fc(spec: SynthSpec, label: int) -> np.ndarray:
    cov = latent_covariance(spec, label)
    fc = cov / (1.0 + spec.noise_sigma ** 2)
    np.fill_diagonal(fc, 1.0)
    return fc


def _cholesky(spec: SynthSpec, label: int) -> np.ndarray:
    cov = latent_covariance(spec, label)
    try:
        return np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        raise SpecError(f"class {label}: latent covariance is not positive definite") from None


def subject_label(spec: SynthSpec, index: int) -> int:
    return index % spec.n_classes


def subject_site(spec: SynthSpec, index: int) -> str:
    return f"site{(index // spec.n_classes) % spec.n_sites}"


def gen_subject(spec: SynthSpec, index: int, chol: np.ndarray | None = None) -> np.ndarray:
    """Timeseries (V x T) for subject ``index``; a pure function of (spec, index)."""
    label = subject_label(spec, index)
    if chol is None:
        chol = _cholesky(spec, label)
    rng = np.random.default_rng(np.random.SeedSequence([int(spec.seed), int(index)]))
    z = rng.standard_normal((spec.v_rois, spec.t_points))
    noise = rng.standard_normal((spec.v_rois, spec.t_points))
    return chol @ z + spec.noise_sigma * noise


def gen_scans(spec: SynthSpec, splits=None) -> list[TimeseriesScan]:
    """Generate the cohort in memory; ``splits`` optionally overrides split tags."""
    if spec.n_classes < 1 or spec.n_subjects < 1:
        raise SpecError("need at least one class and one subject")
    chols = {k: _cholesky(spec, k) for k in range(spec.n_classes)}
    if splits is None:
        from .probe import stratified_split

        keys = [(subject_site(spec, i), subject_label(spec, i)) for i in range(spec.n_subjects)]
        splits = stratified_split(keys, (0.7, 0.15, 0.15), spec.seed, warn=False)
    scans = []
    for i in range(spec.n_subjects):
        label = subject_label(spec, i)
        scans.append(TimeseriesScan(f"sub-{i:04d}", subject_site(spec, i), label, splits[i],
                                    gen_subject(spec, i, chols[label])))
    return scans


def gen_cohort(spec: SynthSpec, out_dir, fmt: str = "csv") -> Path:
    """Write scans plus ``manifest.tsv`` under ``out_dir``; returns the manifest path."""
    out = Path(out_dir)
    (out / "scans").mkdir(parents=True, exist_ok=True)
    entries = []
    for s in gen_scans(spec):
        p = out / "scans" / f"{s.subject_id}.{fmt}"
        write_scan(p, s.data)
        entries.append(ManifestEntry(s.subject_id, p, s.site, s.label, s.split))
    manifest = out / "manifest.tsv"
    write_manifest(manifest, entries)
    return manifest


def oracle_pearson(data) -> np.ndarray:
    """Pearson matrix by explicit two-pass loops; NaN marks undefined entries."""
    rows = [[float(v) for v in r] for r in np.asarray(data)]
    t = len(rows[0])
    if t < 3:
        raise SpecError("oracle_pearson needs T >= 3")
    centred, norms = [], []
    for r in rows:
        m = 0.0
        for v in r:
            m += v
        m /= t
        c = [v - m for v in r]
        ss = 0.0
        for v in c:
            ss += v * v
        centred.append(c)
        norms.append(math.sqrt(ss))
    n = len(rows)
    out = np.full((n, n), np.nan)
    for i in range(n):
        for j in range(i, n):
            if norms[i] == 0.0 or norms[j] == 0.0:
                continue
            acc = 0.0
            for a, b in zip(centred[i], centred[j]):
                acc += a * b
            r = acc / (norms[i] * norms[j])
            out[i, j] = out[j, i] = r
    return out
