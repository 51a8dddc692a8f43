"""Pearson functional connectivity and timepoint-dropping augmentation."""
from __future__ import annotations

import warnings
import zlib
from dataclasses import dataclass, field

import numpy as np

MIN_TIMEPOINTS = 3
DEFAULT_DROP_RATE = 0.15


class ParameterError(ValueError):
    pass


class ZeroVarianceWarning(UserWarning):
    pass


@dataclass(frozen=True)
class Connectome:
    matrix: np.ndarray
    source_subject: str = ""
    dropped_timepoints: tuple[int, ...] = ()

    @property
    def n_rois(self) -> int:
        return self.matrix.shape[0]


@dataclass(frozen=True)
class DropPlan:
    drop_rate: float
    kept_columns: tuple[int, ...]
    seed: int
    n_timepoints: int = field(default=0)

    @property
    def dropped_columns(self) -> tuple[int, ...]:
        kept = set(self.kept_columns)
        return tuple(i for i in range(self.n_timepoints) if i not in kept)


def normalize_timeseries(data, return_flags: bool = False):
    """Z-score each row (population variance).

    Zero-variance rows come back as zeros; pass ``return_flags=True`` to also
    get the boolean mask of such rows.
    """
    x = np.asarray(data, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] < MIN_TIMEPOINTS:
        raise ParameterError(f"need a V x T matrix with T >= {MIN_TIMEPOINTS}, got shape {x.shape}")
    mu = x.mean(axis=1, keepdims=True)
    xc = x - mu
    sd = np.sqrt((xc * xc).mean(axis=1, keepdims=True))
    # relative threshold: constant rows leave rounding residue in xc
    scale = np.maximum(np.abs(x).max(axis=1, keepdims=True), 1.0)
    flat = sd[:, 0] <= 1e-12 * scale[:, 0]
    sd_safe = np.where(flat[:, None], 1.0, sd)
    z = np.where(flat[:, None], 0.0, xc / sd_safe)
    if return_flags:
        return z, flat
    return z


def pearson_fc(data, source_subject: str = "") -> Connectome:
    """Pearson correlation between all pairs of rows.

    Rows with zero variance get 0 off-diagonal and 1 on the diagonal, with a
    :class:`ZeroVarianceWarning`.
    """
    return _fc(data, source_subject, ())


def _fc(data, source_subject, dropped):
    z, flat = normalize_timeseries(data, return_flags=True)
    if flat.any():
        warnings.warn(f"zero-variance rows {np.flatnonzero(flat).tolist()} in {source_subject or 'scan'}",
                      ZeroVarianceWarning, stacklevel=3)
    t = z.shape[1]
    c = (z @ z.T) / t
    c = 0.5 * (c + c.T)
    np.clip(c, -1.0, 1.0, out=c)
    np.fill_diagonal(c, 1.0)
    return Connectome(c, source_subject, tuple(dropped))


def make_drop_plan(n_timepoints: int, drop_rate: float, seed: int) -> DropPlan:
    """Choose ``round(drop_rate * T)`` timepoints to drop uniformly without replacement."""
    if not 0.0 <= drop_rate < 1.0:
        raise ParameterError(f"drop_rate must be in [0, 1), got {drop_rate}")
    n_drop = int(round(drop_rate * n_timepoints))  # round-half-even
    if n_timepoints - n_drop < MIN_TIMEPOINTS:
        raise ParameterError(
            f"dropping {n_drop} of {n_timepoints} timepoints leaves fewer than {MIN_TIMEPOINTS}")
    if n_drop == 0:
        kept = tuple(range(n_timepoints))
    else:
        rng = np.random.default_rng(seed)
        dropped = rng.choice(n_timepoints, size=n_drop, replace=False)
        mask = np.ones(n_timepoints, dtype=bool)
        mask[dropped] = False
        kept = tuple(int(i) for i in np.flatnonzero(mask))
    return DropPlan(float(drop_rate), kept, int(seed), n_timepoints)


def pfc_augment(data, plan: DropPlan, source_subject: str = "") -> Connectome:
    """Pseudo-FC: Pearson FC over the columns kept by ``plan``."""
    x = np.asarray(data, dtype=np.float64)
    if plan.n_timepoints and plan.n_timepoints != x.shape[1]:
        raise ParameterError(f"plan built for T={plan.n_timepoints}, scan has T={x.shape[1]}")
    if len(plan.kept_columns) == x.shape[1]:
        return _fc(x, source_subject, ())
    return _fc(x[:, list(plan.kept_columns)], source_subject, plan.dropped_columns)


def view_seed(seed: int, subject_id: str, view_index: int) -> int:
    """Stable per-(subject, view) seed: ``seed XOR crc32(subject_id/view)``."""
    h = zlib.crc32(f"{subject_id}/{view_index}".encode())
    return (int(seed) ^ h) & 0xFFFFFFFFFFFFFFFF


def write_connectome_csv(path, conn: Connectome) -> None:
    np.savetxt(path, conn.matrix, delimiter=",", fmt="%.17g")
