"""Frozen-embedding evaluation: site-stratified splits, linear SVM, metrics, ensembles."""
from __future__ import annotations

import csv
import json
import math
import warnings
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import encoder as enc
from .connectome import pearson_fc

SPLIT_FRACTIONS = (0.7, 0.15, 0.15)
C_GRID = (0.01, 0.1, 1.0, 10.0)
SPLIT_NAMES = ("train", "val", "test")


class ProbeError(ValueError):
    pass


class SmallCellWarning(UserWarning):
    pass


@dataclass
class EmbeddingRecord:
    subject_id: str
    vector: np.ndarray
    label: int
    site: str
    split: str = "train"


# ---------------------------------------------------------------------------
# extraction


def extract_embeddings(params, cfg: enc.EncoderConfig, scans: Sequence, batch_size: int = 64,
                       threads: int = 1) -> list[EmbeddingRecord]:
    """Full FC (no dropping, no masking) -> encoder -> readout, per scan.

    Batches run on ``threads`` workers against the shared frozen parameters;
    results are reassembled in input order, so output does not depend on ``threads``.
    """
    if scans and scans[0].data.shape[0] != cfg.v_rois:
        raise ProbeError(f"cohort has V={scans[0].data.shape[0]}, checkpoint expects V={cfg.v_rois}")
    enc_params = {k: params[k] for k in enc.param_names(cfg)}

    def run(chunk):
        x = np.stack([pearson_fc(s.data, s.subject_id).matrix for s in chunk]).astype(np.float32)
        z = enc.embed(enc_params, cfg, x)
        return [EmbeddingRecord(s.subject_id, np.asarray(v, dtype=np.float64), s.label, s.site, s.split)
                for s, v in zip(chunk, z)]

    chunks = [scans[i:i + batch_size] for i in range(0, len(scans), batch_size)]
    if threads > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(run, chunks))
    else:
        parts = [run(c) for c in chunks]
    return [r for part in parts for r in part]


def write_embeddings(path, records: Sequence[EmbeddingRecord]) -> None:
    dim = len(records[0].vector) if records else 0
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["subject_id", "label", "site", "split"] + [f"f{i}" for i in range(dim)])
        for r in records:
            w.writerow([r.subject_id, r.label, r.site, r.split] + [repr(float(v)) for v in r.vector])


def read_embeddings(path) -> list[EmbeddingRecord]:
    out = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header[:4] != ["subject_id", "label", "site", "split"]:
            raise ProbeError(f"{path}: unexpected header {header[:4]}")
        for row in reader:
            out.append(EmbeddingRecord(row[0], np.array([float(v) for v in row[4:]]), int(row[1]), row[2], row[3]))
    return out


# ---------------------------------------------------------------------------
# splitting


def _cell_rng(seed: int, cell) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), zlib.crc32(repr(cell).encode())]))


def _largest_remainder(n: int, fractions: Sequence[float]) -> list[int]:
    exact = [f * n for f in fractions]
    counts = [math.floor(e) for e in exact]
    order = sorted(range(len(fractions)), key=lambda k: (-(exact[k] - counts[k]), k))
    for k in order[:n - sum(counts)]:
        counts[k] += 1
    return counts


def _allocate(sizes: dict, fractions: Sequence[float]) -> dict:
    """Per-cell split counts whose column totals follow the overall fractions.

    Each cell gets the floor of its exact share; the leftover units go, largest
    fractional remainder first, to splits still below their overall target.
    """
    cells = list(sizes)
    exact = {c: [f * sizes[c] for f in fractions] for c in cells}
    counts = {c: [math.floor(e) for e in exact[c]] for c in cells}
    need = [t - sum(counts[c][k] for c in cells)
            for k, t in enumerate(_largest_remainder(sum(sizes.values()), fractions))]
    spare = {c: sizes[c] - sum(counts[c]) for c in cells}
    pairs = sorted(((c, k) for c in cells for k in range(len(fractions))),
                   key=lambda ck: (-(exact[ck[0]][ck[1]] - counts[ck[0]][ck[1]]), cells.index(ck[0]), ck[1]))
    for c, k in pairs:
        if spare[c] > 0 and need[k] > 0 and exact[c][k] > counts[c][k]:
            counts[c][k] += 1
            spare[c] -= 1
            need[k] -= 1
    for c in cells:  # anything left follows the cell's own remainders
        for k in sorted(range(len(fractions)), key=lambda k: (-(exact[c][k] - math.floor(exact[c][k])), k)):
            if spare[c] == 0:
                break
            counts[c][k] += 1
            spare[c] -= 1
    return counts


def stratified_split(keys: Sequence, fractions=SPLIT_FRACTIONS, seed: int = 0, warn: bool = True) -> list[str]:
    """Assign train/val/test within every (site, label) cell.

    ``keys`` holds one (site, label) tuple per record (or records themselves).
    Cells with fewer than 3 members go wholly to train.
    """
    if len(fractions) != 3 or abs(sum(fractions) - 1.0) > 1e-9 or min(fractions) < 0:
        raise ProbeError(f"fractions must be three non-negative numbers summing to 1, got {fractions}")
    keys = [(k.site, k.label) if isinstance(k, EmbeddingRecord) else tuple(k) for k in keys]
    cells: dict = {}
    for i, k in enumerate(keys):
        cells.setdefault(k, []).append(i)
    out = [""] * len(keys)
    small = [c for c in sorted(cells, key=repr) if len(cells[c]) < 3]
    for cell in small:
        if warn:
            warnings.warn(f"cell {cell} has {len(cells[cell])} member(s); assigned to train", SmallCellWarning,
                          stacklevel=2)
        for i in cells[cell]:
            out[i] = "train"
    big = [c for c in sorted(cells, key=repr) if len(cells[c]) >= 3]
    counts = _allocate({c: len(cells[c]) for c in big}, fractions)
    for cell in big:
        perm = _cell_rng(seed, cell).permutation(cells[cell])
        pos = 0
        for name, n in zip(SPLIT_NAMES, counts[cell]):
            for i in perm[pos:pos + n]:
                out[i] = name
            pos += n
    return out


# ---------------------------------------------------------------------------
# linear SVM


@dataclass
class SvmModel:
    w: np.ndarray
    b: float
    C: float
    classes: tuple[int, int]  # (negative, positive)
    mean: np.ndarray
    scale: np.ndarray
    trained: bool = True

    def decision_function(self, x) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        if x.shape[1] != len(self.w):
            raise ProbeError(f"feature dimension {x.shape[1]} does not match classifier ({len(self.w)})")
        return ((x - self.mean) / self.scale) @ self.w + self.b

    def predict(self, x) -> np.ndarray:
        return np.where(self.decision_function(x) >= 0.0, self.classes[1], self.classes[0])

    def proba(self, x) -> np.ndarray:
        """Positive-class probability: logistic of the signed margin."""
        m = self.decision_function(x)
        return 0.5 * (1.0 + np.tanh(0.5 * m))

    def to_dict(self) -> dict:
        return {"w": self.w.tolist(), "b": self.b, "C": self.C, "classes": list(self.classes),
                "mean": self.mean.tolist(), "scale": self.scale.tolist(), "trained": self.trained}

    @classmethod
    def from_dict(cls, d) -> "SvmModel":
        return cls(np.array(d["w"]), float(d["b"]), float(d["C"]), tuple(d["classes"]), np.array(d["mean"]),
                   np.array(d["scale"]), bool(d.get("trained", True)))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path) -> "SvmModel":
        return cls.from_dict(json.loads(Path(path).read_text()))


def standardizer(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    mu = x.mean(axis=0)
    sd = x.std(axis=0)
    return mu, np.where(sd > 1e-12, sd, 1.0)


def svm_fit(x, y, C: float = 1.0, seed: int = 0, iters: int = 3000, batch: int = 32) -> SvmModel:
    """Soft-margin linear SVM by mini-batch stochastic sub-gradient descent.

    Minimizes ``0.5 * |w|^2 + C * sum(hinge)`` (the bias is folded in as a
    constant feature) with step ``1 / (lambda * t)``, ``lambda = 1 / (C n)``,
    projection onto the ball of radius ``1/sqrt(lambda)`` and averaging over
    the second half of the iterates. Features are standardized with the
    statistics of ``x``.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y)
    classes = tuple(sorted(set(y.tolist())))
    if len(classes) != 2:
        raise ProbeError(f"need exactly two classes in the training set, got {classes}")
    ys = np.where(y == classes[1], 1.0, -1.0)
    mu, sd = standardizer(x)
    xa = np.hstack([(x - mu) / sd, np.ones((len(x), 1))])
    n, d = xa.shape
    lam = 1.0 / (C * n)
    radius = 1.0 / math.sqrt(lam)
    bs = min(batch, n)
    rng = np.random.default_rng(seed)
    w = np.zeros(d)
    avg = np.zeros(d)
    n_avg = 0
    order = rng.permutation(n)
    pos = 0
    for t in range(1, iters + 1):
        if pos + bs > n:
            order = rng.permutation(n)
            pos = 0
        idx = order[pos:pos + bs]
        pos += bs
        xb, yb = xa[idx], ys[idx]
        viol = yb * (xb @ w) < 1.0
        eta = 1.0 / (lam * t)
        w *= 1.0 - eta * lam
        if viol.any():
            w += (eta / bs) * (yb[viol] @ xb[viol])
        nrm = math.sqrt(float(w @ w))
        if nrm > radius:
            w *= radius / nrm
        if t > iters // 2:
            avg += w
            n_avg += 1
    w = avg / n_avg
    return SvmModel(w[:-1].copy(), float(w[-1]), float(C), classes, mu, sd)


def accuracy(model: SvmModel, x, y) -> float:
    return float(np.mean(model.predict(x) == np.asarray(y)))


def _xy(records: Sequence[EmbeddingRecord]):
    return np.stack([r.vector for r in records]), np.array([r.label for r in records])


def svm_train(train: Sequence[EmbeddingRecord], val: Sequence[EmbeddingRecord] | None = None, Cs=C_GRID,
              seed: int = 0) -> SvmModel:
    """Fit one SVM per C; keep the best validation accuracy (first C on ties)."""
    xt, yt = _xy(train)
    models = [svm_fit(xt, yt, C, seed) for C in Cs]
    if not val or len(models) == 1:
        return models[0] if len(models) == 1 else models[Cs.index(1.0) if 1.0 in Cs else 0]
    xv, yv = _xy(val)
    scores = [accuracy(m, xv, yv) for m in models]
    return models[int(np.argmax(scores))]


# ---------------------------------------------------------------------------
# metrics


@dataclass
class MetricsReport:
    accuracy: float | None
    sensitivity: float | None
    specificity: float | None
    tp: int
    fp: int
    tn: int
    fn: int

    def to_dict(self) -> dict:
        return asdict(self)


def metrics(predictions, labels, positive: int = 1) -> MetricsReport:
    """ACC/SEN/SPE; a metric with a zero denominator is ``None`` (undefined)."""
    p = np.asarray(predictions)
    t = np.asarray(labels)
    if p.shape != t.shape:
        raise ProbeError(f"predictions {p.shape} and labels {t.shape} differ in length")
    if p.size == 0:
        raise ProbeError("metrics of an empty set")
    pp, tp_ = p == positive, t == positive
    tp = int(np.sum(pp & tp_))
    fp = int(np.sum(pp & ~tp_))
    tn = int(np.sum(~pp & ~tp_))
    fn = int(np.sum(~pp & tp_))

    def ratio(a, b):
        return a / b if b else None

    return MetricsReport(ratio(tp + tn, tp + tn + fp + fn), ratio(tp, tp + fn), ratio(tn, tn + fp), tp, fp, tn, fn)


@dataclass
class RepeatedReport:
    per_repeat: list[dict]
    mean: dict
    std: dict
    C: float = field(default=float("nan"))

    def to_dict(self) -> dict:
        return {"mean": self.mean, "std": self.std, "per_repeat": self.per_repeat, "C": self.C}


def _aggregate(values):
    vals = [v for v in values if v is not None]
    if not vals:
        return None, None
    return float(np.mean(vals)), float(np.std(vals))


def repeated_eval(records: Sequence[EmbeddingRecord], k: int = 10, seed: int = 0, fractions=SPLIT_FRACTIONS,
                  positive: int = 1) -> RepeatedReport:
    """Fixed stratified train split; val/test re-drawn ``k`` times from the rest.

    SVMs for the whole C grid are fit once on train; each repeat picks C on its
    validation draw and reports test metrics.
    """
    if k < 1:
        raise ProbeError("k must be >= 1")
    records = [r for r in records if r.label >= 0]
    base = stratified_split(records, fractions, seed)
    train = [r for r, s in zip(records, base) if s == "train"]
    pool = [r for r, s in zip(records, base) if s != "train"]
    if not pool:
        raise ProbeError("no records left for validation/testing")
    xt, yt = _xy(train)
    models = [svm_fit(xt, yt, C, seed) for C in C_GRID]
    val_share = fractions[1] / (fractions[1] + fractions[2])
    per = []
    for rep in range(k):
        cells: dict = {}
        for i, r in enumerate(pool):
            cells.setdefault((r.site, r.label), []).append(i)
        val_idx, test_idx = [], []
        order = sorted(cells, key=repr)
        counts = _allocate({c: len(cells[c]) for c in order}, (val_share, 1.0 - val_share))
        for cell in order:
            perm = _cell_rng(seed * 1000003 + rep + 1, cell).permutation(cells[cell])
            n_val = counts[cell][0]
            val_idx += perm[:n_val].tolist()
            test_idx += perm[n_val:].tolist()
        val = [pool[i] for i in sorted(val_idx)]
        test = [pool[i] for i in sorted(test_idx)]
        if val:
            xv, yv = _xy(val)
            best = models[int(np.argmax([accuracy(m, xv, yv) for m in models]))]
        else:
            best = models[C_GRID.index(1.0)]
        xs, ys = _xy(test)
        rep_metrics = metrics(best.predict(xs), ys, positive).to_dict()
        rep_metrics["C"] = best.C
        per.append(rep_metrics)
    mean, std = {}, {}
    for key in ("accuracy", "sensitivity", "specificity"):
        mean[key], std[key] = _aggregate([p[key] for p in per])
    return RepeatedReport(per, mean, std)


def fit_probe(records: Sequence[EmbeddingRecord], seed: int = 0, fractions=SPLIT_FRACTIONS) -> SvmModel:
    """Train/val split once and return the validation-selected SVM."""
    records = [r for r in records if r.label >= 0]
    split = stratified_split(records, fractions, seed)
    train = [r for r, s in zip(records, split) if s == "train"]
    val = [r for r, s in zip(records, split) if s == "val"]
    return svm_train(train, val, seed=seed)


# ---------------------------------------------------------------------------
# ensembles


def ensemble_proba(classifiers: Sequence[SvmModel], x, weights=None) -> np.ndarray:
    if not classifiers:
        raise ProbeError("ensemble needs at least one classifier")
    dims = {len(c.w) for c in classifiers}
    if len(dims) != 1:
        raise ProbeError(f"classifiers disagree on feature dimension: {sorted(dims)}")
    probs = np.stack([c.proba(x) for c in classifiers])
    if weights is None:
        return probs.mean(axis=0)
    w = np.asarray(weights, dtype=np.float64)
    return np.tensordot(w, probs, axes=1)


def ensemble_zero_shot(classifiers: Sequence[SvmModel], x) -> np.ndarray:
    """Uniform average of per-classifier positive-class probabilities."""
    return ensemble_proba(classifiers, x)


def balanced_accuracy(pred, y, positive: int = 1) -> float:
    y = np.asarray(y)
    pred = np.asarray(pred)
    pos = y == positive
    return 0.5 * (float(np.mean(pred[pos] == positive)) + float(np.mean(pred[~pos] != positive)))


def ensemble_few_shot(classifiers: Sequence[SvmModel], support_x, support_y, positive: int = 1) -> np.ndarray:
    """Weights proportional to each classifier's balanced accuracy on the support set."""
    y = np.asarray(support_y)
    if len(y) == 0 or len(set(y.tolist())) < 2:
        raise ProbeError("few-shot support must contain both classes")
    bacc = np.array([balanced_accuracy(np.where(c.proba(support_x) >= 0.5, positive, -1), y, positive)
                     for c in classifiers])
    if np.all(bacc == 0.5) or bacc.sum() <= 0:
        return np.full(len(classifiers), 1.0 / len(classifiers))
    return bacc / bacc.sum()
