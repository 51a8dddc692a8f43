"""Desk-scale synthetic experiments shared by the acceptance suite and scripts/.

Every function is a pure function of its seed, so results can be recomputed
and compared bitwise.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import encoder as enc
from . import probe, ssl, synth, trainer
from .connectome import pearson_fc

DESK_ENCODER = enc.EncoderConfig(v_rois=16, n_layers=2, n_heads=2, ffn_dim=32, readout_dim=2, mask_ratio=0.2)
DESK_TRAIN = trainer.TrainConfig(epochs=100, warmup_epochs=10, batch_size=16, lr_init=3e-5, lr_peak=1e-3,
                                 drop_rate=0.15)
DESK_EFFECT = 0.15
DESK_SUBJECTS, DESK_TIMEPOINTS = 200, 200

# rows of the objective ablation: (latent, mrm_cls, mrm_rec)
ABLATION_ROWS = (
    (True, False, False),
    (False, False, True),
    (True, True, False),
    (True, False, True),
    (True, True, True),
)


def desk_cohort(seed: int, effect: float = DESK_EFFECT):
    spec = synth.SynthSpec(n_subjects=DESK_SUBJECTS, v_rois=DESK_ENCODER.v_rois, t_points=DESK_TIMEPOINTS,
                           class_effect=synth.default_class_effect(2, effect), seed=seed)
    return synth.gen_scans(spec)


@dataclass
class ProbeRun:
    seed: int
    accuracy: float
    std: float
    best_loss: float


def probe_accuracy(params, scans, seed: int, cfg: enc.EncoderConfig = DESK_ENCODER, repeats: int = 10):
    report = probe.repeated_eval(probe.extract_embeddings(params, cfg, scans), repeats, seed)
    return report.mean["accuracy"], report.std["accuracy"]


def pretrained_probe(seed: int, objectives=(True, True, True), drop_rate: float | None = None,
                     scans=None) -> ProbeRun:
    """Pretrain the desk encoder on the desk cohort and probe its frozen embeddings."""
    scans = desk_cohort(seed) if scans is None else scans
    latent, cls_, rec = objectives
    tc = replace(DESK_TRAIN, seed=seed, latent=latent, mrm_cls=cls_, mrm_rec=rec,
                 drop_rate=DESK_TRAIN.drop_rate if drop_rate is None else drop_rate)
    res = trainer.pretrain(scans, DESK_ENCODER, tc)
    acc, std = probe_accuracy(res.checkpoint.params, scans, seed)
    return ProbeRun(seed, acc, std, res.checkpoint.best_loss)


def random_probe(seed: int, scans=None) -> ProbeRun:
    """Same probe on an untrained encoder initialised with the same seed."""
    scans = desk_cohort(seed) if scans is None else scans
    acc, std = probe_accuracy(ssl.init_model(DESK_ENCODER, seed).online, scans, seed)
    return ProbeRun(seed, acc, std, float("nan"))


def objectives_label(row) -> str:
    return ssl.Objectives(*row).label


# ---------------------------------------------------------------------------
# transfer to an unseen disease

COMMON_PAIR = (0, 1)
DISEASE_PAIRS = ((0, 2), (0, 3), (1, 2), (1, 3), (2, 3))


def disease_records(disease: int, seed: int, n_subjects: int = 120, common: float = 0.15,
                    specific: float = 0.15) -> list[probe.EmbeddingRecord]:
    """Patients vs controls whose FC differs along a shared coupling plus a disease-specific one.

    Features are the upper triangle of each subject's FC matrix.
    """
    a, b = DISEASE_PAIRS[disease]
    effect = {1: ((*COMMON_PAIR, common), (a, b, specific))}
    spec = synth.SynthSpec(n_subjects=n_subjects, v_rois=16, t_points=200, class_effect=effect,
                           seed=seed * 1000 + disease)
    iu = np.triu_indices(spec.v_rois, 1)
    return [probe.EmbeddingRecord(f"d{disease}_{s.subject_id}", pearson_fc(s.data).matrix[iu], s.label, s.site)
            for s in synth.gen_scans(spec)]


@dataclass
class TransferRun:
    seed: int
    zero_shot: float
    few_shot: float
    zero_shot_on_query: float
    weights: list


def transfer_experiment(seed: int, held_out: int = 4, support_frac: float = 0.2) -> TransferRun:
    """Train one SVM per source disease, then ensemble them on the held-out disease."""
    sources = [d for d in range(len(DISEASE_PAIRS)) if d != held_out]
    classifiers = [probe.fit_probe(disease_records(d, seed), seed) for d in sources]
    target = disease_records(held_out, seed)
    x = np.stack([r.vector for r in target])
    y = np.array([r.label for r in target])

    def acc(prob, idx):
        return float(np.mean((prob[idx] >= 0.5).astype(int) == y[idx]))

    zero = probe.ensemble_zero_shot(classifiers, x)
    split = probe.stratified_split(target, (support_frac, 0.0, 1.0 - support_frac), seed, warn=False)
    support = np.array([s == "train" for s in split])
    query = np.flatnonzero(~support)
    weights = probe.ensemble_few_shot(classifiers, x[support], y[support])
    few = probe.ensemble_proba(classifiers, x, weights)
    return TransferRun(seed, acc(zero, np.arange(len(y))), acc(few, query), acc(zero, query), weights.tolist())
