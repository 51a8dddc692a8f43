import itertools
import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fcpretrain import encoder as enc
from fcpretrain import probe, ssl, trainer
from fcpretrain.connectome import pearson_fc
from fcpretrain.probe import EmbeddingRecord
from fcpretrain.synth import SynthSpec, gen_scans


def _records(x, y, sites=None):
    sites = sites or ["A"] * len(y)
    return [EmbeddingRecord(f"s{i}", np.asarray(v, float), int(l), s, "train")
            for i, (v, l, s) in enumerate(zip(x, y, sites))]


def _const_model(p, dim=2):
    # zero weights; bias is the logit of p, so proba == p everywhere
    return probe.SvmModel(np.zeros(dim), math.log(p / (1 - p)), 1.0, (0, 1), np.zeros(dim), np.ones(dim))


def _blobs(n, seed, shift=2.0, dim=4):
    rng = np.random.default_rng(seed)
    y = np.arange(n) % 2
    x = rng.normal(size=(n, dim)) + shift * y[:, None] * np.eye(dim)[0]
    return x, y


# --- extraction ----------------------------------------------------------------

def test_full_width_embedding_length():
    cfg = enc.EncoderConfig(v_rois=100, n_layers=1, n_heads=4, ffn_dim=8, readout_dim=8)
    params = ssl.init_model(cfg, 0).online
    scans = gen_scans(SynthSpec(n_subjects=1, v_rois=100, t_points=30), splits=["train"])
    assert len(probe.extract_embeddings(params, cfg, scans)[0].vector) == 800


def test_extraction_is_pure_and_decomposes(tmp_path):
    cfg = enc.EncoderConfig(v_rois=8, n_layers=2, n_heads=2, ffn_dim=8, readout_dim=3)
    m = ssl.init_model(cfg, 1)
    path = trainer.save_checkpoint(tmp_path / "c.bmass", trainer.Checkpoint(cfg, m.online))
    before = trainer.checkpoint_digest(path)
    ck = trainer.load_checkpoint(path)
    scans = gen_scans(SynthSpec(n_subjects=5, v_rois=8, t_points=50, seed=2))
    recs = probe.extract_embeddings(ck.params, cfg, scans + scans[:1], batch_size=2)
    assert np.array_equal(recs[0].vector, recs[-1].vector)
    t = enc.as_tensors(ck.encoder_params)
    x = pearson_fc(scans[3].data).matrix.astype(np.float32)
    step_by_step = enc.readout(t, enc.encode(t, cfg, x)).value
    np.testing.assert_allclose(recs[3].vector, step_by_step, rtol=1e-6, atol=1e-7)
    trainer.save_checkpoint(path, ck)
    assert trainer.checkpoint_digest(path) == before


def test_embeddings_csv_round_trip(tmp_path):
    recs = _records(np.random.default_rng(0).normal(size=(3, 5)), [0, 1, -1])
    probe.write_embeddings(tmp_path / "e.csv", recs)
    header = (tmp_path / "e.csv").read_text().splitlines()[0]
    assert header == "subject_id,label,site,split,f0,f1,f2,f3,f4"
    back = probe.read_embeddings(tmp_path / "e.csv")
    assert all(np.array_equal(a.vector, b.vector) and a.label == b.label for a, b in zip(recs, back))


# --- splits --------------------------------------------------------------------

def test_split_single_site_70_15_15():
    keys = [("A", i % 2) for i in range(100)]
    out = probe.stratified_split(keys, seed=0)
    assert [out.count(s) for s in ("train", "val", "test")] == [70, 15, 15]


def test_split_per_cell_14_3_3():
    keys = [(site, lab) for site in ("A", "B") for lab in (0, 1) for _ in range(20)]
    out = probe.stratified_split(keys, seed=3)
    for cell in set(keys):
        got = [s for k, s in zip(keys, out) if k == cell]
        assert [got.count(s) for s in ("train", "val", "test")] == [14, 3, 3]


def test_split_single_record_cell_goes_to_train():
    keys = [("A", 0)] * 10 + [("B", 1)]
    with pytest.warns(probe.SmallCellWarning):
        out = probe.stratified_split(keys, seed=0)
    assert out[-1] == "train"


@settings(max_examples=30, deadline=None)
@given(st.lists(st.tuples(st.sampled_from("AB"), st.integers(0, 1)), min_size=1, max_size=60), st.integers(0, 99))
def test_split_is_deterministic_and_total(keys, seed):
    import warnings
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", probe.SmallCellWarning)
        a = probe.stratified_split(keys, seed=seed)
        b = probe.stratified_split(keys, seed=seed)
    assert a == b and set(a) <= {"train", "val", "test"}
    for cell in set(keys):  # stratified: every cell within one unit of its exact share
        n = keys.count(cell)
        if n >= 3:
            got = [s for k, s in zip(keys, a) if k == cell]
            for name, f in zip(("train", "val", "test"), probe.SPLIT_FRACTIONS):
                assert abs(got.count(name) - f * n) < 1 + 1e-9


# --- SVM -----------------------------------------------------------------------

def test_two_point_separable():
    m = probe.svm_fit(np.array([[1.0, 0.0], [-1.0, 0.0]]), np.array([1, 0]), C=1.0)
    assert probe.accuracy(m, [[1.0, 0.0], [-1.0, 0.0]], [1, 0]) == 1.0


def test_xor_is_not_linearly_separable():
    x = np.array([[0.0, 0], [1, 1], [0, 1], [1, 0]])
    y = np.array([0, 0, 1, 1])
    # oracle: enumerate a dense grid of linear rules; none exceeds 3/4
    best = 0.0
    for ang, b in itertools.product(np.linspace(0, 2 * np.pi, 73), np.linspace(-2, 2, 41)):
        pred = (x @ [np.cos(ang), np.sin(ang)] + b >= 0).astype(int)
        best = max(best, float(np.mean(pred == y)))
    assert best == 0.75
    for C in probe.C_GRID:
        assert probe.accuracy(probe.svm_fit(x, y, C), x, y) <= 0.75


def test_svm_deterministic():
    x, y = _blobs(40, 0)
    a, b = probe.svm_fit(x, y, 1.0, seed=5), probe.svm_fit(x, y, 1.0, seed=5)
    assert np.array_equal(a.w, b.w) and a.b == b.b


def test_svm_agrees_with_reference_solver_on_blobs():
    from sklearn.svm import LinearSVC

    x, y = _blobs(200, 1, shift=1.5)
    ours = probe.svm_fit(x, y, 1.0)
    ref = LinearSVC(C=1.0, loss="hinge", dual=True, max_iter=100000).fit((x - ours.mean) / ours.scale, y)
    agree = np.mean(ours.predict(x) == ref.predict((x - ours.mean) / ours.scale))
    assert agree >= 0.95


def test_standardization_uses_train_statistics_only():
    x, y = _blobs(30, 2)
    m = probe.svm_fit(x[:20], y[:20])
    np.testing.assert_array_equal(m.mean, x[:20].mean(axis=0))
    np.testing.assert_array_equal(m.scale, x[:20].std(axis=0))


def test_decision_sign_invariant_to_positive_rescaling():
    x, y = _blobs(40, 3)
    m = probe.svm_fit(x, y)
    scaled = replace(m, w=3 * m.w, b=3 * m.b)
    assert np.array_equal(m.predict(x), scaled.predict(x))


def test_model_json_round_trip(tmp_path):
    x, y = _blobs(20, 4)
    m = probe.svm_fit(x, y)
    m.save(tmp_path / "m.json")
    back = probe.SvmModel.load(tmp_path / "m.json")
    assert np.array_equal(back.decision_function(x), m.decision_function(x))


def test_single_class_training_rejected():
    with pytest.raises(probe.ProbeError):
        probe.svm_fit(np.ones((4, 2)), np.zeros(4))


def test_validation_selects_c():
    x, y = _blobs(60, 5)
    recs = _records(x, y)
    chosen = probe.svm_train(recs[:40], recs[40:], seed=0)
    scores = {C: probe.accuracy(probe.svm_fit(x[:40], y[:40], C, 0), x[40:], y[40:]) for C in probe.C_GRID}
    assert scores[chosen.C] == max(scores.values())
    assert chosen.C == next(C for C in probe.C_GRID if scores[C] == max(scores.values()))


# --- metrics -------------------------------------------------------------------

def test_perfect_predictions():
    r = probe.metrics([1, 0, 1, 0], [1, 0, 1, 0])
    assert (r.accuracy, r.sensitivity, r.specificity) == (1.0, 1.0, 1.0)


def test_all_negative_predictor():
    r = probe.metrics([0, 0, 0, 0], [1, 0, 1, 0])
    assert (r.sensitivity, r.specificity) == (0.0, 1.0)


def test_confusion_arithmetic():
    labels = [1] * 4 + [0] * 6
    pred = [1, 1, 1, 0] + [0, 0, 0, 0, 1, 1]
    r = probe.metrics(pred, labels)
    assert (r.tp, r.fn, r.tn, r.fp) == (3, 1, 4, 2)
    assert r.accuracy == pytest.approx(0.7, abs=1e-15)
    assert r.sensitivity == 0.75
    assert r.specificity == pytest.approx(2 / 3, abs=1e-15)


def test_undefined_metrics_are_explicit():
    r = probe.metrics([1, 1], [1, 1])
    assert r.specificity is None and r.sensitivity == 1.0
    with pytest.raises(probe.ProbeError):
        probe.metrics([], [])


# --- repeated evaluation --------------------------------------------------------

def test_repeated_eval_single_repeat_has_zero_std():
    x, y = _blobs(60, 6)
    rep = probe.repeated_eval(_records(x, y), k=1, seed=0)
    assert rep.std["accuracy"] == 0.0 and len(rep.per_repeat) == 1


def test_repeated_eval_mean_is_arithmetic_mean():
    x, y = _blobs(80, 7, shift=1.0)
    rep = probe.repeated_eval(_records(x, y, ["A", "B"] * 40), seed=1)
    accs = [p["accuracy"] for p in rep.per_repeat]
    assert len(accs) == 10
    total = 0.0
    for a in accs:
        total += a
    assert rep.mean["accuracy"] == pytest.approx(total / 10, abs=1e-15)
    assert rep.std["accuracy"] == pytest.approx(float(np.std(accs)), abs=1e-15)


# --- ensembles -----------------------------------------------------------------

def test_zero_shot_uniform_average():
    x = np.zeros((3, 2))
    np.testing.assert_allclose(probe.ensemble_zero_shot([_const_model(0.6), _const_model(0.8)], x), 0.7, atol=1e-12)
    np.testing.assert_allclose(probe.ensemble_zero_shot([_const_model(0.3)], x), 0.3, atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(0.01, 0.99), min_size=1, max_size=6), st.randoms())
def test_ensemble_is_permutation_invariant(ps, rnd):
    models = [_const_model(p) for p in ps]
    shuffled = models[:]
    rnd.shuffle(shuffled)
    x = np.zeros((2, 2))
    np.testing.assert_allclose(probe.ensemble_zero_shot(models, x), probe.ensemble_zero_shot(shuffled, x),
                               rtol=0, atol=1e-12)


def test_few_shot_identical_classifiers_get_uniform_weights():
    x, y = _blobs(20, 8)
    m = probe.svm_fit(x, y)
    np.testing.assert_allclose(probe.ensemble_few_shot([m, m, m], x, y), 1 / 3, atol=1e-15)


def test_few_shot_perfect_classifier_gets_max_weight():
    x = np.array([[1.0, 0.0], [2.0, 0.0], [-1.0, 0.0], [-2.0, 0.0]])
    y = np.array([1, 1, 0, 0])
    perfect = probe.SvmModel(np.array([1.0, 0.0]), 0.0, 1.0, (0, 1), np.zeros(2), np.ones(2))
    chance = [_const_model(0.7), _const_model(0.2)]
    w = probe.ensemble_few_shot([chance[0], perfect, chance[1]], x, y)
    assert np.argmax(w) == 1 and w[1] > w[0]


def test_few_shot_weights_match_tally_oracle():
    x, y = _blobs(30, 9, shift=1.0)
    models = [probe.svm_fit(*_blobs(40, s, shift=1.0), C=1.0, seed=s) for s in range(4)]
    tallies = []
    for m in models:
        pred = [1 if p >= 0.5 else 0 for p in m.proba(x)]
        tp = sum(1 for p, t in zip(pred, y) if t == 1 and p == 1)
        tn = sum(1 for p, t in zip(pred, y) if t == 0 and p == 0)
        tallies.append(0.5 * (tp / sum(y == 1) + tn / sum(y == 0)))
    oracle = np.array(tallies) / sum(tallies)
    np.testing.assert_allclose(probe.ensemble_few_shot(models, x, y), oracle, rtol=0, atol=1e-12)
