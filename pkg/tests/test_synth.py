import numpy as np
import pytest

from fcpretrain import ingest, synth
from fcpretrain.connectome import pearson_fc


def test_single_class_all_zero_labels():
    scans = synth.gen_scans(synth.SynthSpec(n_subjects=9, n_classes=1, v_rois=8, t_points=20))
    assert {s.label for s in scans} == {0}


def test_same_seed_same_index_identical():
    spec = synth.SynthSpec(v_rois=8, t_points=30, seed=4)
    assert np.array_equal(synth.gen_subject(spec, 7), synth.gen_subject(spec, 7))
    assert not np.array_equal(synth.gen_subject(spec, 7), synth.gen_subject(spec, 8))


@pytest.mark.parametrize("seed", range(5))
def test_empirical_fc_converges_to_population(seed):
    errs = []
    for t in (200, 2000):
        spec = synth.SynthSpec(v_rois=16, t_points=t, seed=seed, class_effect=synth.default_class_effect(2, 0.1))
        emp = pearson_fc(synth.gen_subject(spec, 1)).matrix
        errs.append(np.max(np.abs(emp - synth.population_fc(spec, 1))))
    assert errs[1] < errs[0]


def test_population_fc_closed_form():
    spec = synth.SynthSpec(v_rois=8, within_block_corr=0.4, noise_sigma=0.5,
                           class_effect=synth.default_class_effect(2, 0.2))
    pop = synth.population_fc(spec, 1)
    assert pop[0, 1] == pytest.approx(0.4 / 1.25, abs=1e-15)  # ROIs 0,1 share block 0
    assert pop[0, 2] == pytest.approx(0.2 / 1.25, abs=1e-15)  # blocks 0,1 coupled by the class effect
    assert pop[0, 4] == 0.0
    assert synth.population_fc(spec, 0)[0, 2] == 0.0


def test_planted_structure_visible_in_every_subject():
    spec = synth.SynthSpec(n_subjects=40, v_rois=16, t_points=200, seed=2)
    b = np.asarray(spec.blocks)
    same = (b[:, None] == b[None, :]) & ~np.eye(16, dtype=bool)
    diff = b[:, None] != b[None, :]
    for s in synth.gen_scans(spec):
        m = pearson_fc(s.data).matrix
        assert m[same].mean() > m[diff].mean()


def _edge_t(effect):
    spec = synth.SynthSpec(n_subjects=80, v_rois=16, t_points=200, seed=5,
                           class_effect=synth.default_class_effect(2, effect))
    b = np.asarray(spec.blocks)
    edge = (b[:, None] == 0) & (b[None, :] == 1)
    vals = {0: [], 1: []}
    for s in synth.gen_scans(spec):
        vals[s.label].append(pearson_fc(s.data).matrix[edge].mean())
    a, c = np.array(vals[1]), np.array(vals[0])
    return (a.mean() - c.mean()) / np.sqrt(a.var(ddof=1) / len(a) + c.var(ddof=1) / len(c))


def test_class_effect_monotonically_increases_separability():
    t = [_edge_t(e) for e in (0.05, 0.1, 0.2)]
    assert t[0] < t[1] < t[2]


def test_non_positive_definite_rejected():
    # blocks 0 and 1 have two ROIs each; eigenvalue 1 + 0.9 - 2 * 0.97 < 0
    bad = synth.SynthSpec(v_rois=8, within_block_corr=0.9, class_effect={1: ((0, 1, -0.97),)})
    with pytest.raises(synth.SpecError, match="positive definite"):
        synth.gen_scans(bad)


def test_effect_outside_unit_interval_rejected():
    with pytest.raises(synth.SpecError):
        synth.latent_covariance(synth.SynthSpec(v_rois=8, class_effect={1: ((0, 0, 0.6),)}), 1)


def test_cohort_on_disk(tmp_path):
    spec = synth.SynthSpec(n_subjects=12, v_rois=8, t_points=25, seed=1)
    m = ingest.load_manifest(synth.gen_cohort(spec, tmp_path, fmt="bts"))
    assert len(m) == 12 and m.atlas_rois == 8
    assert {e.site for e in m.entries} == {"site0", "site1"}
    labels = [e.label for e in m.entries]
    assert labels.count(0) == labels.count(1) == 6
    mem = synth.gen_scans(spec)
    disk = ingest.load_cohort(m)
    assert [s.subject_id for s in mem] == [s.subject_id for s in disk]
    np.testing.assert_array_equal(disk[0].data, mem[0].data.astype(np.float32))


def test_oracle_collinear_and_antilinear():
    o = synth.oracle_pearson([[1.0, 2, 3, 4], [2, 4, 6, 8], [4, 3, 2, 1]])
    assert o[0, 1] == pytest.approx(1.0, abs=1e-15)
    assert o[0, 2] == pytest.approx(-1.0, abs=1e-15)


def test_oracle_marks_undefined_entries():
    o = synth.oracle_pearson([[1.0, 1, 1], [1, 2, 4]])
    assert np.isnan(o[0, 1]) and np.isnan(o[0, 0]) and o[1, 1] == pytest.approx(1.0)


def test_oracle_agrees_with_pearson_fc_on_1000_matrices():
    rng = np.random.default_rng(123)
    worst = 0.0
    for _ in range(1000):
        v, t = rng.integers(2, 7), rng.integers(3, 30)
        data = rng.normal(size=(v, t)) * rng.uniform(0.1, 10) + rng.uniform(-5, 5)
        worst = max(worst, np.max(np.abs(pearson_fc(data).matrix - synth.oracle_pearson(data))))
    assert worst <= 1e-12
