import math

import numpy as np
import pytest

from ddoslab import extmodels as em
from ddoslab import ganomaly as gan
from ddoslab.flowdata import SchemaError

from conftest import make_table

NAMES = ["a", "b", "c"]


def bundle(x, violations=0):
    table = make_table(x, names=NAMES[:np.asarray(x).shape[1]])
    return em.SyntheticBundle(table, gan.AuditReport(len(table), {}, violations))


def cube(n=1000, seed=0):
    return np.random.default_rng(seed).random((n, 3))


def labeled(seed=0, n=600):
    """Benign near the origin, ddos shifted by 4 in every feature."""
    rng = np.random.default_rng(seed)
    x = np.vstack([rng.normal(0, 1, (n, 3)), rng.normal(4, 1, (n // 3, 3))])
    return make_table(x, np.r_[np.zeros(n), np.ones(n // 3)], names=NAMES)


SMALL = em.PretrainConfig(n_trees=50, epochs=5, hidden=(8, 4))


# ---------------------------------------------------------------- isolation forest math

def test_average_path_length_values():
    c = em.average_path_length
    assert c(1) == 0.0 and c(2) == 1.0
    assert c(3) == pytest.approx(2 * (math.log(2) + em.EULER_GAMMA) - 4 / 3)
    # exact harmonic-number form; the log approximation is within 1 / (n - 1)
    n = 256
    exact = 2 * sum(1 / k for k in range(1, n)) - 2 * (n - 1) / n
    assert abs(c(n) - exact) < 1 / (n - 1)


def oracle_path(tree, row, node=0, depth=0):
    if tree.feature[node] < 0:
        return depth + float(em.average_path_length(tree.size[node]))
    nxt = tree.left[node] if row[tree.feature[node]] < tree.threshold[node] else tree.right[node]
    return oracle_path(tree, row, nxt, depth + 1)


def test_vectorized_path_length_matches_recursive_walk():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(64, 3))
    tree = em.grow_tree(x, 6, rng)
    q = rng.normal(0, 2, (40, 3))
    np.testing.assert_array_equal(tree.path_length(q), [oracle_path(tree, r) for r in q])


def test_tree_height_bound_and_leaf_sizes():
    rng = np.random.default_rng(2)
    tree = em.grow_tree(rng.random((256, 3)), 8, rng)
    assert tree.height <= 8
    leaves = tree.feature < 0
    assert tree.size[leaves].sum() == 256


def test_outlier_and_centroid_scores():
    f = em.IsolationForest(100, 256).fit(cube(), np.random.default_rng(0))
    far, centre = f.score(np.array([[5.0, 5.0, 5.0], [0.5, 0.5, 0.5]]))
    assert far > 0.6 and centre < 0.5


def test_scores_in_open_unit_interval():
    f = em.IsolationForest(20, 64).fit(cube(200), np.random.default_rng(3))
    s = f.score(np.random.default_rng(4).normal(0, 10, (500, 3)))
    assert np.all(s > 0) and np.all(s < 1)


def test_deeper_path_scores_lower():
    # root splits x0 at 0.5: left leaf isolates one row, right subtree splits once more
    tree = em.IsolationTree(
        feature=np.array([0, -1, 0, -1, -1]), threshold=np.array([0.5, 0, 0.8, 0, 0]),
        left=np.array([1, -1, 3, -1, -1]), right=np.array([2, -1, 4, -1, -1]),
        size=np.array([4, 1, 3, 2, 1]))
    forest = em.IsolationForest(1, 4)
    forest.trees, forest.psi = [tree], 4
    shallow, mid, deep = forest.score(np.array([[0.1], [0.9], [0.6]]))
    assert tree.path_length(np.array([[0.6]]))[0] == 3.0
    assert shallow > mid > deep


# ---------------------------------------------------------------- pretrain

@pytest.mark.parametrize("kind", em.KINDS)
def test_pretrain_is_deterministic(kind):
    a = em.pretrain(kind, bundle(cube(300)), SMALL)
    b = em.pretrain(kind, bundle(cube(300)), SMALL)
    assert em.to_bytes(a) == em.to_bytes(b)


def test_pretrain_refuses_bad_audit():
    with pytest.raises(em.AuditRefusal) as info:
        em.pretrain("isolation_forest", bundle(cube(100), violations=50))
    assert info.value.report.violation_ratio == 0.5


def test_pretrain_errors():
    with pytest.raises(ValueError, match="empty"):
        em.pretrain("isolation_forest", bundle(np.zeros((0, 3))))
    with pytest.raises(ValueError, match="kind"):
        em.pretrain("random_forest", bundle(cube(10)))
    with pytest.raises(ValueError):
        em.SyntheticBundle(make_table(cube(2), [0, 1], names=NAMES), gan.AuditReport(2))


# ---------------------------------------------------------------- fine-tune

@pytest.mark.parametrize("kind", em.KINDS)
def test_zero_epoch_fine_tune_is_identity(kind):
    m = em.pretrain(kind, bundle(cube(300)), SMALL)
    before = em.to_bytes(m)
    em.fine_tune(m, labeled(), em.FineTuneConfig(epochs=0))
    assert em.to_bytes(m) == before


@pytest.mark.parametrize("kind", em.KINDS)
def test_fine_tune_rejects_other_schema(kind):
    m = em.pretrain(kind, bundle(cube(300)), SMALL)
    other = make_table(cube(20), names=["x", "y", "z"])
    with pytest.raises(SchemaError):
        em.fine_tune(m, other)


def test_mlp_fine_tune_needs_both_classes():
    m = em.pretrain("mlp_classifier", bundle(cube(300)), SMALL)
    with pytest.raises(ValueError, match="both"):
        em.fine_tune(m, make_table(cube(20), names=NAMES))


def test_fine_tune_learns_local_domain():
    syn = np.random.default_rng(5).normal(0, 1, (1000, 3))
    local, test = labeled(6), labeled(7)
    for kind in em.KINDS:
        m = em.pretrain(kind, bundle(syn), SMALL)
        em.fine_tune(m, local, em.FineTuneConfig(epochs=30, batch_size=64))
        assert m.fine_tune_log
        rep = em.evaluate_unseen(m, {"own": test, "again": test})
        assert rep["own"].f1 >= 0.8
        # the own domain is just another cell
        assert (rep["own"].f1, rep["own"].tp) == (rep["again"].f1, rep["again"].tp)


def test_mlp_inputs_bounded_when_a_column_collapsed_in_synthetic_data():
    # a flag bit that is 0 in almost every synthetic row has a tiny std
    syn = np.random.default_rng(8).normal(0, 1, (1000, 3))
    syn[:, 2] = 0.0
    syn[0, 2] = 1e-3
    local, test = (t.with_features(np.c_[t.features[:, :2], t.labels])  # the bit marks ddos
                   for t in (labeled(6), labeled(7)))
    m = em.pretrain("mlp_classifier", bundle(syn), SMALL)
    assert np.abs(m._standardize(test)).max() == em.MLPModel.INPUT_CLIP
    em.fine_tune(m, local, em.FineTuneConfig(epochs=30, batch_size=64))
    assert em.evaluate_unseen(m, {"own": test})["own"].f1 >= 0.8


def test_forest_fine_tune_appends_trees():
    m = em.pretrain("isolation_forest", bundle(cube(300)), SMALL)
    pre = [t.threshold.tobytes() for t in m.pretrained.trees]
    em.fine_tune(m, labeled(), em.FineTuneConfig(epochs=1, batch_size=200, trees_per_batch=3))
    assert len(m.finetuned.trees) == 3 * 3
    assert [t.threshold.tobytes() for t in m.pretrained.trees] == pre


def test_evaluate_unseen_lists_bad_domains():
    m = em.pretrain("isolation_forest", bundle(cube(300)), SMALL)
    good = labeled()
    bad = make_table(cube(4), [0, 1, 0, 1], names=["x", "y", "z"])
    with pytest.raises(SchemaError, match="'B'"):
        em.evaluate_unseen(m, {"A": good, "B": bad})


# ---------------------------------------------------------------- export

@pytest.mark.parametrize("kind", em.KINDS)
def test_export_round_trip(kind, tmp_path):
    m = em.pretrain(kind, bundle(cube(300)), SMALL)
    em.fine_tune(m, labeled(), em.FineTuneConfig(epochs=2))
    digest = em.save(m, tmp_path / "m.extm")
    back = em.load(tmp_path / "m.extm")
    assert back.fingerprint() == digest == m.fingerprint()
    t = labeled(9)
    np.testing.assert_array_equal(back.score(t), m.score(t))
    assert back.threshold == m.threshold and back.kind == kind


def test_load_rejects_other_files():
    with pytest.raises(ValueError):
        em.from_bytes(b"NOPE" + bytes(8))


@pytest.mark.parametrize("kind", em.KINDS)
def test_exported_model_holds_no_rows(kind):
    syn = cube(300)
    local = labeled()
    m = em.pretrain(kind, bundle(syn), SMALL)
    em.fine_tune(m, local, em.FineTuneConfig(epochs=2))
    blob = em.to_bytes(m)
    for rows in (syn, local.features, (local.features - m.mean) / m.std, (syn - m.mean) / m.std):
        for r in rows:
            assert r.tobytes() not in blob
