import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from sklearn.metrics import normalized_mutual_info_score

from clusterzsl.evalmetrics import (clustering_nmi, harmonic_mean, kmeans, normalized_mutual_information,
                                    pca_project_2d, per_class_top1, variance_stats, write_projection)
from clusterzsl.ndcore import make_rng
from oracles import nmi_bruteforce

labelings = st.lists(st.integers(0, 5), min_size=2, max_size=60)


def test_per_class_top1_hand_example():
    acc, mean = per_class_top1([0, 0, 1, 1], [0, 0, 0, 1])
    assert acc == {0: pytest.approx(2 / 3), 1: 1.0}
    assert mean == pytest.approx(0.8333, abs=1e-4)


def test_per_class_top1_errors():
    with pytest.raises(ValueError):
        per_class_top1([], [])
    with pytest.raises(ValueError):
        per_class_top1([0, 1], [0])


@given(st.lists(st.tuples(st.integers(0, 3), st.integers(0, 3)), min_size=1, max_size=40), st.integers(0, 3),
       st.integers(0, 10**6))
@settings(max_examples=60, deadline=None)
def test_per_class_top1_is_order_and_duplication_invariant(pairs, dup_class, seed):
    pred, lab = map(np.array, zip(*pairs))
    _, mean = per_class_top1(pred, lab)
    perm = make_rng(seed).permutation(len(pred))
    assert per_class_top1(pred[perm], lab[perm])[1] == pytest.approx(mean)
    sel = lab == dup_class
    _, dup = per_class_top1(np.concatenate([pred, pred[sel]]), np.concatenate([lab, lab[sel]]))
    assert dup == pytest.approx(mean)


def test_harmonic_mean_values_and_errors():
    assert harmonic_mean(0.5, 0.5) == 0.5
    assert harmonic_mean(45.4, 63.8) == pytest.approx(53.0, abs=0.05)
    with pytest.raises(ValueError):
        harmonic_mean(0, 0)
    with pytest.raises(ValueError):
        harmonic_mean(-1, 2)


@given(st.floats(0, 1), st.floats(0, 1))
@settings(max_examples=100, deadline=None)
def test_harmonic_mean_properties(s, u):
    if s + u == 0:
        return
    h = harmonic_mean(s, u)
    assert h == pytest.approx(harmonic_mean(u, s))
    assert h <= 2 * min(s, u) + 1e-12
    assert h <= (s + u) / 2 + 1e-12


def test_kmeans_single_cluster_is_global_mean():
    x = make_rng(0).standard_normal((30, 3))
    res = kmeans(x, 1, seed=0)
    assert np.allclose(res.centroids[0], x.mean(0))


def test_kmeans_recovers_separated_triplets():
    base = np.array([[0.0, 0.0], [10.0, 0.0], [0.0, 10.0]])
    x = np.repeat(base, 3, axis=0) + make_rng(1).uniform(-0.1, 0.1, (9, 2))
    res = kmeans(x, 3, seed=4)
    groups = res.assignments.reshape(3, 3)
    assert all(len(set(g)) == 1 for g in groups)
    assert len(set(groups[:, 0])) == 3


def test_kmeans_objective_non_increasing_and_deterministic():
    x = make_rng(2).standard_normal((200, 4))
    res = kmeans(x, 6, seed=3)
    assert all(b <= a + 1e-9 for a, b in zip(res.history, res.history[1:]))
    assert np.array_equal(res.assignments, kmeans(x, 6, seed=3).assignments)
    assert res.n_iter <= 300


def test_kmeans_errors():
    with pytest.raises(ValueError):
        kmeans(np.zeros((3, 2)), 4)
    with pytest.raises(ValueError):
        kmeans(np.zeros((3, 2)), 0)


def test_nmi_matches_sklearn_and_bruteforce():
    rng = make_rng(5)
    a, b = rng.integers(0, 4, 300), rng.integers(0, 6, 300)
    b[:150] = a[:150]
    ours = normalized_mutual_information(a, b)
    assert ours == pytest.approx(normalized_mutual_info_score(b, a, average_method="arithmetic"), abs=1e-12)
    assert ours == pytest.approx(nmi_bruteforce(a, b), abs=1e-12)
    assert normalized_mutual_information(a, b, "geometric") == pytest.approx(
        normalized_mutual_info_score(b, a, average_method="geometric"), abs=1e-12)


@given(labelings, st.integers(0, 10**6))
@settings(max_examples=80, deadline=None)
def test_nmi_symmetric_and_relabeling_invariant(a, seed):
    a = np.array(a)
    rng = make_rng(seed)
    b = rng.integers(0, 4, a.size)
    v = normalized_mutual_information(a, b)
    assert 0.0 <= v <= 1.0
    assert v == pytest.approx(normalized_mutual_information(b, a))
    relabel = rng.permutation(10)
    assert v == pytest.approx(normalized_mutual_information(relabel[a], b))


def test_nmi_identity_and_degenerate_cases():
    a = np.array([0, 0, 1, 2, 2])
    assert normalized_mutual_information(a, a) == pytest.approx(1.0)
    assert normalized_mutual_information(a, 7 - a) == pytest.approx(1.0)
    assert normalized_mutual_information([1, 1, 1], [4, 4, 4]) == 1.0
    assert normalized_mutual_information([1, 1, 1], [0, 1, 2]) == 0.0
    with pytest.raises(ValueError):
        normalized_mutual_information([], [])
    with pytest.raises(ValueError):
        normalized_mutual_information(a, a, "max")


def test_nmi_of_independent_labelings_is_small():
    rng = make_rng(6)
    assert normalized_mutual_information(rng.integers(0, 10, 10_000), rng.integers(0, 10, 10_000)) <= 0.02


def test_clustering_nmi_on_separated_blobs():
    rng = make_rng(7)
    y = np.repeat(np.arange(4), 25)
    x = 10 * np.eye(4)[y] + 0.1 * rng.standard_normal((100, 4))
    assert clustering_nmi(x, y) == pytest.approx(1.0)


def test_variance_stats_hand_example():
    x = np.array([[0.0, 0.0], [2.0, 0.0], [10.0, 0.0], [10.0, 2.0], [5.0, 5.0]])
    st_ = variance_stats(x, [0, 0, 1, 1, 2])
    assert st_.intra_class_variance == pytest.approx(1.0)
    assert st_.skipped_classes == [2]
    means = np.array([[1.0, 0.0], [10.0, 1.0], [5.0, 5.0]])
    pair = [np.linalg.norm(means[i] - means[j]) for i, j in ((0, 1), (0, 2), (1, 2))]
    assert st_.inter_class_mean_distance == pytest.approx(np.mean(pair))


def test_pca_reconstruction_error_equals_trailing_eigenvalues():
    rng = make_rng(8)
    x = rng.standard_normal((50, 5)) @ rng.standard_normal((5, 5))
    p = pca_project_2d(x)
    xc = x - x.mean(0)
    vals, vecs = np.linalg.eigh(xc.T @ xc)
    comps = vecs[:, ::-1][:, :2]
    assert np.allclose(np.abs(p), np.abs(xc @ comps))
    recon = (xc @ comps) @ comps.T
    err = ((xc - recon) ** 2).sum()
    assert err == pytest.approx(vals[:-2].sum(), rel=1e-8)


def test_pca_sign_convention_and_degenerate_inputs():
    rng = make_rng(9)
    x = rng.standard_normal((20, 3))
    assert np.allclose(pca_project_2d(x), pca_project_2d(x.copy()))
    # loadings depend only on the covariance, so negating the data negates the scores
    assert np.allclose(pca_project_2d(-x), -pca_project_2d(x))
    assert pca_project_2d(np.ones((4, 3))).shape == (4, 2)
    assert pca_project_2d(rng.standard_normal((5, 1))).shape == (5, 2)
    with pytest.raises(ValueError):
        pca_project_2d(np.ones((1, 3)))


def test_write_projection_format(tmp_path):
    path = tmp_path / "p.tsv"
    write_projection(path, np.array([[0.5, -1.0], [2.0, 3.25]]), [3, 4], ["real", "synthesized"])
    assert path.read_text() == "0.5\t-1.0\t3\treal\n2.0\t3.25\t4\tsynthesized\n"
