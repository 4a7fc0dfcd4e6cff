import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tsdg import autodiff as ad
from tsdg.autodiff import Tensor
from tsdg.regularizer import (
    RegularizerConfig,
    RegularizerConfigError,
    SampleReference,
    cluster_references,
    omega,
    omega_meta,
    omega_sample_level,
    row_distance,
)
from tsdg.similarity import (
    CentroidTable,
    ClusterAssignment,
    WeightMatrix,
    metadata_weights,
    uniform_all_weights,
)

from conftest import numeric_grad, rel_err


def _softmax(a):
    e = np.exp(a - a.max(-1, keepdims=True))
    return e / e.sum(-1, keepdims=True)


@pytest.mark.parametrize("distance", ["sq_l2", "cosine", "kl"])
def test_identical_centroids_zero(distance, rng):
    c = _softmax(rng.standard_normal((3, 4)))
    t = CentroidTable.from_arrays({1: c, 2: c.copy(), 3: c.copy()}, representation="soft_labels")
    assert omega(t, uniform_all_weights([1, 2, 3]), distance).item() == pytest.approx(0.0, abs=1e-12)
    assert omega_meta(t, ClusterAssignment.single([1, 2, 3]), distance).item() == pytest.approx(0.0, abs=1e-12)


def test_hand_value_pairwise_and_cluster_forms():
    t = CentroidTable.from_arrays({1: np.array([[0.0, 0.0]]), 2: np.array([[2.0, 0.0]])})
    w = metadata_weights(ClusterAssignment.single([1, 2]))
    assert w.w(1, 2) == 0.25
    assert omega(t, w).item() == pytest.approx(2.0)
    assert omega_meta(t, ClusterAssignment.single([1, 2])).item() == pytest.approx(2.0)


def test_uniform_all_equals_metadata_single_cluster(rng):
    t = CentroidTable.from_arrays({d: rng.standard_normal((3, 2)) for d in (1, 2, 3, 4)})
    a = omega(t, uniform_all_weights(t.domains)).item()
    b = omega(t, metadata_weights(ClusterAssignment.single(t.domains))).item()
    assert a == b


def test_singleton_clusters_meta_zero(rng):
    t = CentroidTable.from_arrays({d: rng.standard_normal((3, 2)) for d in (1, 2, 3)})
    assert omega_meta(t, ClusterAssignment.from_groups([[1], [2], [3]])).item() == 0.0


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 8), st.integers(1, 10), st.integers(0, 10**6), st.booleans())
def test_pairwise_cluster_form_equivalence(m, n_cls, seed, drop_cells):
    rng = np.random.default_rng(seed)
    arr = {d: rng.standard_normal((n_cls, 3)) * rng.uniform(0.1, 10) for d in range(1, m + 1)}
    counts = {d: (rng.random(n_cls) > 0.3).astype(int) if drop_cells else np.ones(n_cls, int) for d in arr}
    t = CentroidTable.from_arrays(arr, counts)
    a = ClusterAssignment({d: int(rng.integers(1, m + 1)) for d in arr})
    v_pair = omega(t, metadata_weights(a)).item()
    v_clu = omega_meta(t, a).item()
    assert abs(v_pair - v_clu) < 1e-9 * (1 + v_pair)


@settings(max_examples=50, deadline=None)
@given(st.integers(2, 6), st.integers(0, 10**6))
def test_omega_nonnegative_and_relabel_symmetric(m, seed):
    rng = np.random.default_rng(seed)
    arr = {d: rng.standard_normal((2, 3)) for d in range(1, m + 1)}
    a = ClusterAssignment({d: int(rng.integers(1, 3)) for d in arr})
    v = omega(CentroidTable.from_arrays(arr), metadata_weights(a)).item()
    assert v >= 0
    # swap two domains that share a cluster
    members = [ms for ms in a.members().values() if len(ms) > 1]
    if members:
        i, j = members[0][:2]
        swapped = dict(arr)
        swapped[i], swapped[j] = arr[j], arr[i]
        v2 = omega(CentroidTable.from_arrays(swapped), metadata_weights(a)).item()
        assert v2 == pytest.approx(v, rel=1e-12, abs=1e-12)


def test_distance_definitions():
    a = np.array([[1.0, 0.0], [0.0, 0.0], [0.3, 0.7]])
    b = np.array([[0.0, 1.0], [1.0, 0.0], [0.5, 0.5]])
    np.testing.assert_allclose(row_distance(a, b, "sq_l2").data, [2.0, 1.0, 0.08])
    cos = row_distance(a, b, "cosine").data
    assert cos[0] == pytest.approx(1.0) and cos[1] == 0.0
    kl = row_distance(a[2:], b[2:], "kl").data[0]
    assert kl == pytest.approx(0.3 * np.log(0.6) + 0.7 * np.log(1.4))


def test_kl_requires_soft_labels(rng):
    t = CentroidTable.from_arrays({1: rng.random((2, 2)), 2: rng.random((2, 2))}, representation="logits")
    with pytest.raises(RegularizerConfigError):
        omega(t, uniform_all_weights([1, 2]), "kl")
    with pytest.raises(RegularizerConfigError):
        RegularizerConfig(distance="kl", representation="features")


@pytest.mark.parametrize("distance", ["sq_l2", "cosine", "kl"])
def test_omega_gradients(distance, rng):
    arr = {d: _softmax(rng.standard_normal((3, 4))) for d in (1, 2, 3)}
    w = WeightMatrix((1, 2, 3), np.array([[0, 0.3, 0], [0.2, 0, 0.5], [0.1, 0, 0]]), "learned")

    def value():
        return omega(CentroidTable.from_arrays(arr, representation="soft_labels"), w, distance).item()

    t = CentroidTable.from_arrays(arr, representation="soft_labels", requires_grad=True)
    ad.backward(omega(t, w, distance))
    num = numeric_grad(value, [arr[d] for d in (1, 2, 3)])
    for d, g in zip((1, 2, 3), num):
        assert rel_err(t.means[d].grad, g) < 1e-6


def test_sample_level_examples():
    ref = SampleReference({1: np.array([[2.0]])}, {1: np.array([True])}, {1: 1.0})
    assert omega_sample_level(np.array([[0.0]]), [0], [1], ref).item() == 4.0
    ref0 = SampleReference({1: np.array([[0.0]])}, {1: np.array([True])}, {1: 1.0})
    assert omega_sample_level(np.array([[0.0], [0.0]]), [0, 0], [1, 1], ref0).item() == 0.0


def test_sample_level_brute_force_and_detached(rng):
    reps = rng.standard_normal((12, 3))
    labels = rng.integers(0, 2, 12)
    doms = np.repeat([1, 2, 3], 4)
    arr = {d: np.array([reps[(doms == d) & (labels == c)].mean(0) if np.any((doms == d) & (labels == c)) else np.zeros(3)
                        for c in range(2)]) for d in (1, 2, 3)}
    counts = {d: np.array([np.sum((doms == d) & (labels == c)) for c in range(2)]) for d in (1, 2, 3)}
    t = CentroidTable.from_arrays(arr, counts)
    a = ClusterAssignment.from_groups([[1, 2], [3]])
    ref = cluster_references(t, a)
    expect = 0.0
    for k in range(12):
        d, y = doms[k], labels[k]
        if d == 3 or not ref.present[d][y]:
            continue
        members = [m for m in (1, 2) if counts[m][y] > 0]
        gamma = np.mean([arr[m][y] for m in members], axis=0)
        expect += np.sum((reps[k] - gamma) ** 2)
    expect /= 12
    x = Tensor(reps.copy(), requires_grad=True)
    val = omega_sample_level(x, labels, doms, ref)
    assert val.item() == pytest.approx(expect, abs=1e-10)
    ad.backward(val)
    # reference detached: gradient is 2 (rep - ref) / n for regularized samples only
    for k in range(12):
        if doms[k] == 3:
            np.testing.assert_array_equal(x.grad[k], 0.0)
        else:
            np.testing.assert_allclose(x.grad[k], 2 * (reps[k] - ref.centroids[doms[k]][labels[k]]) / 12, atol=1e-12)
