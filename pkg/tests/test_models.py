import numpy as np
import pytest

from tsdg import autodiff as ad
from tsdg.autodiff import ConfigurationError, ShapeError
from tsdg.models import (
    BackboneSpec,
    Layer,
    bearings_spec,
    build,
    hhar_spec,
    load_checkpoint,
    save_checkpoint,
    spec_by_name,
    toy_spec,
)


def _n_params(model):
    return sum(p.data.size for p in model.parameters())


def test_same_seed_bit_identical():
    a, b = build(toy_spec(), 7), build(toy_spec(), 7)
    for pa, pb in zip(a.parameters(), b.parameters()):
        assert pa.data.tobytes() == pb.data.tobytes()


def test_toy_forward_shape(rng):
    model = build(toy_spec(), 0)
    z, g = model.forward(rng.standard_normal((3, 2, 200)), train=False)
    assert g.shape == (3, 2)
    assert z.shape == (3, 32)


def test_hhar_forward_shape_and_pool_window(rng):
    model = build(hhar_spec(), 0)
    pool = [m for m in model.extractor if m.desc.kind == "avgpool"][0]
    assert pool.window == 121
    _, g = model.forward(rng.standard_normal((2, 3, 128)))
    assert g.shape == (2, 6)


def test_bearings_forward_shape(rng):
    model = build(bearings_spec(), 0)
    z, g = model.forward(rng.standard_normal((2, 1, 4096)))
    assert z.shape == (2, 32) and g.shape == (2, 10)


def test_layer_init_ranges():
    model = build(toy_spec(), 3)
    conv, fc = model.extractor[0], model.classifier[0]
    assert np.all(np.abs(conv.weight.data) <= 1 / np.sqrt(2 * 8))
    assert np.all(np.abs(fc.weight.data) <= 1 / np.sqrt(32))
    assert np.all(conv.bias.data == 0) and np.all(fc.bias.data == 0)
    bn = model.extractor[1]
    assert np.all(bn.gamma.data == 1) and np.all(bn.beta.data == 0)


def test_zero_input_gives_equal_logits():
    model = build(toy_spec(), 0)
    for train in (True, False):
        _, g = model.forward(np.zeros((4, 2, 200)), train=train)
        np.testing.assert_allclose(g.data, g.data[:, :1] * np.ones((1, 2)), atol=1e-12)


def test_eval_forward_deterministic(rng):
    model = build(toy_spec(), 0)
    x = rng.standard_normal((5, 2, 200))
    a = model.forward(x, train=False)[1].data
    b = model.forward(x, train=False)[1].data
    assert a.tobytes() == b.tobytes()


def test_train_forward_updates_running_stats(rng):
    model = build(toy_spec(), 0)
    x = rng.standard_normal((5, 2, 200)) * 3 + 1
    before = model.forward(x, train=False)[1].data.copy()
    model.forward(x, train=True)
    after = model.forward(x, train=False)[1].data
    assert not np.allclose(before, after)


def test_softmax_rows_sum_to_one(rng):
    p = build(toy_spec(), 0).predict_proba(rng.standard_normal((7, 2, 200)) * 10)
    np.testing.assert_allclose(p.sum(1), 1.0, atol=1e-12)


def test_shape_mismatch_is_input_error():
    with pytest.raises(ShapeError):
        build(toy_spec(), 0).forward(np.zeros((1, 3, 200)))


def test_non_composing_spec_names_layer():
    spec = BackboneSpec("bad", 1, 5, (Layer("conv", size=2, kernel=8),), (Layer("flatten"), Layer("fc", size=2)), 2)
    with pytest.raises(ConfigurationError, match="layer 0"):
        build(spec, 0)
    spec = BackboneSpec("bad", 1, 10, (Layer("conv", size=2, kernel=3), Layer("fc", size=4)), (Layer("fc", size=2),), 2)
    with pytest.raises(ConfigurationError, match="layer 1"):
        build(spec, 0)


def test_wrong_class_count_rejected():
    spec = toy_spec()
    bad = BackboneSpec(spec.name, spec.in_channels, spec.length, spec.extractor, spec.classifier, 3)
    with pytest.raises(ConfigurationError):
        build(bad, 0)


def test_unknown_backbone():
    with pytest.raises(ConfigurationError):
        spec_by_name("resnet")


def test_parameter_counts():
    assert _n_params(build(toy_spec(), 0)) == 32 * 2 * 8 + 32 + 2 * 32 + 32 * 2 + 2
    assert _n_params(build(hhar_spec(), 0)) == 267526


def test_checkpoint_roundtrip(tmp_path, rng):
    model = build(toy_spec(), 0)
    x = rng.standard_normal((4, 2, 200))
    model.forward(x, train=True)
    path = tmp_path / "m.npz"
    save_checkpoint(model, path)
    loaded = load_checkpoint(path)
    assert loaded.spec == model.spec
    np.testing.assert_array_equal(loaded.predict_proba(x), model.predict_proba(x))


def test_gradients_reach_all_parameters(rng):
    model = build(toy_spec(hidden_dim=4), 0)
    _, g = model.forward(rng.standard_normal((3, 2, 200)), train=True)
    ad.backward(ad.softmax_cross_entropy(g, ad.one_hot([0, 1, 1], 2)))
    assert all(p.grad is not None and p.grad.shape == p.data.shape for p in model.parameters())
