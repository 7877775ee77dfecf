import numpy as np
import pytest

from voxseg.network import (
    ARCHITECTURES,
    NetworkSpec,
    StaleCacheError,
    backward,
    build,
    center_crop,
    center_uncrop,
    forward,
    forward_macs,
    make_spec,
    parameter_census,
)
from voxseg.tensor import PRELU_INIT

from conftest import network_fd_errors, perturbed_net, tiny_spec


@pytest.mark.parametrize("arch", ARCHITECTURES)
def test_receptive_field_is_19(arch):
    assert make_spec(arch).receptive_field == 19


def test_paper_shapes_on_a_27_cube():
    spec = tiny_spec("CNN_multi", width=1, fc=(2, 2, 2), num_classes=9)
    state = build(spec, np.random.default_rng(0))
    scores, cache = forward(state, spec, np.zeros((1, 27, 27, 27)))
    assert scores.shape == (9, 9, 9, 9)
    assert [cache.taps[f"conv{i}"][-3:] for i in (3, 6, 9)] == [(21,) * 3, (15,) * 3, (9,) * 3]


def test_paper_census():
    base = parameter_census(make_spec("cnn_base"))
    assert base["conv2"] == 428_800
    multi = make_spec("cnn_multi")
    assert multi.fc_input_channels == 25 + 50 + 75
    single = make_spec("cnn_single")
    assert single.fc_input_channels == 75
    with_slopes = parameter_census(single, include_slopes=True)
    assert with_slopes["conv1"] == parameter_census(single)["conv1"] + 25
    assert "slope" not in str(parameter_census(single)["classifier"])
    assert with_slopes["classifier"] == parameter_census(single)["classifier"]


def test_spec_validation():
    with pytest.raises(ValueError):
        NetworkSpec("CNN_base", (25, 50, 75), 3)
    with pytest.raises(ValueError):
        NetworkSpec("CNN_multi", (1,) * 9, 3, fusion_taps=(3, 6))
    with pytest.raises(ValueError):
        NetworkSpec("CNN_single", (1,) * 9, 3, fusion_taps=(3, 6, 9))
    with pytest.raises(ValueError):
        NetworkSpec("custom", (1, 1), 4)
    with pytest.raises(ValueError):
        make_spec("resnet")
    spec = make_spec("cnn_multi", conv_widths=(2,) * 9, fc_widths=(4, 4, 4))
    assert NetworkSpec.from_dict(spec.to_dict()) == spec


def test_build_initial_values():
    spec = tiny_spec()
    state = build(spec, np.random.default_rng(0))
    for layer in spec.layers():
        assert np.all(state.params[f"{layer.name}.bias"] == 0)
        if layer.has_prelu:
            assert np.all(state.params[f"{layer.name}.slope"] == PRELU_INIT)
    assert "classifier.slope" not in state.params
    again = build(spec, np.random.default_rng(0))
    assert all(np.array_equal(state.params[k], again.params[k]) for k in state.params)


def test_center_crop_and_uncrop_are_adjoint(rng):
    x = rng.normal(size=(2, 9, 7, 11))
    y = rng.normal(size=(2, 5, 3, 7))
    assert np.sum(center_crop(x, (5, 3, 7)) * y) == pytest.approx(np.sum(x * center_uncrop(y, x.shape)))
    np.testing.assert_array_equal(center_crop(x, (5, 3, 7)), x[:, 2:7, 2:5, 2:9])
    with pytest.raises(ValueError):
        center_crop(x, (4, 3, 7))
    with pytest.raises(ValueError):
        center_crop(x, (11, 3, 7))


def test_forward_rejects_small_input(multi_net):
    spec, state = multi_net
    with pytest.raises(ValueError, match="receptive field"):
        forward(state, spec, np.zeros((1, 18, 19, 19)))


def test_stale_cache_is_detected(multi_net):
    spec, state = multi_net
    scores, cache = forward(state, spec, np.zeros((1, 19, 19, 19)))
    state.version += 1
    with pytest.raises(StaleCacheError):
        backward(state, spec, cache, np.zeros_like(scores))


def test_batched_forward_matches_single(multi_net, rng):
    spec, state = multi_net
    x = rng.normal(size=(1, 3, 21, 21, 21))
    batched, _ = forward(state, spec, x)
    for n in range(3):
        single, _ = forward(state, spec, x[:, n])
        np.testing.assert_allclose(batched[:, n], single, atol=1e-12)


@pytest.mark.parametrize("arch", ARCHITECTURES)
def test_full_network_gradients(arch):
    spec = tiny_spec(arch)
    state, x, y, r = perturbed_net(spec, 7)
    errors = network_fd_errors(state, spec, x, y, r)
    assert set(errors) == set(state.params)
    # a weight touches few pre-activations, so a kink-free probe always exists;
    # a bias or slope moves a whole channel and may not have one
    assert all(v for k, v in errors.items() if k.endswith(".weight"))
    probed = [v for v in errors.values() if v]
    assert len(probed) >= 0.75 * len(errors)
    assert max(max(v) for v in probed) < 1e-4


@pytest.mark.parametrize("arch", ARCHITECTURES)
def test_full_network_gradients_without_kinks(arch):
    spec = tiny_spec(arch)
    state, x, y, r = perturbed_net(spec, 11, unit_slopes=True)
    errors = network_fd_errors(state, spec, x, y, r, skip_kinks=False)
    assert all(len(v) == 2 for v in errors.values())
    assert max(max(v) for v in errors.values()) < 1e-4


def test_forward_macs_hand_count():
    spec = NetworkSpec("custom", (2,), 3, (4,), 3)
    # conv: 3^3 out voxels x 2 x 1 x 27; fc: 27 x 4 x 2; classifier: 27 x 3 x 4
    assert forward_macs(spec, (5, 5, 5)) == 27 * 2 * 27 + 27 * 4 * 2 + 27 * 3 * 4
