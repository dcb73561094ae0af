import numpy as np
import pytest

from flowparse import backbone as bb
from flowparse import costs
from flowparse.autodiff import ParamStore, Tape
from flowparse.errors import ContractViolation


def make_backbone(rng, channels=16, depth=2):
    store = ParamStore()
    params = bb.init_backbone(store, bb.BackboneConfig(channels=channels, depth=depth), rng)
    return store, params


def test_output_stride_four(rng):
    _store, params = make_backbone(rng)
    tape = Tape()
    feat = bb.extract_features(tape.leaf(rng.uniform(size=(3, 64, 64))), params)
    assert feat.shape == (16, 16, 16)


@pytest.mark.parametrize("hw", [(16, 16), (32, 48), (64, 64), (128, 96)])
def test_shape_contract_across_sizes(rng, hw):
    _store, params = make_backbone(rng, channels=8, depth=1)
    h, w = hw
    tape = Tape()
    feat = bb.extract_features(tape.leaf(rng.uniform(size=(3, h, w))), params)
    assert feat.shape == (8, h // 4, w // 4)


def test_indivisible_dims_rejected(rng):
    _store, params = make_backbone(rng)
    tape = Tape()
    with pytest.raises(ContractViolation):
        bb.extract_features(tape.leaf(rng.uniform(size=(3, 62, 64))), params)


def test_zero_frame_finite_output(rng):
    _store, params = make_backbone(rng)
    tape = Tape()
    feat = bb.extract_features(tape.leaf(np.zeros((3, 32, 32))), params)
    assert np.all(np.isfinite(feat.data))


def test_deterministic(rng):
    _store, params = make_backbone(rng)
    frame = rng.uniform(size=(3, 32, 32))
    a = bb.extract_features(Tape().leaf(frame), params).data
    b = bb.extract_features(Tape().leaf(frame), params).data
    np.testing.assert_array_equal(a, b)


def test_config_validation():
    with pytest.raises(ContractViolation):
        bb.BackboneConfig(channels=4)
    with pytest.raises(ContractViolation):
        bb.BackboneConfig(depth=0)


def test_parameter_count_matches_store(rng):
    config = bb.BackboneConfig(channels=16, depth=3)
    store = ParamStore()
    bb.init_backbone(store, config, rng)
    assert store.total_size() == bb.parameter_count(config)


def test_parameter_count_scales_with_depth_and_width():
    base = bb.parameter_count(bb.BackboneConfig(channels=16, depth=2))
    deeper = bb.parameter_count(bb.BackboneConfig(channels=16, depth=4))
    wider = bb.parameter_count(bb.BackboneConfig(channels=32, depth=2))
    assert deeper > base and wider > 3 * base  # O(C^2 * depth)


def test_feature_macs_matches_instrumented_count(rng):
    config = bb.BackboneConfig(channels=16, depth=2)
    store = ParamStore()
    params = bb.init_backbone(store, config, rng)
    counter = costs.CostCounter()
    with costs.counting(counter), counter.scope("feat"):
        bb.extract_features(Tape().leaf(rng.uniform(size=(3, 32, 32))), params)
    assert counter.macs["feat"] == bb.feature_macs(config, 32, 32)
