import numpy as np
import pytest

from errors import ContractError, DimensionError
from map_encoder import (CONV_LAYERS, DrivableMask, augment_channels, conv_stack, encode_map, init_map_encoder,
                         patch_coverage)
from scene_data import intersection_mask
from selftest import GRAD_TOLERANCE, grad_case, tiny_config
from tensor import ParamStore, gradcheck, make_rng


def map_params(cfg, seed=0):
    store = ParamStore()
    init_map_encoder(store.scope("map"), cfg, make_rng(seed))
    return store.scope("map")


def test_mask_validation():
    with pytest.raises(DimensionError):
        DrivableMask(grid=np.ones((2, 3)), resolution=1.0, origin=(0, 0))
    with pytest.raises(ContractError):
        DrivableMask(grid=np.full((2, 2), 2), resolution=1.0, origin=(0, 0))
    with pytest.raises(ContractError):
        DrivableMask(grid=np.zeros((2, 2)), resolution=1.0, origin=(0, 0))


def test_mask_rows_and_lookup():
    mask = DrivableMask.from_rows(["010", "111", "010"], resolution=2.0, origin=(-3.0, -3.0))
    assert mask.to_rows() == ["010", "111", "010"]
    points = np.array([[0.0, 0.0], [-2.5, -2.5], [2.5, 0.0], [10.0, 0.0]])
    assert mask.contains(points).tolist() == [True, False, True, False]
    with pytest.raises(DimensionError):
        DrivableMask.from_rows(["01", "1"], resolution=1.0, origin=(0, 0))


def test_intersection_mask_geometry():
    mask = intersection_mask()
    assert mask.size == 64
    assert mask.contains(np.array([[0.0, 20.0], [20.0, -2.0], [0.0, 0.0]])).all()
    assert not mask.contains(np.array([[10.0, 10.0]])).any()


def test_augment_channels_ranges():
    channels = augment_channels(intersection_mask(size=8)).data
    assert channels.shape == (4, 8, 8)
    assert channels[1, 0, 0] == 0.0 and channels[1, -1, 0] == 1.0
    assert channels[2, 0, -1] == 1.0
    assert np.allclose(channels[3][[0, 0, -1, -1], [0, -1, 0, -1]], 1.0, atol=1e-15)
    assert channels[3].max() <= 1.0 + 1e-15
    raw = augment_channels(intersection_mask(size=8), raw_indices=True).data
    assert raw[1, -1, 0] == 7.0


def test_conv_stack_output_shape():
    cfg = tiny_config(map_mode="cnn", map_size=64, patch_size=8, patch_stride=4)
    fmap = conv_stack(augment_channels(intersection_mask()), map_params(cfg), cfg)
    assert fmap.shape == (CONV_LAYERS[-1][0], 32, 32)


@pytest.mark.parametrize("mode,tokens", [("cnn", 1), ("transformer", 1 + 49)])
def test_token_counts(mode, tokens):
    cfg = tiny_config(map_mode=mode, map_size=64, patch_size=8, patch_stride=4)
    result = encode_map(intersection_mask(), map_params(cfg), cfg)
    assert result.phi_map.shape == (tokens, cfg.d_m)
    assert result.n_patches == tokens - 1


def test_map_free_model_has_no_tokens():
    cfg = tiny_config(map_mode="none")
    assert encode_map(intersection_mask(size=8), None, cfg) is None


def test_mask_size_must_match_model():
    cfg = tiny_config(map_mode="cnn")
    with pytest.raises(DimensionError):
        encode_map(intersection_mask(size=16), map_params(cfg), cfg)


def test_overlapping_patches_cover_every_cell():
    coverage = patch_coverage(32, 8, 4)
    assert coverage.min() >= 1
    assert coverage.max() == 4


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_conv_stack_gradients(seed):
    fn, tensors = grad_case("conv_stack", seed)
    result = gradcheck(fn, tensors, max_entries=12, seed=seed)
    assert result.passed(GRAD_TOLERANCE), result.errors
