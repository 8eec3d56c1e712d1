import numpy as np
import pytest

from hmpe.heatmaps import normalize_heatmap
from hmpe.maskpe import (
    PosEncoding,
    classify_regions,
    mask_from_heatmap,
    masked_pe,
    pe_temperatures,
    sinusoidal_pe,
)
from hmpe.utils.errors import DomainError, ShapeError


def test_pe_temperatures_for_depth_four():
    np.testing.assert_allclose(pe_temperatures(4), [1.0, 100.0])


@pytest.mark.parametrize("depth", [0, 3])
def test_pe_temperatures_reject_odd_depth(depth):
    with pytest.raises(DomainError):
        pe_temperatures(depth)


def test_sinusoidal_pe_formula():
    pe = sinusoidal_pe(3, 5, 6)
    assert pe.depth == 6 and pe.spatial == (3, 5)
    temps = pe_temperatures(6)
    for i in range(3):
        for j in range(5):
            for d in range(3):
                expected = np.sin(i / temps[d]) + np.cos(j / temps[d])
                assert pe.pe[i, j, 2 * d] == pytest.approx(expected, abs=1e-6)
                assert pe.pe[i, j, 2 * d + 1] == pe.pe[i, j, 2 * d]


def test_mask_is_strictly_above_tau():
    h = np.array([[0.0, 0.35], [0.36, 1.0]])
    np.testing.assert_array_equal(mask_from_heatmap(h, 0.35).mask, [[0, 0], [1, 1]])
    assert mask_from_heatmap(h, 0.0).hot_fraction == 0.75


@pytest.mark.parametrize("tau", [-0.1, 1.0])
def test_mask_rejects_tau_outside_range(tau):
    with pytest.raises(DomainError):
        mask_from_heatmap(np.zeros((2, 2)), tau)


def test_masked_pe_zeroes_cold_cells_and_keeps_hot_cells(rng):
    h = rng.uniform((6, 7))
    pe = sinusoidal_pe(6, 7, 8)
    mask = mask_from_heatmap(h, 0.5)
    gated = masked_pe(pe, mask)
    hot = np.asarray(mask.mask) > 0
    assert np.all(gated.pe[~hot] == 0.0)
    assert gated.pe[hot].tobytes() == pe.pe[hot].tobytes()


def test_masks_are_nested_as_tau_grows(rng):
    h = rng.uniform((8, 8))
    taus = np.linspace(0.0, 0.95, 20)
    masks = [np.asarray(mask_from_heatmap(h, t).mask) > 0 for t in taus]
    for looser, stricter in zip(masks, masks[1:]):
        assert np.all(looser | ~stricter)


def test_masked_pe_rejects_mismatched_mask():
    with pytest.raises(ShapeError):
        masked_pe(sinusoidal_pe(3, 3, 4), mask_from_heatmap(np.zeros((2, 3))))


def test_pos_encoding_requires_even_depth():
    with pytest.raises(ShapeError):
        PosEncoding(pe=np.zeros((2, 2, 3), dtype=np.float32))


def test_classify_regions_row_major():
    h = np.array([[0.9, 0.1], [0.2, 0.8]])
    split = classify_regions(h, 0.5)
    assert split.hot == [(0, 0), (1, 1)]
    assert split.cold == [(0, 1), (1, 0)]


@pytest.mark.parametrize("scale, shift", [(0.5, 0.0), (3.0, -2.0), (1e3, 7.0)])
def test_mask_survives_positive_affine_rescaling(rng, scale, shift):
    raw = np.asarray(rng.uniform((8, 8)), dtype=np.float64)
    for tau in (0.0, 0.2, 0.35, 0.6, 0.9):
        base = mask_from_heatmap(normalize_heatmap(raw), tau)
        moved = mask_from_heatmap(normalize_heatmap(scale * raw + shift), tau)
        np.testing.assert_array_equal(base.mask, moved.mask)
