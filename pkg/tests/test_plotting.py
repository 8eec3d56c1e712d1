import numpy as np
import pytest

from hmpe.utils.errors import DomainError, FormatError, ShapeError
from hmpe.utils.plotting import (
    HEATBAR_WIDTH,
    RasterImage,
    colormap,
    colormap_array,
    encode_ppm,
    heatbar,
    overlay,
    ramp_position,
    read_image,
    render_heatmap,
    write_ppm,
)


@pytest.mark.parametrize(
    "v, rgb",
    [
        (0.0, (0, 0, 255)),
        (0.25, (0, 255, 255)),
        (0.5, (0, 255, 0)),
        (0.75, (255, 255, 0)),
        (1.0, (255, 0, 0)),
        (0.125, (0, 128, 255)),
        (-0.5, (0, 0, 255)),
        (1.5, (255, 0, 0)),
    ],
)
def test_colormap_knots_and_clamping(v, rgb):
    assert colormap(v) == rgb


def test_colormap_is_continuous_at_knots():
    eps = 1e-9
    for knot in (0.25, 0.5, 0.75):
        left = np.asarray(colormap(knot - eps))
        right = np.asarray(colormap(knot + eps))
        assert np.max(np.abs(left - right)) <= 1


def test_ramp_position_is_monotone():
    positions = ramp_position(np.linspace(0.0, 1.0, 101))
    assert np.all(np.diff(positions) > 0)
    assert positions[0] == 0.0 and positions[-1] == pytest.approx(4.0)


def test_render_dims_and_colours():
    h = np.zeros((16, 16))
    h[:, 8:] = 1.0
    image = render_heatmap(h, scale=6, upsample="nearest")
    assert image.dims == (96 + HEATBAR_WIDTH, 96)
    assert tuple(image.pixels[0, 0]) == (0, 0, 255)
    assert tuple(image.pixels[95, 95]) == (255, 0, 0)
    assert render_heatmap(h, scale=6, with_heatbar=False).dims == (96, 96)


def test_render_of_rectangular_map():
    image = render_heatmap(np.zeros((4, 6)), scale=3)
    assert image.dims == (18 + HEATBAR_WIDTH, 12)
    assert render_heatmap(np.zeros((16, 16)), scale=6).dims == (112, 96)


def test_heatbar_runs_from_red_to_blue():
    bar = heatbar(96)
    assert bar.shape == (96, HEATBAR_WIDTH, 3)
    assert tuple(bar[0, 0]) == (255, 0, 0)
    assert tuple(bar[-1, -1]) == (0, 0, 255)
    assert np.all(bar == bar[:, :1])


def test_render_clamps_out_of_range_values():
    clamped = render_heatmap(np.array([[-1.0, 2.0]]), scale=1, upsample="nearest", with_heatbar=False)
    assert tuple(clamped.pixels[0, 0]) == (0, 0, 255)
    assert tuple(clamped.pixels[0, 1]) == (255, 0, 0)


def test_render_rejects_bad_arguments():
    with pytest.raises(DomainError):
        render_heatmap(np.zeros((2, 2)), scale=0)
    with pytest.raises(DomainError):
        render_heatmap(np.zeros((2, 2)), upsample="cubic")
    with pytest.raises(ShapeError):
        render_heatmap(np.zeros(4))


def test_overlay_blend():
    base = RasterImage(np.full((2, 2, 3), 100, dtype=np.uint8))
    heat = RasterImage(np.full((2, 2, 3), 200, dtype=np.uint8))
    assert np.all(overlay(base, heat, 0.0).pixels == 100)
    assert np.all(overlay(base, heat, 1.0).pixels == 200)
    assert np.all(overlay(base, heat, 0.5).pixels == 150)
    odd = RasterImage(np.full((2, 2, 3), 101, dtype=np.uint8))
    assert np.all(overlay(odd, heat, 0.5).pixels == 151)


def test_overlay_rejects_mismatched_images():
    base = RasterImage(np.zeros((2, 2, 3), dtype=np.uint8))
    with pytest.raises(ShapeError):
        overlay(base, RasterImage(np.zeros((2, 3, 3), dtype=np.uint8)))
    with pytest.raises(DomainError):
        overlay(base, base, 1.5)


def test_ppm_bytes():
    image = RasterImage(np.arange(18, dtype=np.uint8).reshape(2, 3, 3))
    blob = encode_ppm(image)
    assert blob.startswith(b"P6\n3 2\n255\n")
    assert blob[len(b"P6\n3 2\n255\n"):] == bytes(range(18))


def test_written_ppm_reads_back(tmp_path):
    image = render_heatmap(np.linspace(0, 1, 12).reshape(3, 4), scale=2)
    path = write_ppm(tmp_path / "heat.ppm", image)
    np.testing.assert_array_equal(read_image(path).pixels, image.pixels)


def test_render_is_byte_deterministic(tmp_path, rng):
    h = rng.uniform((5, 5))
    first = write_ppm(tmp_path / "a.ppm", render_heatmap(h)).read_bytes()
    second = write_ppm(tmp_path / "b.ppm", render_heatmap(h)).read_bytes()
    assert first == second


def test_read_image_rejects_garbage(tmp_path):
    path = tmp_path / "broken.ppm"
    path.write_bytes(b"not an image")
    with pytest.raises(FormatError):
        read_image(path)


def test_raster_from_tensor_rounds_half_up():
    image = RasterImage.from_tensor(np.full((3, 1, 2), 0.5))
    assert np.all(image.pixels == 128)
    assert np.all(colormap_array(np.zeros((2, 2))) == colormap_array(0.0))
