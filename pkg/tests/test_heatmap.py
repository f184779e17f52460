import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from facestutter.heatmap import colorize, read_ppm, render, save_heatmap


def test_zero_map_is_neutral_except_separator():
    img = render(np.zeros((17, 87)), cell=4)
    sep = 8 * 4
    assert np.all(img[sep] == 0)
    rest = np.delete(img, sep, axis=0)
    assert np.all(rest == 255)


@pytest.mark.parametrize("cell", [1, 3, 8])
def test_dimensions(cell):
    assert render(np.zeros((17, 87)), cell).shape == (17 * cell, 87 * cell, 3)


def test_colour_scale_is_symmetric():
    rgb = colorize(np.array([-2.0, 0.0, 2.0, 1.0]))
    assert rgb[1].tolist() == [255, 255, 255]
    assert rgb[2].tolist() == [178, 24, 43]       # red at +max
    assert rgb[0].tolist() == [33, 102, 172]      # blue at -max
    assert rgb[3, 0] > rgb[3, 2]                  # positive is warm


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31), st.floats(0.1, 1e6))
def test_scale_invariance(seed, k):
    v = np.random.default_rng(seed).normal(size=(17, 87))
    assert np.array_equal(colorize(v), colorize(v * k))


def test_rejects_bad_inputs():
    with pytest.raises(ValueError):
        render(np.zeros((16, 87)))
    with pytest.raises(ValueError):
        render(np.zeros((17, 87)), cell=0)


def test_ppm_round_trip(tmp_path):
    v = np.random.default_rng(0).normal(size=(17, 87))
    v[0, 0] = 0.0  # white pixel bytes right after the header
    save_heatmap(tmp_path / "m.ppm", v, cell=2)
    img = read_ppm(tmp_path / "m.ppm")
    assert np.array_equal(img, render(v, 2))
    assert (tmp_path / "m.ppm").read_bytes().startswith(b"P6\n174 34\n255\n")
