import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gncaf.synthdata import SynthSpec, generate_slide
from gncaf.tiling import (
    SlideImage,
    TileGrid,
    compute_foreground_mask,
    hsv_saturation,
    read_label_mask,
    stitch_masks,
    tile_mask,
    tile_slide,
    write_label_mask,
)


def _slide(h, w, rgb=(255, 255, 255)):
    px = np.empty((h, w, 3), dtype=np.uint8)
    px[:] = rgb
    return SlideImage(px)


def _loop_foreground(pixels, p, thr, frac):
    """Per-pixel loop oracle for the fixed-threshold foreground rule."""
    h, w, _ = pixels.shape
    rows, cols = -(-h // p), -(-w // p)
    out = np.zeros((rows, cols), dtype=bool)
    for r in range(rows):
        for c in range(cols):
            tissue = total = 0
            for y in range(r * p, min((r + 1) * p, h)):
                for x in range(c * p, min((c + 1) * p, w)):
                    rgb = [int(v) for v in pixels[y, x]]
                    hi, lo = max(rgb), min(rgb)
                    s = 0.0 if hi == 0 else (hi - lo) / hi
                    tissue += s > thr
                    total += 1
            out[r, c] = tissue / total >= frac
    return out


def test_white_slide_all_background():
    for mode in ("otsu", "fixed"):
        fg = compute_foreground_mask(_slide(128, 128), 64, mode, 0.25)
        assert fg.shape == (2, 2) and not fg.any()


def test_red_slide_all_foreground():
    for mode in ("otsu", "fixed"):
        assert compute_foreground_mask(_slide(128, 128, (255, 0, 0)), 64, mode, 0.5).all()


def test_one_red_tile_matches_loop_oracle():
    px = np.full((16, 16, 3), 255, dtype=np.uint8)
    px[8:, :8] = (200, 10, 10)
    fg = compute_foreground_mask(SlideImage(px), 8, "fixed", 0.25, fixed_threshold=0.1)
    np.testing.assert_array_equal(fg, [[False, False], [True, False]])
    np.testing.assert_array_equal(fg, _loop_foreground(px, 8, 0.1, 0.25))


@settings(max_examples=25, deadline=None)
@given(st.integers(5, 20), st.integers(5, 20), st.integers(0, 2**31 - 1), st.floats(0.0, 1.0))
def test_fixed_threshold_matches_loop_oracle(h, w, seed, frac):
    px = np.random.default_rng(seed).integers(0, 256, size=(h, w, 3), dtype=np.uint8)
    fg = compute_foreground_mask(SlideImage(px), 4, "fixed", frac, fixed_threshold=0.3)
    np.testing.assert_array_equal(fg, _loop_foreground(px, 4, 0.3, frac))


def test_saturation_formula():
    px = np.array([[[255, 0, 0], [0, 0, 0], [100, 50, 50], [7, 7, 7]]], dtype=np.uint8)
    np.testing.assert_allclose(hsv_saturation(px), [[1.0, 0.0, 0.5, 0.0]])


def test_empty_slide_errors():
    with pytest.raises(ValueError, match="no pixels"):
        compute_foreground_mask(SlideImage(np.zeros((0, 5, 3), np.uint8)), 4)


def test_bad_arguments():
    with pytest.raises(ValueError):
        compute_foreground_mask(_slide(8, 8), 0)
    with pytest.raises(ValueError):
        compute_foreground_mask(_slide(8, 8), 4, min_tissue_fraction=1.5)
    with pytest.raises(ValueError):
        SlideImage(np.zeros((4, 4, 3), np.uint8), microns_per_pixel=0)


def test_tile_enumeration_row_major():
    grid, patches = tile_slide(_slide(512, 512), np.ones((2, 2), bool), 256)
    assert (grid.rows, grid.cols, grid.n_nodes) == (2, 2, 4)
    assert grid.tile_index[(0, 0)] == 0 and grid.tile_index[(1, 1)] == 3
    assert patches.shape == (4, 256, 256, 3)


def test_single_foreground_cell():
    fg = np.zeros((2, 2), bool)
    fg[1, 0] = True
    grid, patches = tile_slide(_slide(512, 512), fg, 256)
    assert grid.n_nodes == 1 and grid.coords.tolist() == [[1, 0]]


def test_padding_is_white():
    px = np.zeros((300, 300, 3), dtype=np.uint8)
    grid, patches = tile_slide(SlideImage(px), np.ones((2, 2), bool), 256)
    assert (grid.rows, grid.cols) == (2, 2)
    assert (patches[3][44:, 44:] == 255).all() and (patches[3][:44, :44] == 0).all()


def test_patch_top_left_pixel():
    px = np.random.default_rng(0).integers(0, 256, (20, 28, 3), dtype=np.uint8)
    fg = np.array([[True, False, True, True], [False, True, False, True], [True, True, True, False]])
    grid, patches = tile_slide(SlideImage(px), fg, 8)
    padded = np.full((24, 32, 3), 255, np.uint8)
    padded[:20, :28] = px
    for (r, c), patch in zip(grid.coords, patches):
        np.testing.assert_array_equal(patch, padded[r * 8 : r * 8 + 8, c * 8 : c * 8 + 8])


def test_mask_dimension_mismatch():
    with pytest.raises(ValueError):
        tile_slide(_slide(512, 512), np.ones((3, 2), bool), 256)


def test_stitch_examples():
    fg = np.zeros((2, 2), bool)
    fg[1, 0] = True
    grid = TileGrid("s", 2, 2, 4, fg)
    out = stitch_masks([np.ones((4, 4), np.uint8)], grid)
    expect = np.zeros((8, 8), np.uint8)
    expect[4:, :4] = 1
    np.testing.assert_array_equal(out, expect)

    grid = TileGrid("s", 1, 2, 4, np.ones((1, 2), bool))
    out = stitch_masks([np.full((4, 4), 2, np.uint8), np.full((4, 4), 3, np.uint8)], grid)
    assert (out[:, :4] == 2).all() and (out[:, 4:] == 3).all()


def test_stitch_count_mismatch():
    grid = TileGrid("s", 1, 2, 4, np.ones((1, 2), bool))
    with pytest.raises(ValueError):
        stitch_masks([np.zeros((4, 4), np.uint8)], grid)


def test_synthetic_round_trip():
    slide, labels, _ = generate_slide(SynthSpec(rows=8, cols=8, n_structures=2, n_holes=1, seed=3))
    fg = compute_foreground_mask(slide, 64)
    grid, _ = tile_slide(slide, fg, 64)
    np.testing.assert_array_equal(stitch_masks(tile_mask(labels, grid), grid), labels)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 40), st.integers(1, 40), st.integers(1, 9), st.integers(0, 2**31 - 1))
def test_round_trip_property(h, w, p, seed):
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, 4, (h, w)).astype(np.uint8)
    rows, cols = -(-h // p), -(-w // p)
    fg = rng.random((rows, cols)) < 0.6
    grid = TileGrid("s", rows, cols, p, fg, h, w)
    out = stitch_masks(tile_mask(labels, grid), grid)
    # background tiles come back as 0, foreground tiles verbatim
    expect = labels.copy()
    for r in range(rows):
        for c in range(cols):
            if not fg[r, c]:
                expect[r * p : (r + 1) * p, c * p : (c + 1) * p] = 0
    np.testing.assert_array_equal(out, expect)


def test_tiling_is_deterministic():
    slide, _, _ = generate_slide(SynthSpec(rows=6, cols=6, n_structures=1, n_holes=1, seed=1))
    a = tile_slide(slide, compute_foreground_mask(slide, 64), 64)[0]
    b = tile_slide(slide, compute_foreground_mask(slide, 64), 64)[0]
    assert a.tile_index == b.tile_index


def test_padding_does_not_change_edge_decisions():
    # 10 px of saturated content in a 16 px edge tile: fraction over unpadded pixels is 1
    px = np.full((10, 10, 3), (255, 0, 0), dtype=np.uint8)
    assert compute_foreground_mask(SlideImage(px), 16, "fixed", 0.9).all()


def test_grid_json_round_trip(tmp_path):
    fg = np.random.default_rng(1).random((3, 5)) < 0.5
    grid = TileGrid("abc", 3, 5, 16, fg, 40, 70)
    grid.save(tmp_path / "g.json")
    back = TileGrid.load(tmp_path / "g.json")
    assert back.tile_index == grid.tile_index
    assert (back.height_px, back.width_px) == (40, 70)
    doc = grid.to_json()
    assert set(doc) >= {"slide_id", "rows", "cols", "patch_size_px", "foreground", "coords"}


def test_label_mask_io(tmp_path):
    labels = np.random.default_rng(0).integers(0, 4, (13, 9)).astype(np.uint8)
    write_label_mask(tmp_path / "m.lbl", labels)
    np.testing.assert_array_equal(read_label_mask(tmp_path / "m.lbl"), labels)
