import numpy as np
import pytest
from scipy.ndimage import gaussian_filter

from crackflow.dic import (CrackEdgeMap, DisplacementField, SubsetConfig,
                           compute_displacement_field, displacement_gradient,
                           downsample_label_map, field_from_text, field_to_text,
                           label_crack_edges, match_subset, shape_function_map,
                           temporal_consistency_correct)
from crackflow.errors import DataError

CFG = SubsetConfig()


def speckle(rng, h, w):
    img = gaussian_filter(rng.random((h, w)), 1.5)
    lo, hi = img.min(), img.max()
    return np.round((img - lo) / (hi - lo) * 255).astype(np.uint8)


def shifted_pair(rng, h, w, u, v):
    """Reference plus a deformed view where features move by (u, v) pixels."""
    pad = 16
    big = speckle(rng, h + 2 * pad, w + 2 * pad)
    ref = big[pad : pad + h, pad : pad + w]
    de = big[pad - v : pad - v + h, pad - u : pad - u + w]
    return ref, de


def make_field(u, valid=None, spacing=11, origin=19):
    u = np.asarray(u, dtype=np.float32)
    ny, nx = u.shape
    if valid is None:
        valid = np.ones(u.shape, dtype=bool)
    return DisplacementField(
        xs=origin + spacing * np.arange(nx), ys=origin + spacing * np.arange(ny),
        u=u, v=np.zeros_like(u), quality=np.ones_like(u),
        valid=np.asarray(valid), spacing=spacing)


def test_subset_config_validation():
    for kwargs in ({"subset_size": 4}, {"subset_size": 1}, {"spacing": 0},
                   {"search_radius": 0}):
        with pytest.raises(ValueError):
            SubsetConfig(**kwargs)
    assert CFG.margin == 11 + 8


def test_shape_function_map():
    assert shape_function_map((5, 5), (0, 0), u=2, v=3) == (7, 8)
    x1, _ = shape_function_map((10, 0), (0, 0), u=0, v=0, ux=0.1)
    assert x1 == pytest.approx(11.0)
    # at the subset center the gradients drop out entirely
    assert shape_function_map((4, 7), (4, 7), u=1.5, v=-2.0,
                              ux=9, uy=9, vx=9, vy=9) == (5.5, 5.0)
    _, y1 = shape_function_map((3, 8), (3, 2), u=0, v=0, vy=0.5)
    assert y1 == pytest.approx(8 + 0.5 * 6)


def test_match_identical_images():
    rng = np.random.default_rng(0)
    ref = speckle(rng, 80, 80)
    u, v, q = match_subset(ref, ref, (40, 40), CFG)
    assert (u, v) == (0.0, 0.0)
    assert q == pytest.approx(1.0, abs=1e-9)


def test_match_integer_translation():
    rng = np.random.default_rng(1)
    ref, de = shifted_pair(rng, 80, 80, 3, 0)
    u, v, q = match_subset(ref, de, (40, 40), SubsetConfig(subpixel=False))
    assert (u, v) == (3.0, 0.0)
    assert q == pytest.approx(1.0, abs=1e-9)


def test_match_subpixel_half_shift():
    rng = np.random.default_rng(2)
    ref = speckle(rng, 80, 80)
    de = ref.astype(np.float64).copy()
    de[:, 1:] = 0.5 * (ref[:, 1:].astype(np.float64) + ref[:, :-1])
    u, v, _ = match_subset(ref, de, (40, 40), CFG)
    assert abs(u - 0.5) < 0.2
    assert abs(v) < 0.2


def test_match_flat_subset_invalid():
    rng = np.random.default_rng(3)
    ref = speckle(rng, 80, 80)
    flat = ref.copy()
    flat[20:61, 20:61] = 77
    assert match_subset(flat, ref, (40, 40), CFG) is None


def test_match_border_rejected():
    rng = np.random.default_rng(4)
    ref = speckle(rng, 80, 80)
    with pytest.raises(DataError):
        match_subset(ref, ref, (5, 40), CFG)


def test_field_rigid_translation_exact():
    rng = np.random.default_rng(5)
    ref, de = shifted_pair(rng, 120, 120, 3, 2)
    fld = compute_displacement_field(ref, de, SubsetConfig(subpixel=False))
    assert fld.valid.all()
    assert np.all(fld.u == 3.0)
    assert np.all(fld.v == 2.0)


def test_field_identity_is_zero():
    rng = np.random.default_rng(6)
    ref = speckle(rng, 100, 100)
    fld = compute_displacement_field(ref, ref, CFG)
    assert fld.valid.all()
    assert np.all(fld.u == 0.0) and np.all(fld.v == 0.0)
    assert np.all(fld.quality > 0.999)


def test_field_grid_geometry():
    rng = np.random.default_rng(7)
    ref = speckle(rng, 120, 131)
    fld = compute_displacement_field(ref, ref, CFG)
    m = CFG.margin
    assert fld.xs[0] == m and fld.ys[0] == m
    assert fld.xs[-1] < 131 - m and fld.ys[-1] < 120 - m
    assert np.all(np.diff(fld.xs) == CFG.spacing)
    assert fld.u.shape == (len(fld.ys), len(fld.xs))


def test_field_too_small_rejected():
    rng = np.random.default_rng(8)
    with pytest.raises(DataError):
        compute_displacement_field(speckle(rng, 30, 30), speckle(rng, 30, 30), CFG)
    with pytest.raises(DataError):
        compute_displacement_field(speckle(rng, 64, 64), speckle(rng, 64, 65), CFG)


def test_subpixel_keeps_integer_exactness():
    # parabola refinement must not perturb an exact integer match
    rng = np.random.default_rng(9)
    ref, de = shifted_pair(rng, 100, 100, 2, 1)
    fld = compute_displacement_field(ref, de, CFG)
    assert np.all(np.abs(fld.u - 2.0) < 0.05)
    assert np.all(np.abs(fld.v - 1.0) < 0.05)


def test_gradient_constant_and_step():
    assert np.all(displacement_gradient(make_field(np.zeros((3, 5))))[0] == 0)
    step = make_field([[0, 0, 2, 2]] * 2)
    ux, ok = displacement_gradient(step)
    assert ok.all()
    assert np.array_equal(ux, [[0, 2, 0], [0, 2, 0]])


def test_gradient_linear_field():
    spacing = 11
    fld = make_field(0.05 * (19 + spacing * np.arange(6))[None, :].repeat(3, axis=0))
    ux, _ = displacement_gradient(fld)
    assert np.allclose(ux, 0.05 * spacing, atol=1e-6)


def test_gradient_masks_invalid_neighbors():
    valid = np.ones((2, 4), dtype=bool)
    valid[0, 1] = False
    ux, ok = displacement_gradient(make_field(np.ones((2, 4)), valid=valid))
    assert not ok[0, 0] and not ok[0, 1] and ok[0, 2]
    assert ux[0, 0] == 0 and ux[0, 1] == 0
    with pytest.raises(DataError):
        displacement_gradient(make_field(np.zeros((2, 1))))


def test_label_empty_and_gated():
    fld = make_field(np.zeros((3, 4)))
    assert label_crack_edges(fld, (100, 100)).data.sum() == 0
    below = make_field([[0, 0.4, 0.4, 0.4]] * 2)
    assert label_crack_edges(below, (100, 100), threshold=0.5).data.sum() == 0
    with pytest.raises(ValueError):
        label_crack_edges(fld, (100, 100), threshold=0)


def test_label_spike_marks_two_points_per_row():
    fld = make_field([[0, 0, 2, 2]] * 3)  # jump between columns 1 and 2
    edge = label_crack_edges(fld, (100, 100), threshold=0.5)
    assert edge.data.sum() == 6
    for i, y0 in enumerate(fld.ys):
        row = np.nonzero(edge.data[y0])[0]
        # left node stays put, right node is shifted by its own u = 2
        assert list(row) == [fld.xs[1], fld.xs[2] + 2]


def test_label_straddles_discontinuity():
    fld = make_field([[0, 0, 3, 3, 3]] * 2)
    x_c = (fld.xs[1] + fld.xs[2]) / 2  # true opening sits inside the gap
    edge = label_crack_edges(fld, (100, 120), threshold=0.5)
    for y0 in fld.ys:
        cols = np.nonzero(edge.data[y0])[0]
        left, right = cols.min(), cols.max() - 3  # undo the right node shift
        assert left < x_c < right + 3
        assert right - left <= fld.spacing


def test_label_constant_offset_translates_map():
    base = make_field([[0, 0, 2, 2]] * 2)
    shifted = make_field(np.asarray([[0, 0, 2, 2]] * 2) + 5.0)
    a = label_crack_edges(base, (100, 100))
    b = label_crack_edges(shifted, (100, 100))
    assert a.data.sum() == b.data.sum()
    assert np.array_equal(np.roll(a.data, 5, axis=1), b.data)


def test_label_ignores_invalid_gaps():
    valid = np.ones((2, 4), dtype=bool)
    valid[0, 2] = False
    fld = make_field([[0, 0, 9, 9]] * 2, valid=valid)
    edge = label_crack_edges(fld, (100, 100))
    assert edge.data[fld.ys[0]].sum() == 0  # invalid row contributes nothing
    assert edge.data[fld.ys[1]].sum() == 2


def seq(*frames):
    return [np.array(f, dtype=np.uint8).reshape(1, 1) for f in frames]


def flat(maps):
    return [int(m[0, 0]) for m in maps]


def test_temporal_clears_one_frame_blip():
    x = seq(0, 0, 0, 1, 0, 0, 0, 0, 0, 0)
    assert flat(temporal_consistency_correct(x, n=3)) == [0] * 10


def test_temporal_fills_one_frame_gap():
    x = seq(0, 0, 1, 1, 1, 0, 1, 1, 1, 0)
    got = flat(temporal_consistency_correct(x, n=2))
    assert got == [0, 0, 1, 1, 1, 1, 1, 1, 1, 0]


def test_temporal_monotone_growth_fixed_point():
    x = seq(0, 0, 1, 1, 1, 1, 1)
    assert flat(temporal_consistency_correct(x, n=3)) == flat(x)


def test_temporal_keeps_tail_labels():
    # too close to the sequence end for a full next-n window: keep
    x = seq(0, 0, 0, 0, 0, 0, 0, 0, 1, 0)
    assert flat(temporal_consistency_correct(x, n=3)) == flat(x)


def test_temporal_clears_cascade():
    # clearing the later blip exposes the earlier one
    x = seq(0, 1, 0, 1, 0, 0, 0, 0)
    assert flat(temporal_consistency_correct(x, n=3)) == [0] * 8


def test_temporal_idempotent_randomized():
    rng = np.random.default_rng(10)
    for _ in range(200):
        t = int(rng.integers(1, 13))
        n = int(rng.integers(1, 4))
        maps = [rng.integers(0, 2, (2, 3), dtype=np.uint8) for _ in range(t)]
        once = temporal_consistency_correct(maps, n=n)
        twice = temporal_consistency_correct(once, n=n)
        assert all(np.array_equal(a, b) for a, b in zip(once, twice))


def test_temporal_preserves_map_type():
    maps = [CrackEdgeMap(np.zeros((2, 2), dtype=np.uint8), mm_per_px=0.025)
            for _ in range(4)]
    out = temporal_consistency_correct(maps, n=2)
    assert isinstance(out[0], CrackEdgeMap)
    assert out[0].mm_per_px == 0.025
    with pytest.raises(ValueError):
        temporal_consistency_correct(maps, n=0)


def test_downsample_empty_and_single():
    empty = downsample_label_map(np.zeros((1024, 1024), dtype=np.uint8))
    assert empty.data.shape == (128, 128) and empty.data.sum() == 0
    one = np.zeros((1024, 1024), dtype=np.uint8)
    one[517, 260] = 1
    pooled = downsample_label_map(one)
    assert pooled.data.sum() == 1
    assert pooled.data[517 // 8, 260 // 8] == 1


def test_downsample_crops_to_block_multiple():
    src = np.ones((520, 512), dtype=np.uint8)
    out = downsample_label_map(CrackEdgeMap(src, mm_per_px=0.025), target=128)
    assert out.data.shape == (128, 128)
    assert out.data.all()
    assert out.mm_per_px == pytest.approx(0.025 * 4)
    with pytest.raises(DataError):
        downsample_label_map(np.zeros((100, 100), dtype=np.uint8), target=128)


def test_edge_map_validation():
    with pytest.raises(ValueError):
        CrackEdgeMap(np.full((4, 4), 2, dtype=np.uint8))
    with pytest.raises(ValueError):
        CrackEdgeMap(np.zeros((4, 4, 1), dtype=np.uint8))
    m = CrackEdgeMap(np.eye(3, dtype=np.uint8))
    assert np.asarray(m).dtype == np.uint8


def test_field_text_round_trip():
    rng = np.random.default_rng(11)
    ref, de = shifted_pair(rng, 100, 100, 1, 0)
    fld = compute_displacement_field(ref, de, CFG)
    fld.valid[0, 0] = False
    fld.u[0, 0] = 0.0
    back = field_from_text(field_to_text(fld))
    assert np.array_equal(back.xs, fld.xs) and np.array_equal(back.ys, fld.ys)
    assert back.u.tobytes() == fld.u.tobytes()
    assert back.v.tobytes() == fld.v.tobytes()
    assert back.quality.tobytes() == fld.quality.tobytes()
    assert np.array_equal(back.valid, fld.valid)
    assert back.spacing == fld.spacing


def test_field_text_rejects_garbage():
    with pytest.raises(DataError):
        field_from_text("# spacing=11\n1 2 3\n")
    with pytest.raises(DataError):
        field_from_text("")
