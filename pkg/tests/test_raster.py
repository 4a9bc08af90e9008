import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from ftdba.errors import AnchorOutOfBounds, DimensionMismatch, SideTooSmall
from ftdba.fractal import TriggerGeometry, generate_attractor, koch_ifs
from ftdba.raster import (
    BlendMask,
    EmbedConfig,
    TriggerPatch,
    default_anchor,
    embed,
    project_linf,
    rasterize,
    read_image,
    read_tensors,
    resize_bilinear,
    to_netpbm,
    trigger_side,
    write_image,
    write_tensors,
)

KOCH4 = generate_attractor(koch_ifs(), 4)


def seg_dist(p, a, b):
    # pure-python point-to-segment distance
    ab = (b[0] - a[0], b[1] - a[1])
    ap = (p[0] - a[0], p[1] - a[1])
    den = ab[0] ** 2 + ab[1] ** 2
    u = 0.0 if den == 0 else max(0.0, min(1.0, (ap[0] * ab[0] + ap[1] * ab[1]) / den))
    return math.hypot(ap[0] - u * ab[0], ap[1] - u * ab[1])


def test_koch_curve_mask_count_matches_oracle():
    side = 32
    patch = rasterize(KOCH4, side)
    segs = [((1 - a[1]) * (side - 1), a[0] * (side - 1), (1 - b[1]) * (side - 1), b[0] * (side - 1))
            for a, b in KOCH4.segments()]
    lit = 0
    for r in range(side):
        for c in range(side):
            d = min(seg_dist((r, c), (s[0], s[1]), (s[2], s[3])) for s in segs)
            lit += d <= 0.5
    assert patch.curve_mask.sum() == lit == 88
    assert 64 <= lit <= 512


def test_horizontal_segment_lights_bottom_row():
    g = TriggerGeometry(np.array([[0.0, 0.0], [1.0, 0.0]]), 1)
    p = rasterize(g, 16)
    assert p.curve_mask[-1].all()
    assert not p.curve_mask[:-1].any()
    assert np.all(p.data[-1] == 1.0)


def test_empty_geometry():
    p = rasterize(TriggerGeometry(np.zeros((0, 2)), 1), 16)
    assert p.data.shape == (16, 16) and not p.data.any()


def test_side_too_small():
    with pytest.raises(SideTooSmall):
        rasterize(KOCH4, 3)
    with pytest.raises(SideTooSmall):
        resize_bilinear(rasterize(KOCH4, 8), 2)


def test_rasterize_is_deterministic():
    assert np.array_equal(rasterize(KOCH4, 24).data, rasterize(KOCH4, 24).data)


def test_resize_identity_and_constant():
    p = rasterize(KOCH4, 32)
    assert resize_bilinear(p, 32) is p
    c = TriggerPatch(np.full((8, 8), 0.5), np.zeros((8, 8), bool))
    for n in (4, 13, 29):
        np.testing.assert_allclose(resize_bilinear(c, n).data, 0.5, atol=1e-15)


def test_resize_roundtrip_error():
    p = rasterize(KOCH4, 32)
    q = resize_bilinear(resize_bilinear(p, 16), 32)
    mae = np.abs(q.data - p.data).mean()
    assert mae < 0.15
    assert mae == pytest.approx(0.0352633, abs=1e-6)


def test_resize_matches_scipy_zoom():
    from scipy.ndimage import map_coordinates

    p = rasterize(KOCH4, 16)
    pos = np.linspace(0, 15, 11)
    rr, cc = np.meshgrid(pos, pos, indexing="ij")
    oracle = map_coordinates(p.data, [rr, cc], order=1)
    np.testing.assert_allclose(resize_bilinear(p, 11).data, oracle, atol=1e-12)


def test_alpha_zero_is_identity():
    x = np.random.default_rng(0).random((32, 32))
    p = rasterize(KOCH4, 4)
    for mode in ("rect", "curve"):
        out = embed(x, p, BlendMask(0.0, default_anchor(32, 32, 4), mode))
        assert np.array_equal(out, x)


def test_rect_mode_black_image():
    x = np.zeros((16, 16))
    p = TriggerPatch(np.ones((4, 4)), np.ones((4, 4), bool))
    out = embed(x, p, BlendMask(0.3, (2, 3, 4), "rect"))
    assert np.allclose(out[2:6, 3:7], 0.3)
    out[2:6, 3:7] = 0
    assert not out.any()


def test_curve_mode_uniform_gray():
    side = 8
    p = rasterize(KOCH4, side)
    x = np.full((32, 32), 0.5)
    anchor = default_anchor(32, 32, side)
    out = embed(x, p, BlendMask(0.3, anchor, "curve"))
    r, c, s = anchor
    region = out[r:r + s, c:c + s]
    np.testing.assert_allclose(region[p.curve_mask], 0.65, atol=1e-15)
    np.testing.assert_allclose(region[~p.curve_mask], 0.5, atol=0)
    outside = out.copy()
    outside[r:r + s, c:c + s] = 0.5
    assert np.all(outside == 0.5)


def test_channel_replication():
    p = rasterize(KOCH4, 4)
    x = np.full((16, 16, 3), 0.2)
    out = embed(x, p, BlendMask(0.5, (1, 1, 4), "rect"))
    assert np.array_equal(out[..., 0], out[..., 2])


def test_anchor_out_of_bounds():
    p = rasterize(KOCH4, 4)
    with pytest.raises(AnchorOutOfBounds):
        embed(np.zeros((16, 16)), p, BlendMask(0.3, (14, 0, 4)))
    with pytest.raises(AnchorOutOfBounds):
        embed(np.zeros((16, 16)), p, BlendMask(0.3, (-1, 0, 4)))


def test_project_linf_examples():
    x = np.random.default_rng(1).random((8, 8))
    assert np.array_equal(project_linf(x, x, 0.05), x)
    np.testing.assert_allclose(project_linf(np.full((8, 8), 0.5), np.full((8, 8), 0.9), 0.05), 0.55)
    with pytest.raises(DimensionMismatch):
        project_linf(x, x[:4], 0.05)


def test_project_linf_saturates_exactly():
    rng = np.random.default_rng(2)
    a, b = rng.random((16, 16)), rng.random((16, 16))
    out = project_linf(a, b, 0.05)
    big = np.abs(b - a) > 0.05
    # brute-force: every pixel that was further away now sits on the ball's surface
    np.testing.assert_allclose(np.abs(out - a)[big], 0.05, atol=1e-15)
    np.testing.assert_array_equal(out[~big], b[~big])


def test_trigger_side_and_anchor():
    assert trigger_side(32) == 4
    assert trigger_side(224) == 27
    assert default_anchor(32, 32, 4) == (27, 27, 4)
    with pytest.raises(ValueError):
        EmbedConfig(side_frac=0.2)


def test_constrained_apply_bound():
    cfg = EmbedConfig(alpha=0.5, strength="constrained")
    x = np.random.default_rng(3).random((10, 32, 32))
    patch = cfg.render(KOCH4, trigger_side(32))
    out = cfg.apply(x, patch)
    assert np.abs(out - x).max() <= 0.05 + 1e-15
    visible = EmbedConfig(alpha=0.5, strength="visible").apply(x, patch)
    assert np.abs(visible - x).max() > 0.05


def test_image_file_roundtrip(tmp_path):
    x = np.random.default_rng(4).random((9, 12)).astype(np.float32)
    write_image(tmp_path / "a.img", x)
    raw = (tmp_path / "a.img").read_bytes()
    assert len(raw) == 16 + 4 * x.size
    assert raw[:4] == b"FTIM"
    assert np.array_equal(read_image(tmp_path / "a.img"), x)
    ts = [np.arange(6.0).reshape(2, 3), np.ones(4)]
    write_tensors(tmp_path / "t.bin", ts)
    back = read_tensors(tmp_path / "t.bin")
    assert np.array_equal(back[0], ts[0]) and np.array_equal(back[1].ravel(), ts[1])


def test_netpbm_header():
    pgm = to_netpbm(np.zeros((2, 3)))
    assert pgm.startswith(b"P5\n3 2\n255\n") and len(pgm) == len(b"P5\n3 2\n255\n") + 6
    assert to_netpbm(np.ones((2, 2, 3))).startswith(b"P6\n")


images = arrays(np.float64, (16, 16), elements=st.floats(0, 1))


@settings(max_examples=40, deadline=None)
@given(images, images, st.floats(0.001, 0.5))
def test_projection_idempotent_and_bounded(a, b, eps):
    once = project_linf(a, b, eps)
    assert np.abs(once - a).max() <= eps + 1e-12
    assert np.array_equal(project_linf(a, once, eps), once)


@settings(max_examples=40, deadline=None)
@given(images, st.floats(0, 1), st.sampled_from(["rect", "curve"]))
def test_embed_changes_only_allowed_pixels(x, alpha, mode):
    p = rasterize(KOCH4, 6)
    anchor = (3, 5, 6)
    out = embed(x, p, BlendMask(alpha, anchor, mode))
    changed = out != x
    allowed = np.zeros_like(changed)
    allowed[3:9, 5:11] = p.curve_mask if mode == "curve" else True
    assert not (changed & ~allowed).any()
    assert out.min() >= 0 and out.max() <= 1
