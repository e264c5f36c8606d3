import numpy as np
import pytest
import torch

from tracemorph.deform import DeformationField
from tracemorph.grid import (
    BadMagicError,
    BadVersionError,
    Image2D,
    TruncatedPayloadError,
    VectorField2D,
    bilinear_sample,
    read_grid,
    read_pgm,
    sample_values,
    spatial_gradient,
    warp,
    write_grid,
    write_pgm,
)


def rand_image(h, w, seed=0):
    rng = np.random.default_rng(seed)
    return Image2D.from_array(rng.uniform(0, 1, size=(h, w)).astype(np.float32))


def const_shift_field(h, w, dx, dy):
    u = torch.zeros(2, h, w)
    u[0] = dx
    u[1] = dy
    return DeformationField(VectorField2D(u))


# ---------------------------------------------------------------------------
# bilinear sampling
# ---------------------------------------------------------------------------

def test_sample_exact_at_grid_nodes():
    img = rand_image(5, 7, seed=1)
    for py in range(5):
        for px in range(7):
            assert bilinear_sample(img, (px, py)) == pytest.approx(
                float(img.data[py, px]), abs=1e-7
            )


def test_sample_exact_on_linear_ramp():
    w = 8
    ramp = Image2D.from_array(np.tile(np.arange(w) / w, (4, 1)).astype(np.float32))
    assert bilinear_sample(ramp, (1.5, 2.0)) == pytest.approx(1.5 / w, abs=1e-7)


def test_sample_matches_four_neighbor_oracle():
    img = rand_image(4, 4, seed=2)
    px, py = 0.25, 0.75
    a = img.numpy()
    # hand-expanded 4-term weighted sum
    expected = (
        a[0, 0] * (1 - 0.25) * (1 - 0.75)
        + a[0, 1] * 0.25 * (1 - 0.75)
        + a[1, 0] * (1 - 0.25) * 0.75
        + a[1, 1] * 0.25 * 0.75
    )
    assert bilinear_sample(img, (px, py)) == pytest.approx(float(expected), abs=1e-6)


def test_sample_out_of_bounds_clamps_to_border():
    img = rand_image(4, 6, seed=3)
    assert bilinear_sample(img, (-3.5, 1.0)) == pytest.approx(float(img.data[1, 0]), abs=1e-7)
    assert bilinear_sample(img, (5.9, 99.0)) == pytest.approx(
        bilinear_sample(img, (5.9, 3.0)), abs=1e-7
    )


def test_sample_reproduces_affine_intensity_exactly():
    h, w = 9, 11
    ys, xs = np.mgrid[0:h, 0:w]
    img = Image2D.from_array((0.3 + 0.02 * xs + 0.05 * ys).astype(np.float64), dtype=torch.float64)
    rng = np.random.default_rng(4)
    for _ in range(50):
        px = rng.uniform(0, w - 1)
        py = rng.uniform(0, h - 1)
        assert bilinear_sample(img, (px, py)) == pytest.approx(0.3 + 0.02 * px + 0.05 * py, abs=1e-12)


# ---------------------------------------------------------------------------
# warping
# ---------------------------------------------------------------------------

def test_warp_identity_is_exact():
    img = rand_image(16, 16, seed=5)
    out = warp(img, DeformationField.identity(16, 16))
    assert torch.equal(out.data, img.data)


def test_warp_integer_shift_matches_shift_oracle():
    img = rand_image(8, 8, seed=6)
    out = warp(img, const_shift_field(8, 8, 1.0, 0.0))
    a = img.numpy()
    expected = np.empty_like(a)
    expected[:, :-1] = a[:, 1:]
    expected[:, -1] = a[:, -1]  # border replication fills the trailing column
    np.testing.assert_allclose(out.numpy(), expected, atol=1e-6)


def test_warp_half_pixel_shift_on_ramp():
    w = 8
    ramp = Image2D.from_array(np.tile(np.arange(w, dtype=np.float32), (6, 1)))
    out = warp(ramp, const_shift_field(6, w, 0.5, 0.0))
    np.testing.assert_allclose(out.numpy()[:, :-1], ramp.numpy()[:, :-1] + 0.5, atol=1e-6)


def test_warp_dimension_mismatch_raises():
    img = rand_image(8, 8)
    with pytest.raises(ValueError):
        warp(img, DeformationField.identity(9, 8))


def test_warp_is_linear_in_the_image():
    rng = np.random.default_rng(7)
    a = rand_image(12, 12, seed=8)
    b = rand_image(12, 12, seed=9)
    u = torch.tensor(rng.uniform(-2, 2, size=(2, 12, 12)), dtype=torch.float32)
    phi = DeformationField(VectorField2D(u))
    lhs = warp(Image2D(0.3 * a.data + 0.6 * b.data), phi).numpy()
    rhs = 0.3 * warp(a, phi).numpy() + 0.6 * warp(b, phi).numpy()
    np.testing.assert_allclose(lhs, rhs, atol=1e-6)


# ---------------------------------------------------------------------------
# spatial gradient
# ---------------------------------------------------------------------------

def test_gradient_constant_is_zero():
    g = spatial_gradient(Image2D.from_array(np.full((5, 5), 0.7, dtype=np.float32)))
    assert float(g.u.abs().max()) == 0.0


def test_gradient_of_x_ramp():
    ys, xs = np.mgrid[0:6, 0:5]
    g = spatial_gradient(Image2D.from_array(xs.astype(np.float32)))
    np.testing.assert_allclose(g.numpy()[0][:, :-1], 1.0, atol=1e-7)
    np.testing.assert_allclose(g.numpy()[0][:, -1], 0.0, atol=1e-7)
    np.testing.assert_allclose(g.numpy()[1], 0.0, atol=1e-7)


def test_gradient_matches_subtraction_oracle():
    img = rand_image(3, 3, seed=10)
    g = spatial_gradient(img).numpy()
    a = img.numpy()
    for y in range(3):
        for x in range(3):
            gx = a[y, x + 1] - a[y, x] if x < 2 else 0.0
            gy = a[y + 1, x] - a[y, x] if y < 2 else 0.0
            assert g[0, y, x] == pytest.approx(gx, abs=1e-7)
            assert g[1, y, x] == pytest.approx(gy, abs=1e-7)


def test_gradient_rejects_degenerate_dims():
    with pytest.raises(ValueError):
        spatial_gradient(Image2D.from_array(np.zeros((1, 5), dtype=np.float32)))


# ---------------------------------------------------------------------------
# type invariants
# ---------------------------------------------------------------------------

def test_image_rejects_non_finite():
    with pytest.raises(ValueError):
        Image2D.from_array(np.array([[0.0, np.nan]], dtype=np.float32))


def test_vector_field_rejects_wrong_channel_count():
    with pytest.raises(ValueError):
        VectorField2D(torch.zeros(3, 4, 4))


def test_sample_values_batched_coords_shape():
    img = rand_image(6, 6, seed=11)
    coords = torch.rand(2, 3, 4) * 5
    out = sample_values(img.data.unsqueeze(0), coords)
    assert out.shape == (1, 3, 4)


# ---------------------------------------------------------------------------
# PLSG grid files
# ---------------------------------------------------------------------------

def test_grid_round_trip_is_bit_exact(tmp_path):
    img = rand_image(13, 7, seed=12)
    p = tmp_path / "a.plsg"
    write_grid(p, img)
    back = read_grid(p)
    assert isinstance(back, Image2D)
    assert back.numpy().tobytes() == img.numpy().astype("<f4").tobytes()

    u = VectorField2D.from_array(np.random.default_rng(13).normal(size=(2, 5, 9)).astype(np.float32))
    p2 = tmp_path / "b.plsg"
    write_grid(p2, u)
    back2 = read_grid(p2)
    assert isinstance(back2, VectorField2D)
    assert back2.numpy().tobytes() == u.numpy().astype("<f4").tobytes()


def test_grid_payload_size(tmp_path):
    u = VectorField2D.zeros(64, 64)
    p = tmp_path / "c.plsg"
    write_grid(p, u)
    assert p.stat().st_size == 20 + 2 * 64 * 64 * 4


def test_grid_bad_magic(tmp_path):
    p = tmp_path / "bad.plsg"
    p.write_bytes(b"XXXX" + b"\x00" * 32)
    with pytest.raises(BadMagicError):
        read_grid(p)


def test_grid_bad_version(tmp_path):
    img = Image2D.zeros(2, 2)
    p = tmp_path / "v.plsg"
    write_grid(p, img)
    raw = bytearray(p.read_bytes())
    raw[4] = 9
    p.write_bytes(bytes(raw))
    with pytest.raises(BadVersionError):
        read_grid(p)


def test_grid_truncated_payload(tmp_path):
    img = rand_image(4, 4)
    p = tmp_path / "t.plsg"
    write_grid(p, img)
    p.write_bytes(p.read_bytes()[:-5])
    with pytest.raises(TruncatedPayloadError):
        read_grid(p)


# ---------------------------------------------------------------------------
# PGM interchange
# ---------------------------------------------------------------------------

def test_pgm_round_trip_quantized(tmp_path):
    img = rand_image(9, 5, seed=14)
    p = tmp_path / "img.pgm"
    write_pgm(p, img)
    back = read_pgm(p)
    assert back.height == 9 and back.width == 5
    np.testing.assert_allclose(back.numpy(), img.numpy(), atol=0.5 / 255 + 1e-6)


def test_pgm_binary_mask_lossless(tmp_path):
    mask = Image2D.from_array(np.random.default_rng(15).integers(0, 2, size=(8, 8)).astype(np.float32))
    p = tmp_path / "m.pgm"
    write_pgm(p, mask)
    np.testing.assert_array_equal(read_pgm(p).numpy(), mask.numpy())


def test_pgm_header_with_comment(tmp_path):
    p = tmp_path / "c.pgm"
    p.write_bytes(b"P5\n# a comment\n2 2\n255\n" + bytes([0, 128, 255, 64]))
    img = read_pgm(p)
    assert img.numpy()[0, 1] == pytest.approx(128 / 255)
