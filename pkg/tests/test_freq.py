import numpy as np
import pytest
from hypothesis import given, strategies as st

from ists.backend import Latent
from ists.errors import ArgumentError
from ists.freq import (
    FreqMask,
    Offset,
    centred_spectrum,
    extract,
    inject,
    make_ring_pattern,
    mask_union,
    offset_pattern,
    ring_mask,
)


def disc_oracle(radius, h, w):
    """Brute-force (row, col) list of pixels whose integer ring index is below ``radius``."""
    out = []
    for i in range(h):
        for j in range(w):
            d = ((i - h // 2) ** 2 + (j - w // 2) ** 2) ** 0.5
            if int(d) <= radius - 1:
                out.append((i, j))
    return out


def spectrum(z, ch=0):
    """Centred DFT computed directly with np.fft on the shifted axes."""
    return np.fft.fftshift(np.fft.fft2(z[ch]))


class TestRingPattern:
    def test_small_rings(self):
        W = make_ring_pattern(1, radius=3, plane_shape=(16, 16))
        assert len(np.unique(W.values)) == 3
        ring2 = [(i, j) for i in range(16) for j in range(16) if 2 <= np.hypot(i - 8, j - 8) < 3]
        vals = {W.plane[i, j] for i, j in ring2}
        assert len(vals) == 1

    def test_deterministic(self):
        a = make_ring_pattern(99, 20)
        b = make_ring_pattern(99, 20)
        assert np.array_equal(a.plane, b.plane)
        assert not np.array_equal(a.plane, make_ring_pattern(100, 20).plane)

    def test_support_count_radius_20(self):
        W = make_ring_pattern(5, 20, (64, 64))
        pix = disc_oracle(20, 64, 64)
        assert W.support.sum() == len(pix)
        assert all(W.support[i, j] for i, j in pix)
        assert ring_mask(20, (64, 64)).size == len(pix)

    def test_values_only_on_support(self):
        W = make_ring_pattern(5, 20, (64, 64))
        assert not W.plane[~W.support].any()
        assert np.all(W.values != 0)

    @pytest.mark.parametrize("radius", [0, 32, 40])
    def test_radius_bounds(self, radius):
        with pytest.raises(ArgumentError):
            make_ring_pattern(1, radius, (64, 64))

    def test_conjugate_symmetric_values_are_real(self):
        W = make_ring_pattern(3, 10, (32, 32), conjugate_symmetric=True)
        assert not W.values.imag.any()

    def test_values_roughly_standard_complex_normal(self):
        vals = np.concatenate([np.unique(make_ring_pattern(s, 30, (64, 64)).values) for s in range(200)])
        assert abs(np.mean(np.abs(vals) ** 2) - 1.0) < 0.06


class TestOffset:
    def test_zero_offset_identity(self):
        W = make_ring_pattern(2, 20)
        W_o, M_o = offset_pattern(W, W.mask, Offset(0, 0))
        assert np.array_equal(W_o.plane, W.plane)
        assert M_o == W.mask

    def test_round_trip(self):
        W = make_ring_pattern(2, 20)
        W1, M1 = offset_pattern(W, W.mask, Offset(1, 0))
        W2, M2 = offset_pattern(W1, M1, Offset(-1, 0))
        assert M2 == W.mask
        assert np.array_equal(W2.plane, W.plane)

    def test_index_relation(self):
        W = make_ring_pattern(4, 20)
        l = Offset(7, -9)
        W_o, _ = offset_pattern(W, W.mask, l)
        for i in range(64):
            for j in range(64):
                si, sj = i + l.lx, j + l.ly
                want = W.plane[si, sj] if 0 <= si < 64 and 0 <= sj < 64 else 0
                assert W_o.plane[i, j] == want

    def test_centroid_moves_opposite_to_offset(self):
        M = ring_mask(20, (64, 64))
        _, M_o = offset_pattern(make_ring_pattern(1, 20), M, Offset(5, -3))
        c0 = np.argwhere(M.support).mean(axis=0)
        c1 = np.argwhere(M_o.support).mean(axis=0)
        np.testing.assert_allclose(c1 - c0, [-5, 3], atol=1e-12)

    @pytest.mark.parametrize("l", [Offset(14, 0), Offset(0, -13), Offset(20, 20)])
    def test_out_of_plane(self, l):
        W = make_ring_pattern(1, 20)
        with pytest.raises(ArgumentError):
            offset_pattern(W, W.mask, l)

    def test_extremes_fit(self):
        W = make_ring_pattern(1, 20)
        for lx in (-12, 12):
            for ly in (-12, 12):
                _, M_o = offset_pattern(W, W.mask, Offset(lx, ly))
                assert M_o.size == W.mask.size


class TestInjectExtract:
    def test_empty_mask_noop(self, rng):
        z = Latent(rng.standard_normal((4, 64, 64)), 12)
        W = make_ring_pattern(1, 20)
        M = FreqMask(np.zeros((64, 64), bool))
        out = inject(z, W, M, keep_complex=False)
        np.testing.assert_allclose(out.data, z.data, atol=1e-6)
        assert out.timestep == 12

    @given(seed=st.integers(0, 2**32), lx=st.integers(-12, 12), ly=st.integers(-12, 12))
    def test_extract_inverts_inject(self, seed, lx, ly):
        r = np.random.default_rng(seed)
        z = Latent(r.standard_normal((4, 64, 64)), 0)
        W_o, M_o = offset_pattern(make_ring_pattern(seed, 20), make_ring_pattern(seed, 20).mask, Offset(lx, ly))
        out = inject(z, W_o, M_o)
        np.testing.assert_allclose(extract(out, M_o), W_o.values, atol=1e-6)
        # locality
        before, after = spectrum(z.data), spectrum(out.data)
        np.testing.assert_allclose(after[~M_o.support], before[~M_o.support], atol=1e-6)
        np.testing.assert_allclose(out.data[1:], z.data[1:], atol=0)

    def test_idempotent(self, rng):
        z = Latent(rng.standard_normal((4, 64, 64)), 0)
        W = make_ring_pattern(3, 20)
        once = inject(z, W, W.mask, keep_complex=False)
        twice = inject(once, W, W.mask, keep_complex=False)
        np.testing.assert_allclose(twice.data, once.data, atol=1e-6)

    def test_real_part_halves_asymmetric_pattern(self, rng):
        # Re(ifft(S)) has spectrum (S(k) + conj S(-k)) / 2
        z = Latent(np.zeros((4, 64, 64)), 0)
        W = make_ring_pattern(3, 20)
        out = inject(z, W, W.mask, keep_complex=False)
        assert np.isrealobj(out.data)
        S = W.plane
        flipped = np.conj(np.roll(np.flip(S, axis=(0, 1)), (1, 1), axis=(0, 1)))
        np.testing.assert_allclose(spectrum(out.data), (S + flipped) / 2, atol=1e-9)

    def test_extract_zero_latent(self):
        M = ring_mask(20, (64, 64))
        assert not extract(Latent(np.zeros((4, 64, 64)), 0), M).any()

    def test_extract_order_and_rayleigh(self):
        r = np.random.default_rng(0)
        M = ring_mask(20, (64, 64), channel=2)
        mags = []
        for _ in range(8):
            z = r.standard_normal((4, 64, 64))
            s = extract(Latent(z, 0), M)
            np.testing.assert_allclose(s, spectrum(z, 2)[M.support], atol=1e-9)
            off_dc = M.support.copy()
            off_dc[32, 32] = False
            mags.append(np.abs(spectrum(z, 2)[off_dc]))
        mc = np.abs(np.sqrt(64 * 64 / 2) * (r.standard_normal(10_000) + 1j * r.standard_normal(10_000)))
        assert np.mean(np.concatenate(mags)) == pytest.approx(mc.mean(), rel=0.03)

    def test_shape_mismatch(self):
        M = ring_mask(5, (16, 16))
        with pytest.raises(ArgumentError):
            extract(Latent(np.zeros((4, 32, 32)), 0), M)
        with pytest.raises(ArgumentError):
            inject(Latent(np.zeros((4, 32, 32)), 0), make_ring_pattern(1, 5, (16, 16)), M)

    def test_bad_channel(self):
        with pytest.raises(ArgumentError):
            extract(Latent(np.zeros((4, 16, 16)), 0), ring_mask(5, (16, 16), channel=4))


def test_centred_spectrum_dc_at_centre(rng):
    x = rng.standard_normal((16, 16))
    assert centred_spectrum(x)[8, 8] == pytest.approx(x.sum())


def test_mask_union():
    W = make_ring_pattern(1, 5, (32, 32))
    _, a = offset_pattern(W, W.mask, Offset(3, 0))
    u = mask_union([W.mask, a])
    assert u.sum() == (W.mask.support | a.support).sum()
