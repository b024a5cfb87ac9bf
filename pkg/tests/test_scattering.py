import itertools

import numpy as np
import pytest

from dunet.scattering import (ScatteringConfig, ScatteringError, build_filter_bank, count_paths,
                              dumps_sct, load_sct, loads_sct, path_descriptors, save_sct,
                              scatter_batch, scattering_transform)


def natural_image(rng, n: int, beta: float = 2.0) -> np.ndarray:
    """1/f^(beta/2) amplitude-spectrum noise rescaled to [0, 1], like image intensities."""
    f = np.fft.fftfreq(n)
    fx, fy = np.meshgrid(f, f, indexing="ij")
    r = np.hypot(fx, fy)
    r[0, 0] = 1.0
    spec = (rng.standard_normal((n, n)) + 1j * rng.standard_normal((n, n))) / r ** (beta / 2)
    spec[0, 0] = 0.0
    im = np.fft.ifft2(spec).real
    return (im - im.min()) / (im.max() - im.min())


def enumerate_paths(J, L, order):
    """Independent enumeration: all (j1, l1, j2, l2) tuples filtered to j1 < j2."""
    n = 1
    if order >= 1:
        n += len(list(itertools.product(range(J), range(L))))
    if order >= 2:
        n += sum(1 for j1, l1, j2, l2 in itertools.product(range(J), range(L), range(J), range(L))
                 if j1 < j2)
    return n


class TestCountPaths:
    @pytest.mark.parametrize("J,expected", [(1, 9), (2, 81), (3, 217)])
    def test_examples(self, J, expected):
        assert count_paths(ScatteringConfig(J=J, L=8, order=2)) == expected

    @pytest.mark.parametrize("J,L,order", [(J, L, o) for J in (1, 2, 3, 4) for L in (1, 4, 8)
                                           for o in (0, 1, 2)])
    def test_matches_enumeration(self, J, L, order):
        cfg = ScatteringConfig(J=J, L=L, order=order, input_size=(64, 64))
        assert count_paths(cfg) == enumerate_paths(J, L, order) == len(path_descriptors(cfg))

    def test_order0(self):
        assert count_paths(ScatteringConfig(order=0)) == 1


class TestFilterBank:
    def test_counts_j1_l1(self):
        fb = build_filter_bank(ScatteringConfig(J=1, L=1, input_size=(16, 16)))
        assert len(fb.psi) == 1 and len(fb.psi[0]) == 1
        assert fb.phi.shape == (16, 16)

    @pytest.mark.parametrize("J,L,n", [(1, 1, 16), (2, 4, 32), (3, 8, 64), (4, 6, 64)])
    def test_zero_mean(self, J, L, n):
        fb = build_filter_bank(ScatteringConfig(J=J, L=L, input_size=(n, n)))
        assert max(abs(p[0, 0]) for row in fb.psi for p in row) <= 1e-6

    def test_littlewood_paley_256(self):
        fb = build_filter_bank(ScatteringConfig(J=3, L=8, input_size=(256, 256)))
        lp = fb.littlewood_paley()
        assert lp.shape == (256, 256)
        assert lp.max() <= 1.2
        assert fb.littlewood_paley_bound <= 0.2
        # low-pass alone reaches 1 at DC
        assert fb.phi[0, 0] == 1.0

    def test_littlewood_paley_direct_sum(self):
        # recompute the sum with an explicit frequency-negation index map
        fb = build_filter_bank(ScatteringConfig(J=2, L=4, input_size=(32, 32)))
        neg = (-np.arange(32)) % 32
        total = fb.phi ** 2
        for row in fb.psi:
            for p in row:
                total = total + 0.5 * (p ** 2 + p[np.ix_(neg, neg)] ** 2)
        np.testing.assert_allclose(total, fb.littlewood_paley(), rtol=1e-12)

    def test_too_many_scales(self):
        with pytest.raises(ScatteringError):
            build_filter_bank(ScatteringConfig(J=5, input_size=(16, 16)))

    def test_non_power_of_two(self):
        with pytest.raises(ScatteringError):
            ScatteringConfig(input_size=(48, 64)).validate()


class TestTransform:
    def test_constant(self):
        cfg = ScatteringConfig(J=3, L=8, input_size=(64, 64))
        out = scattering_transform(np.full((64, 64), 3.5), build_filter_bank(cfg))
        c = out.coeffs[0]
        np.testing.assert_allclose(c[0], 3.5, rtol=1e-6)
        assert np.abs(c[1:]).max() <= 1e-5 * 3.5

    def test_output_shape_256(self):
        cfg = ScatteringConfig(J=3, L=8, input_size=(256, 256))
        x = np.random.default_rng(0).random((256, 256))
        out = scattering_transform(x, build_filter_bank(cfg))
        assert out.coeffs.shape == (1, 217, 32, 32)
        assert out.coeffs.dtype == np.float32
        assert len(out.paths) == 217

    def test_nonnegative_higher_orders(self):
        cfg = ScatteringConfig(J=2, L=4, input_size=(32, 32))
        x = np.random.default_rng(1).standard_normal((32, 32))
        c = scattering_transform(x, build_filter_bank(cfg)).coeffs[0]
        # low-passing a nonnegative field with a positive-mass Gaussian; allow fp noise
        assert c[1:].min() >= -1e-6 * np.abs(c[1:]).max()

    def test_path_order(self):
        paths = path_descriptors(ScatteringConfig(J=2, L=2))
        assert paths[0] == (0, -1, -1, -1, -1)
        assert paths[1:5] == [(1, 0, 0, -1, -1), (1, 0, 1, -1, -1), (1, 1, 0, -1, -1), (1, 1, 1, -1, -1)]
        assert paths[5:] == [(2, 0, 0, 1, 0), (2, 0, 0, 1, 1), (2, 0, 1, 1, 0), (2, 0, 1, 1, 1)]

    def test_size_mismatch(self):
        fb = build_filter_bank(ScatteringConfig(J=2, L=4, input_size=(32, 32)))
        with pytest.raises(ScatteringError):
            scattering_transform(np.zeros((16, 16)), fb)

    def test_deterministic(self):
        cfg = ScatteringConfig(J=2, L=4, input_size=(32, 32))
        fb = build_filter_bank(cfg)
        x = np.random.default_rng(2).random((32, 32))
        assert scattering_transform(x, fb).coeffs.tobytes() == scattering_transform(x, fb).coeffs.tobytes()

    def test_shift_invariance_j3(self):
        cfg = ScatteringConfig(J=3, L=8, input_size=(256, 256))
        fb = build_filter_bank(cfg)
        rng = np.random.default_rng(0)
        for _ in range(3):
            x = natural_image(rng, 256)
            s = scattering_transform(x, fb).coeffs
            t = scattering_transform(np.roll(x, 4, axis=1), fb).coeffs
            assert np.linalg.norm(s - t) / np.linalg.norm(s) <= 0.05

    def test_non_expansive(self):
        cfg = ScatteringConfig(J=3, L=8, input_size=(32, 32))
        fb = build_filter_bank(cfg)
        rng = np.random.default_rng(5)
        for _ in range(5):
            x, y = rng.standard_normal((2, 32, 32))
            ds = np.linalg.norm(scattering_transform(x, fb).coeffs - scattering_transform(y, fb).coeffs)
            assert ds <= 1.05 * np.linalg.norm(x - y)


class TestBatch:
    def test_batch_equals_singles(self):
        cfg = ScatteringConfig(J=2, L=4, input_size=(32, 32))
        fb = build_filter_bank(cfg)
        x = np.random.default_rng(3).random((2, 1, 32, 32))
        batch = scatter_batch(x, fb)
        for i in range(2):
            assert batch[i:i + 1].tobytes() == scattering_transform(x[i], fb).coeffs.tobytes()

    def test_rgb_channel_count(self):
        cfg = ScatteringConfig(J=3, L=8, input_size=(32, 32))
        x = np.random.default_rng(4).random((1, 3, 32, 32))
        out = scatter_batch(x, build_filter_bank(cfg))
        assert out.shape == (1, 651, 4, 4)

    def test_rgb_layout_is_channel_major(self):
        cfg = ScatteringConfig(J=2, L=2, input_size=(16, 16))
        fb = build_filter_bank(cfg)
        x = np.random.default_rng(6).random((1, 3, 16, 16))
        out = scatter_batch(x, fb)
        P = count_paths(cfg)
        np.testing.assert_array_equal(out[0, P:2 * P], scattering_transform(x[0, 1], fb).coeffs[0])

    def test_order0_single_path(self):
        cfg = ScatteringConfig(J=2, L=4, order=0, input_size=(16, 16))
        out = scatter_batch(np.ones((2, 1, 16, 16)), build_filter_bank(cfg))
        assert out.shape == (2, 1, 4, 4)


class TestSct1:
    def test_round_trip(self, tmp_path):
        cfg = ScatteringConfig(J=2, L=2, input_size=(16, 16))
        out = scattering_transform(np.random.default_rng(0).random((2, 16, 16)), build_filter_bank(cfg))
        path = save_sct(tmp_path / "x.sct", out)
        coeffs, paths = load_sct(path)
        assert coeffs.tobytes() == out.coeffs.tobytes()
        assert paths == out.paths * 2
        assert path.read_bytes()[:4] == b"SCT1"

    def test_layout(self):
        coeffs = np.arange(2 * 3 * 1 * 1, dtype=np.float32).reshape(2, 3, 1, 1)
        paths = [(0, -1, -1, -1, -1), (1, 0, 0, -1, -1), (2, 0, 0, 1, 0)]
        data = dumps_sct(coeffs, paths)
        assert int.from_bytes(data[4:8], "little") == 4
        header = 8 + 16 + 3 * 5 * 4
        assert len(data) == header + 6 * 4
        assert np.frombuffer(data[24:84], dtype="<i4").reshape(3, 5).tolist() == [list(p) for p in paths]

    def test_truncated(self):
        data = dumps_sct(np.zeros((1, 1, 2, 2), np.float32), [(0, -1, -1, -1, -1)])
        with pytest.raises(ScatteringError):
            loads_sct(data[:-4])
