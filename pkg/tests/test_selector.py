import itertools
import zipfile

import numpy as np
import pytest
from hypothesis import given, strategies as st

from ists.errors import ArgumentError, ConfigError, KeyFileError
from ists.freq import Offset
from ists.selector import (
    BlockMeanEncoder,
    InjectionParams,
    MappingConfig,
    SelectorModel,
    TwoLayerNet,
    key_fingerprint,
    key_permutation,
    kmeans,
    load_selector,
    map_params,
    save_selector,
    train_selector,
)


def mapping_oracle(y, T1=10, T2=20, x1=-12, x2=12, y1=-12, y2=12):
    # plain integer arithmetic, written independently of the library
    t = T1 + y - (T2 - T1) * (y // (T2 - T1))
    lx = x1 + y - (x2 - x1) * (y // (x2 - x1))
    q = y // (y2 - y1)
    ly = y1 + q - (y2 - y1) * (q // (y2 - y1))
    return t, lx, ly


def best_two_partition(X):
    """Exhaustive minimum-SSE split of a small point set into two non-empty groups."""
    n = len(X)
    best, best_lab = np.inf, None
    for bits in itertools.product([0, 1], repeat=n - 1):
        lab = np.array((0,) + bits)
        if lab.sum() == 0:
            continue
        sse = sum(((X[lab == g] - X[lab == g].mean(0)) ** 2).sum() for g in (0, 1))
        if sse < best:
            best, best_lab = sse, lab
    return best_lab


def same_partition(a, b):
    return np.array_equal(a, b) or np.array_equal(a, 1 - b)


def blobs(rng, k, per, d=8, spread=0.05):
    centres = rng.standard_normal((k, d)) * 3
    X = np.concatenate([c + spread * rng.standard_normal((per, d)) for c in centres])
    y = np.repeat(np.arange(k), per)
    return X, y


class TestMapping:
    def test_exhaustive_against_oracle(self):
        cfg = MappingConfig()
        for y in range(1024):
            assert map_params(y, cfg).as_tuple() == mapping_oracle(y)

    def test_worked_values(self):
        assert map_params(0, MappingConfig()).as_tuple() == (10, -12, -12)
        assert map_params(1023, MappingConfig()).as_tuple() == (13, 3, 6)

    def test_out_of_range(self):
        with pytest.raises(ArgumentError):
            map_params(1034, MappingConfig())
        with pytest.raises(ArgumentError):
            map_params(-1, MappingConfig())

    def test_degenerate_timestep_width(self):
        cfg = MappingConfig(T1=14, T2=15)
        assert {map_params(y, cfg).t for y in range(1024)} == {14}

    def test_fixed_offset(self):
        cfg = MappingConfig(lx1=3, lx2=3, ly1=-2, ly2=-2)
        assert {map_params(y, cfg).l for y in range(1024)} == {Offset(3, -2)}

    def test_row_major_variant(self):
        cfg = MappingConfig(lx1=-2, lx2=2, ly1=-3, ly2=3, ly_divisor="lx")
        for y in range(1024):
            p = map_params(y, cfg)
            assert p.l.ly == -3 + (y // 4) % 6

    @given(y=st.integers(0, 1023), t1=st.integers(1, 30), tw=st.integers(1, 15),
           xw=st.integers(1, 24), yw=st.integers(1, 24))
    def test_image_within_half_open_ranges(self, y, t1, tw, xw, yw):
        cfg = MappingConfig(T1=t1, T2=t1 + tw, lx1=-xw // 2, lx2=-xw // 2 + xw, ly1=-yw // 2, ly2=-yw // 2 + yw)
        p = map_params(y, cfg)
        assert cfg.T1 <= p.t < cfg.T2
        assert cfg.lx1 <= p.l.lx < cfg.lx2
        assert cfg.ly1 <= p.l.ly < cfg.ly2

    def test_config_validation(self):
        with pytest.raises(ConfigError):
            MappingConfig(T1=20, T2=20)
        with pytest.raises(ConfigError):
            MappingConfig(C=0)
        with pytest.raises(ConfigError):
            MappingConfig(T2=60).validate_for(50)
        with pytest.raises(ConfigError):
            MappingConfig(lx1=-14, lx2=12).validate_for(50, (64, 64), 20)
        MappingConfig().validate_for(50, (64, 64), 20)


class TestEncoder:
    def test_constant_image(self):
        f = BlockMeanEncoder().encode(np.full((128, 128, 3), 0.3))
        assert f.shape == (768,)
        np.testing.assert_allclose(f, 1 / np.sqrt(768))

    def test_black_image_is_finite(self):
        f = BlockMeanEncoder().encode(np.zeros((64, 64, 3)))
        assert np.all(np.isfinite(f)) and np.linalg.norm(f) == pytest.approx(1.0)

    @given(seed=st.integers(0, 10_000))
    def test_unit_norm(self, seed):
        x = np.random.default_rng(seed).random((64, 64, 3))
        assert np.linalg.norm(BlockMeanEncoder().encode(x)) == pytest.approx(1.0, abs=1e-12)

    def test_block_means_oracle(self, rng):
        x = rng.random((16, 16, 3))
        f = BlockMeanEncoder(8).encode(x)
        raw = [x[8 * a : 8 * a + 8, 8 * b : 8 * b + 8, c].mean() for a in range(2) for b in range(2) for c in range(3)]
        np.testing.assert_allclose(f, np.array(raw) / np.linalg.norm(raw))

    def test_indivisible(self):
        with pytest.raises(ArgumentError):
            BlockMeanEncoder(8).encode(np.zeros((12, 16, 3)))


class TestKMeans:
    @pytest.mark.parametrize("seed", range(5))
    def test_two_means_matches_exhaustive_partition(self, seed):
        r = np.random.default_rng(seed)
        X = np.concatenate([r.normal(0, 1, (6, 2)), r.normal(8, 1, (6, 2))])
        res = kmeans(X, 2, seed=seed)
        assert same_partition(res.labels, best_two_partition(X))

    def test_single_cluster(self, rng):
        X = rng.standard_normal((20, 5))
        res = kmeans(X, 1)
        assert not res.labels.any()
        np.testing.assert_allclose(res.centroids[0], X.mean(0))

    def test_objective_never_increases(self, rng):
        X = rng.standard_normal((200, 6))
        hist = kmeans(X, 12, seed=3).inertia_history
        assert all(b <= a * (1 + 1e-9) for a, b in zip(hist, hist[1:]))

    def test_too_few_samples(self, rng):
        with pytest.raises(ArgumentError):
            kmeans(rng.standard_normal((3, 2)), 4)

    def test_deterministic(self, rng):
        X = rng.standard_normal((50, 3))
        a, b = kmeans(X, 5, seed=9), kmeans(X, 5, seed=9)
        assert np.array_equal(a.centroids, b.centroids)


class TestNetwork:
    def test_gradients_match_finite_differences(self, rng):
        net = TwoLayerNet(5, 3, seed=1)
        X = rng.standard_normal((7, 5))
        y = rng.integers(0, 3, 7)
        mask = (rng.random((7, 5)) >= 0.5) * 2.0
        _, grads = net.loss_and_grads(X, y, drop_mask=mask)
        h = 1e-6
        for name in ("W1", "b1", "gamma", "beta", "W2", "b2"):
            P = getattr(net, name)
            num = np.zeros_like(P)
            for idx in np.ndindex(P.shape):
                old = P[idx]
                P[idx] = old + h
                lp, _ = net.loss_and_grads(X, y, drop_mask=mask)
                P[idx] = old - h
                lm, _ = net.loss_and_grads(X, y, drop_mask=mask)
                P[idx] = old
                num[idx] = (lp - lm) / (2 * h)
            np.testing.assert_allclose(grads[name], num, atol=1e-6, err_msg=name)

    def test_fits_separable_clusters(self, rng):
        X, y = blobs(rng, 16, 12, d=16)
        X /= np.linalg.norm(X, axis=1, keepdims=True)
        net = TwoLayerNet(16, 16, seed=0)
        losses = net.fit(X, y, epochs=200, lr=1e-2)
        assert losses[-1] < 0.5 * losses[0]
        assert np.mean(net.predict(X) == y) >= 0.9
        net.fit(X, y, epochs=2000, lr=5e-2)
        assert np.mean(net.predict(X) == y) >= 0.99


class TestSelectorModel:
    def _model(self, cent, key=None):
        cfg = MappingConfig(C=len(cent))
        return SelectorModel(cent, cfg, key_permutation(key, cfg.C), key_fingerprint(key) if key else "identity")

    def test_at_centroid(self, rng):
        cent = rng.standard_normal((8, 4))
        m = self._model(cent)
        for k in range(8):
            assert m.assign_label(cent[k]) == k

    def test_permutation_applied(self, rng):
        cent = rng.standard_normal((8, 4))
        m = self._model(cent, key="k1")
        perm = key_permutation("k1", 8)
        for k in range(8):
            assert m.assign_label(cent[k]) == perm[k]

    def test_tie_goes_to_lowest_index(self):
        cent = np.array([[1.0, 0.0], [-1.0, 0.0], [0.0, 5.0]])
        assert self._model(cent).raw_label(np.array([0.0, 0.0])) == 0

    def test_permutation_is_bijection(self):
        for C in (1, 2, 64, 1024):
            p = key_permutation("secret", C)
            inv = np.argsort(p)
            assert np.array_equal(p[inv], np.arange(C)) and np.array_equal(inv[p], np.arange(C))

    def test_permutation_depends_on_key(self):
        assert np.array_equal(key_permutation("a", 64), key_permutation("a", 64))
        assert not np.array_equal(key_permutation("a", 64), key_permutation("b", 64))
        assert np.array_equal(key_permutation(None, 5), np.arange(5))

    def test_select_deterministic(self, rng):
        feats = np.array([BlockMeanEncoder().encode(rng.random((32, 32, 3))) for _ in range(10)])
        m = train_selector(feats, MappingConfig(C=4), "k")
        img = rng.random((32, 32, 3))
        assert m.select(img) == m.select(img)
        assert isinstance(m.select(img), InjectionParams)

    def test_too_few_features(self, rng):
        with pytest.raises(ArgumentError):
            train_selector(rng.standard_normal((10, 4)), MappingConfig(C=16), "k")

    def test_network_mode_reproduces_kmeans_labels(self, rng):
        X, _ = blobs(rng, 16, 8, d=12)
        X /= np.linalg.norm(X, axis=1, keepdims=True)
        m = train_selector(X, MappingConfig(C=16), None, mode="network", seed=0, epochs=2000, lr=5e-2)
        km = kmeans(X, 16, seed=0)
        pred = np.array([m.raw_label(x) for x in X])
        assert np.mean(pred == km.labels) >= 0.99
        assert all(0 <= p < 16 for p in pred)

    def test_bad_mode(self, rng):
        with pytest.raises(ArgumentError):
            train_selector(rng.standard_normal((10, 4)), MappingConfig(C=2), "k", mode="svm")


class TestSelectorFile:
    @pytest.fixture
    def model(self, rng):
        X, _ = blobs(rng, 8, 5, d=12)
        return train_selector(X / np.linalg.norm(X, axis=1, keepdims=True), MappingConfig(C=8), "the-key")

    def test_round_trip(self, tmp_path, model, rng):
        p = tmp_path / "s.zip"
        save_selector(p, model)
        back = load_selector(p, "the-key")
        assert np.array_equal(back.centroids, model.centroids)
        assert np.array_equal(back.permutation, model.permutation)
        for _ in range(5):
            img = rng.random((16, 16, 3))
            assert back.select(img) == model.select(img)

    def test_byte_identical_resave(self, tmp_path, model):
        save_selector(tmp_path / "a.zip", model)
        save_selector(tmp_path / "b.zip", model)
        assert (tmp_path / "a.zip").read_bytes() == (tmp_path / "b.zip").read_bytes()

    def test_key_never_stored(self, tmp_path, model):
        p = tmp_path / "s.zip"
        save_selector(p, model)
        with zipfile.ZipFile(p) as zf:
            blob = b"".join(zf.read(n) for n in zf.namelist())
            assert not any("perm" in n for n in zf.namelist())
        assert b"the-key" not in blob and b"the-key" not in p.read_bytes()

    def test_wrong_key(self, tmp_path, model):
        save_selector(tmp_path / "s.zip", model)
        with pytest.raises(KeyFileError):
            load_selector(tmp_path / "s.zip", "other-key")

    def test_not_a_selector(self, tmp_path):
        (tmp_path / "x.zip").write_bytes(b"hello")
        with pytest.raises(KeyFileError):
            load_selector(tmp_path / "x.zip", "k")

    def test_network_round_trip(self, tmp_path, rng):
        X, _ = blobs(rng, 4, 6, d=12)
        m = train_selector(X, MappingConfig(C=4), "k", mode="network", epochs=20)
        save_selector(tmp_path / "n.zip", m)
        back = load_selector(tmp_path / "n.zip", "k")
        assert back.mode == "network"
        for x in X:
            assert back.assign_label(x) == m.assign_label(x)


class TestOnToyImages:
    def test_watermark_barely_moves_features(self, ists_pairs):
        enc = BlockMeanEncoder()
        cos = [enc.encode(a) @ enc.encode(b) for a, b in zip(ists_pairs.plain, ists_pairs.watermarked)]
        assert min(cos) > 0.99

    def test_wrong_key_agrees_at_chance(self, toy_lab, ists_pairs):
        right = toy_lab.selector
        wrong = right.with_key("a-different-key")
        imgs = ists_pairs.plain
        agree = np.mean([right.select(x) == wrong.select(x) for x in imgs])
        # 64 clusters map injectively here, so chance agreement is about 1/64
        assert agree <= 0.1
