"""Shape-model tests.

The PCA implementation uses the N x N Gram-matrix trick, so the core
check compares it against an independent brute-force eigendecomposition
of the full 3V x 3V sample covariance on a problem small enough to do
that directly.
"""
import time

import numpy as np
import pytest

from cranioplan import mesh as cm
from cranioplan import shape_model as sm


def brute_force_pca(shapes):
    """Reference PCA: dense covariance, full eigendecomposition."""
    shapes = np.asarray(shapes, dtype=np.float64)
    n = len(shapes)
    mean = shapes.mean(axis=0)
    dev = shapes - mean
    cov = dev.T @ dev / (n - 1)
    w, v = np.linalg.eigh(cov)
    order = np.argsort(w)[::-1]
    return mean, w[order], v[:, order]


def random_shapes(n, n_verts, seed, scale=1.0):
    rng = np.random.default_rng(seed)
    base = rng.normal(size=3 * n_verts)
    return base + scale * rng.normal(size=(n, 3 * n_verts))


class TestAgainstBruteForce:
    def test_eigenvalues_match_dense_covariance(self):
        shapes = random_shapes(5, 12, seed=7)
        model = sm.build_shape_model(shapes)
        _, w_ref, _ = brute_force_pca(shapes)
        # 5 samples span at most 4 directions
        assert model.k == 4
        assert np.allclose(model.eigenvalues, w_ref[:4], atol=1e-8)
        # remaining dense-covariance eigenvalues are numerically zero
        assert np.all(np.abs(w_ref[4:]) < 1e-10)

    def test_modes_match_dense_covariance_up_to_sign(self):
        shapes = random_shapes(5, 12, seed=19)
        model = sm.build_shape_model(shapes)
        _, _, v_ref = brute_force_pca(shapes)
        for j in range(model.k):
            dot = float(model.modes[:, j] @ v_ref[:, j])
            assert abs(abs(dot) - 1.0) < 1e-8

    def test_explained_fractions_match(self):
        shapes = random_shapes(6, 9, seed=3)
        model = sm.build_shape_model(shapes)
        _, w_ref, _ = brute_force_pca(shapes)
        ref = w_ref[:5] / w_ref[:5].sum()
        assert np.allclose(model.explained, ref, atol=1e-10)

    def test_small_problem_is_fast(self):
        shapes = random_shapes(5, 12, seed=11)
        t0 = time.perf_counter()
        sm.build_shape_model(shapes)
        assert time.perf_counter() - t0 < 1.0


class TestModelInvariants:
    def test_modes_orthonormal(self):
        model = sm.build_shape_model(random_shapes(8, 20, seed=23))
        gram = model.modes.T @ model.modes
        assert np.allclose(gram, np.eye(model.k), atol=1e-8)

    def test_training_shapes_reconstruct(self):
        shapes = random_shapes(7, 15, seed=31)
        model = sm.build_shape_model(shapes)
        for s in shapes:
            b = sm.project(model, s)
            rec = sm.reconstruct(model, b)
            assert np.linalg.norm(rec - s) < 1e-6 * max(np.linalg.norm(s), 1.0)

    def test_training_coefficients_have_zero_mean(self):
        shapes = random_shapes(9, 10, seed=37)
        model = sm.build_shape_model(shapes)
        coeffs = np.array([sm.project(model, s) for s in shapes])
        assert np.allclose(coeffs.mean(axis=0), 0.0, atol=1e-9)

    def test_coefficient_variance_matches_eigenvalues(self):
        shapes = random_shapes(12, 14, seed=41)
        model = sm.build_shape_model(shapes)
        coeffs = np.array([sm.project(model, s) for s in shapes])
        var = coeffs.var(axis=0, ddof=1)
        assert np.allclose(var, model.eigenvalues[: model.k], rtol=1e-8)

    def test_sign_convention_is_deterministic(self):
        shapes = random_shapes(6, 11, seed=43)
        a = sm.build_shape_model(shapes)
        b = sm.build_shape_model(shapes[::-1].copy())
        assert np.allclose(a.modes, b.modes, atol=1e-8)
        for j in range(a.k):
            col = a.modes[:, j]
            assert col[np.abs(col).argmax()] > 0

    def test_row_order_does_not_change_spectrum(self):
        shapes = random_shapes(8, 13, seed=47)
        perm = np.random.default_rng(0).permutation(8)
        a = sm.build_shape_model(shapes)
        b = sm.build_shape_model(shapes[perm])
        assert np.allclose(a.eigenvalues, b.eigenvalues, atol=1e-10)


class TestEdgeCases:
    def test_two_distinct_shapes_give_one_mode(self):
        shapes = random_shapes(2, 10, seed=53)
        model = sm.build_shape_model(shapes)
        assert model.k == 1
        assert model.explained[0] == pytest.approx(1.0)

    def test_identical_shapes_give_zero_modes(self):
        one = random_shapes(1, 10, seed=59)[0]
        model = sm.build_shape_model(np.tile(one, (4, 1)))
        assert model.k == 0
        assert np.allclose(model.eigenvalues, 0.0, atol=1e-20)
        assert sm.select_modes(model, 0.94) == 0

    def test_single_shape_rejected(self):
        with pytest.raises(sm.ShapeModelError):
            sm.build_shape_model(random_shapes(1, 10, seed=61))

    def test_project_length_mismatch(self):
        model = sm.build_shape_model(random_shapes(4, 10, seed=67))
        with pytest.raises(sm.ShapeModelError):
            sm.project(model, np.zeros(31))

    def test_reconstruct_length_mismatch(self):
        model = sm.build_shape_model(random_shapes(4, 10, seed=71))
        with pytest.raises(sm.ShapeModelError):
            sm.reconstruct(model, np.zeros(model.k + 1))


class TestModeSelection:
    def build_with_spectrum(self, fractions, seed=0):
        """Model whose explained fractions approximate the given ones."""
        rng = np.random.default_rng(seed)
        n = len(fractions) + 1
        dim = 3 * 30
        basis = np.linalg.qr(rng.normal(size=(dim, n - 1)))[0]
        # coefficients with exact sample variances eigenvalues ~ fractions
        coeffs = rng.normal(size=(n, n - 1))
        coeffs -= coeffs.mean(axis=0)
        coeffs = np.linalg.qr(coeffs)[0] * np.sqrt(n - 1)
        lam = np.sort(np.asarray(fractions, dtype=float))[::-1]
        shapes = (coeffs * np.sqrt(lam)) @ basis.T
        return sm.build_shape_model(shapes)

    def test_select_is_minimal(self):
        model = self.build_with_spectrum([0.5, 0.3, 0.14, 0.05, 0.01])
        cdf = sm.explained_cdf(model)
        k = sm.select_modes(model, 0.94)
        assert k == 3  # 0.5 + 0.3 + 0.14 = 0.94 exactly
        assert cdf[k - 1] >= 0.94 - 1e-9
        assert cdf[k - 2] < 0.94

    def test_select_threshold_one_takes_all(self):
        model = sm.build_shape_model(random_shapes(5, 9, seed=73))
        assert sm.select_modes(model, 1.0) == model.k

    def test_select_tiny_threshold_takes_one(self):
        model = sm.build_shape_model(random_shapes(5, 9, seed=79))
        assert sm.select_modes(model, 1e-6) == 1

    def test_select_rejects_bad_threshold(self):
        model = sm.build_shape_model(random_shapes(3, 9, seed=83))
        for bad in (0.0, -0.5, 1.5):
            with pytest.raises(sm.ShapeModelError):
                sm.select_modes(model, bad)

    def test_truncate_keeps_spectrum(self):
        model = sm.build_shape_model(random_shapes(7, 16, seed=89))
        cut = sm.truncate_modes(model, 2)
        assert cut.k == 2
        assert cut.modes.shape == (model.modes.shape[0], 2)
        assert np.array_equal(cut.eigenvalues, model.eigenvalues)
        with pytest.raises(sm.ShapeModelError):
            sm.truncate_modes(model, model.k + 1)


class TestVectorization:
    def test_round_trip(self):
        m = cm.icosphere(radius=10.0, subdivisions=1)
        vec = sm.vectorize(m)
        assert vec.shape == (3 * m.num_vertices,)
        assert vec[3] == m.vertices[1, 0]
        back = sm.devectorize(vec, m)
        assert np.array_equal(back.vertices, m.vertices)
        assert np.array_equal(back.triangles, m.triangles)
        assert np.array_equal(back.labels, m.labels)

    def test_devectorize_rejects_wrong_length(self):
        m = cm.icosphere(radius=10.0, subdivisions=1)
        with pytest.raises(sm.ShapeModelError):
            sm.devectorize(np.zeros(3 * m.num_vertices + 3), m)


class TestContainer:
    def test_round_trip_is_exact(self, tmp_path):
        model = sm.build_shape_model(random_shapes(6, 18, seed=97))
        path = tmp_path / "model.cssm"
        sm.save_shape_model(model, path)
        back = sm.load_shape_model(path)
        assert back.k == model.k
        assert back.sample_count == model.sample_count
        assert np.array_equal(back.mean, model.mean)
        assert np.array_equal(back.modes, model.modes)
        assert np.array_equal(back.eigenvalues, model.eigenvalues)
        assert np.array_equal(back.explained, model.explained)

    def test_header_layout(self, tmp_path):
        model = sm.build_shape_model(random_shapes(4, 10, seed=101))
        path = tmp_path / "model.cssm"
        sm.save_shape_model(model, path)
        raw = path.read_bytes()
        assert raw[:4] == b"CSSM"
        version, n_verts, n_samples, k = np.frombuffer(
            raw[4:20], dtype="<u4")
        assert (version, n_verts, n_samples, k) == (1, 10, 4, model.k)
        expected = 20 + 8 * (30 + 3 + 3 + 30 * model.k)
        assert len(raw) == expected

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "junk.cssm"
        path.write_bytes(b"NOPE" + b"\x00" * 64)
        with pytest.raises(sm.ShapeModelError, match="magic"):
            sm.load_shape_model(path)

    def test_truncated_payload_rejected(self, tmp_path):
        model = sm.build_shape_model(random_shapes(4, 10, seed=103))
        path = tmp_path / "model.cssm"
        sm.save_shape_model(model, path)
        raw = path.read_bytes()
        path.write_bytes(raw[:-8])
        with pytest.raises(sm.ShapeModelError, match="truncated"):
            sm.load_shape_model(path)
