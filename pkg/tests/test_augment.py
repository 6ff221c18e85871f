import numpy as np
import pytest

from fundusnet.augment import (
    AugmentConfig,
    ColorStats,
    apply_geometric,
    augment_sample,
    color_affine,
    color_transfer,
    fit_pca_basis,
    fit_pca_basis_from_images,
    image_color_stats,
    pca_color_jitter,
    pca_offset,
    random_geometric,
    sample_target_stats,
    with_dataset_priors,
)
from fundusnet.dataset import FundusSample, SynthParams, synth_sample
from fundusnet.errors import DegenerateSample
from fundusnet.metrics import hard_dice


def _mask_centroid(mask):
    ys, xs = np.nonzero(mask)
    return xs.mean(), ys.mean()


def _sample_with_disk(size=120, r=30):
    rng = np.random.default_rng(0)
    image = rng.integers(20, 200, (size, size, 3)).astype(np.uint8)
    yy, xx = np.mgrid[0:size, 0:size]
    c = (size - 1) / 2.0  # centered on the rotation pivot
    od = (xx - c) ** 2 + (yy - c) ** 2 <= r**2
    oc = (xx - c) ** 2 + (yy - c) ** 2 <= (r / 2) ** 2
    return FundusSample("s", image, od, oc, 1)


class TestGeometric:
    def test_zero_config_is_identity(self):
        sample = _sample_with_disk()
        cfg = AugmentConfig(max_shift=0, max_rotation=0, enable_color_transfer=False, enable_pca=False)
        out = random_geometric(sample, cfg, np.random.default_rng(0))
        assert np.array_equal(out.image, sample.image)
        assert np.array_equal(out.od_mask, sample.od_mask)

    def test_rotated_circle_is_stable(self):
        sample = _sample_with_disk(size=140, r=50)
        for angle in (13.0, 47.0, 90.0, 181.5):
            out = apply_geometric(sample, 0.0, 0.0, angle)
            assert hard_dice(out.od_mask, sample.od_mask) >= 0.99

    def test_forced_shift_moves_centroid(self):
        sample = _sample_with_disk()
        out = apply_geometric(sample, 10.0, 0.0, 0.0)
        x0, y0 = _mask_centroid(sample.od_mask)
        x1, y1 = _mask_centroid(out.od_mask)
        assert x1 - x0 == pytest.approx(10.0, abs=0.5)
        assert y1 - y0 == pytest.approx(0.0, abs=0.5)

    def test_label_and_nesting_preserved(self):
        sample = _sample_with_disk()
        rng = np.random.default_rng(3)
        cfg = AugmentConfig(max_shift=15, max_rotation=30)
        out = random_geometric(sample, cfg, rng)
        assert out.label == sample.label
        assert not (out.oc_mask & ~out.od_mask).any()

    def test_deterministic_given_seed(self):
        sample = _sample_with_disk()
        cfg = AugmentConfig(max_shift=12, max_rotation=20)
        a = random_geometric(sample, cfg, np.random.default_rng(9))
        b = random_geometric(sample, cfg, np.random.default_rng(9))
        assert np.array_equal(a.image, b.image)
        assert np.array_equal(a.od_mask, b.od_mask)

    def test_warp_commutes_with_mask_decoding(self):
        """Nearest-warping the indexed mask then decoding equals decoding
        then warping the binary masks."""
        from scipy.ndimage import map_coordinates

        from fundusnet.dataset import LabelEncoding, decode_mask, encode_mask

        enc = LabelEncoding()
        sample = _sample_with_disk(size=96, r=22)
        dx, dy, angle = 7.0, -4.0, 23.0

        warped = apply_geometric(sample, dx, dy, angle)

        # independent nearest-neighbor warp of the indexed mask
        indexed = encode_mask(sample.od_mask, sample.oc_mask, enc)
        h, w = indexed.shape
        cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
        theta = np.deg2rad(angle)
        ys, xs = np.mgrid[0:h, 0:w]
        xq = xs - dx - cx
        yq = ys - dy - cy
        grid = (-np.sin(theta) * xq + np.cos(theta) * yq + cy,
                np.cos(theta) * xq + np.sin(theta) * yq + cx)
        warped_indexed = map_coordinates(
            indexed, grid, order=0, mode="constant", cval=enc.background_value
        )
        od, oc = decode_mask(warped_indexed.astype(np.uint8), enc)
        assert np.array_equal(od, warped.od_mask)
        assert np.array_equal(oc, warped.oc_mask)


class TestColorTransfer:
    def test_identity_at_source_stats(self):
        rng = np.random.default_rng(1)
        image = rng.integers(30, 220, (40, 40, 3)).astype(np.uint8)
        stats = image_color_stats(image)
        out = color_transfer(image, stats)
        assert np.abs(out.astype(int) - image.astype(int)).max() <= 1

    def test_hand_value(self):
        target = ColorStats([100.0, 0.0, 0.0], [20.0, 1.0, 1.0])
        # channel 0 has mean 50, std 10: values 40 and 60
        image = np.zeros((1, 2, 3), np.float64)
        image[0, 0, 0] = 40.0
        image[0, 1, 0] = 60.0
        out = color_affine(image, target)
        assert out[0, 1, 0] == pytest.approx(120.0)
        assert out[0, 0, 0] == pytest.approx(80.0)

    def test_constant_channel_collapses_to_target_mean(self):
        image = np.full((8, 8, 3), 33, np.uint8)
        target = ColorStats([77.0, 77.0, 77.0], [5.0, 5.0, 5.0])
        out = color_transfer(image, target)
        assert (out == 77).all()

    def test_exact_statistics_before_clipping(self):
        rng = np.random.default_rng(2)
        image = rng.integers(0, 256, (64, 64, 3)).astype(np.uint8)
        target = ColorStats([120.0, 90.0, 60.0], [25.0, 15.0, 40.0])
        out = color_affine(image, target)
        flat = out.reshape(-1, 3)
        assert np.allclose(flat.mean(0), target.mean, atol=1e-9)
        assert np.allclose(flat.std(0), target.std, atol=1e-9)

    def test_negative_std_rejected(self):
        with pytest.raises(ValueError):
            ColorStats([0, 0, 0], [1, -1, 1])


class TestSampleTargetStats:
    def _cfg(self, mean_sigma, std_sigma):
        return AugmentConfig(
            color_mean_prior=((120.0, mean_sigma),) * 3,
            color_std_prior=((40.0, std_sigma),) * 3,
        )

    def test_zero_prior_std_returns_mean(self):
        stats = sample_target_stats(self._cfg(0.0, 0.0), np.random.default_rng(0))
        assert np.allclose(stats.mean, 120.0)
        assert np.allclose(stats.std, 40.0)

    def test_std_floor(self):
        cfg = AugmentConfig(
            color_mean_prior=((100.0, 0.0),) * 3,
            color_std_prior=((0.0, 0.0),) * 3,  # would draw 0, clamps to 1
        )
        stats = sample_target_stats(cfg, np.random.default_rng(0))
        assert np.allclose(stats.std, 1.0)

    def test_monte_carlo_mean(self):
        cfg = self._cfg(10.0, 2.0)
        rng = np.random.default_rng(42)
        draws = np.array([sample_target_stats(cfg, rng).mean for _ in range(10_000)])
        se = 10.0 / np.sqrt(10_000)
        assert np.abs(draws.mean(0) - 120.0).max() < 3 * se


class TestPcaBasis:
    def test_recovers_known_covariance(self):
        rng = np.random.default_rng(0)
        pixels = rng.normal(0.0, 1.0, (100_000, 3)) * np.sqrt([4.0, 1.0, 0.25])
        basis = fit_pca_basis(pixels)
        assert np.allclose(basis.eigenvalues, [4.0, 1.0, 0.25], rtol=0.05)
        # eigenvectors should be near axis-aligned
        assert np.allclose(np.abs(basis.eigenvectors), np.eye(3), atol=0.05)

    def test_identical_pixels_zero_eigenvalues(self):
        basis = fit_pca_basis(np.full((100, 3), 0.5))
        assert np.allclose(basis.eigenvalues, 0.0)

    def test_orthonormal(self, rng):
        pixels = rng.random((500, 3))
        basis = fit_pca_basis(pixels)
        assert np.allclose(basis.eigenvectors.T @ basis.eigenvectors, np.eye(3), atol=1e-6)
        assert basis.eigenvalues[0] >= basis.eigenvalues[1] >= basis.eigenvalues[2] >= 0

    def test_sign_convention_deterministic(self, rng):
        pixels = rng.random((1000, 3))
        basis = fit_pca_basis(pixels)
        flipped = fit_pca_basis(pixels[::-1].copy())
        assert np.allclose(basis.eigenvectors, flipped.eigenvectors, atol=1e-9)
        for col in range(3):
            peak = np.argmax(np.abs(basis.eigenvectors[:, col]))
            assert basis.eigenvectors[peak, col] > 0

    def test_degenerate_sample(self):
        with pytest.raises(DegenerateSample):
            fit_pca_basis(np.zeros((2, 3)))


class TestPcaJitter:
    def _basis(self, rng):
        pixels = rng.normal(0, 0.1, (5000, 3)) @ np.array(
            [[0.8, 0.1, 0.1], [0.1, 0.7, 0.2], [0.1, 0.2, 0.7]]
        )
        return fit_pca_basis(pixels + 0.5)

    def test_zero_scale_is_identity(self, rng):
        basis = self._basis(rng)
        image = rng.integers(0, 255, (16, 16, 3)).astype(np.uint8)
        cfg = AugmentConfig(pca_scale=0.0)
        out = pca_color_jitter(image, basis, cfg, np.random.default_rng(0))
        assert np.array_equal(out, image)

    def test_zero_eigenvalues_identity(self, rng):
        basis = fit_pca_basis(np.full((50, 3), 0.3))
        image = rng.integers(0, 255, (8, 8, 3)).astype(np.uint8)
        cfg = AugmentConfig(pca_scale=0.5)
        out = pca_color_jitter(image, basis, cfg, np.random.default_rng(1))
        assert np.array_equal(out, image)

    def test_offset_distribution(self, rng):
        basis = self._basis(rng)
        cfg = AugmentConfig(pca_scale=0.1)
        stream = np.random.default_rng(7)
        offsets = np.array([pca_offset(basis, cfg, stream) for _ in range(10_000)])
        assert np.abs(offsets.mean(0) * 255.0).max() < 0.5
        lam = basis.eigenvalues
        expected = basis.eigenvectors @ np.diag((cfg.pca_scale * lam) ** 2) @ basis.eigenvectors.T
        got = np.cov(offsets, rowvar=False)
        assert np.linalg.norm(got - expected) <= 0.10 * np.linalg.norm(expected)


class TestAugmentChain:
    def test_preserves_label_and_nesting(self):
        sample = synth_sample(SynthParams(image_size=128), np.random.default_rng(0))
        cfg = AugmentConfig(
            max_shift=8,
            max_rotation=10,
            color_mean_prior=((150.0, 10.0), (90.0, 10.0), (60.0, 10.0)),
            color_std_prior=((55.0, 5.0), (40.0, 5.0), (30.0, 5.0)),
            pca_scale=0.05,
        )
        basis = fit_pca_basis_from_images([sample.image])
        out = augment_sample(sample, cfg, np.random.default_rng(5), basis)
        assert out.label == sample.label
        assert not (out.oc_mask & ~out.od_mask).any()
        assert out.image.shape == sample.image.shape

    def test_deterministic(self):
        sample = synth_sample(SynthParams(image_size=96), np.random.default_rng(1))
        cfg = AugmentConfig(
            max_shift=5,
            max_rotation=7,
            color_mean_prior=((140.0, 12.0),) * 3,
            color_std_prior=((50.0, 4.0),) * 3,
            pca_scale=0.08,
        )
        basis = fit_pca_basis_from_images([sample.image])
        a = augment_sample(sample, cfg, np.random.default_rng(33), basis)
        b = augment_sample(sample, cfg, np.random.default_rng(33), basis)
        assert np.array_equal(a.image, b.image)
        assert np.array_equal(a.oc_mask, b.oc_mask)

    def test_priors_filled_from_dataset(self):
        sample = synth_sample(SynthParams(image_size=96), np.random.default_rng(2))
        cfg = AugmentConfig()
        assert cfg.color_mean_prior is None
        filled = with_dataset_priors(cfg, [sample.image])
        assert filled.color_mean_prior is not None
        stats = image_color_stats(sample.image)
        assert filled.color_mean_prior[0][0] == pytest.approx(stats.mean[0], abs=2.0)

    def test_negative_magnitudes_rejected(self):
        with pytest.raises(ValueError):
            AugmentConfig(max_shift=-1)
