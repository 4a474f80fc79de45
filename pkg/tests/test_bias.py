import numpy as np
import pytest
import torch

from cqe.bias import (
    BiasError,
    TriangleReport,
    apex_position,
    deviation,
    realism_scores,
    residual_map,
    triangle_from_stats,
    triangle_plot,
    triangle_report,
)
from cqe.features import FeatureStats, tiny_extractor, tiny_pool_extractor
from cqe.metrics import LpipsMetric
from cqe.networks import DiscArch, DiscriminatorConfig, build_discriminator
from cqe.types import Codec, CodecSpec, ImageTensor, ImageTriplet

from oracles import fid_closed_form


def img(rng, h=32, w=32, c=3):
    return ImageTensor(rng.random((h, w, c), dtype=np.float32))


def triplets(rng, n=3, size=32, enhanced=True):
    out = []
    for i in range(n):
        out.append(
            ImageTriplet(
                raw=img(rng, size, size),
                compressed=img(rng, size, size),
                enhanced=img(rng, size, size) if enhanced else None,
                codec=CodecSpec(Codec.JPEG, 10),
                bpp=1.0,
                source_id=f"t{i}",
            )
        )
    return out


class TestDeviation:
    def test_symmetric_vertex_zero(self):
        for s in (0.1, 1.0, 7.3):
            assert deviation(s, 2.0, s) == 0.0

    def test_collapse_to_compression_minus_100(self):
        assert deviation(0.0, 3.0, 3.0) == pytest.approx(-100.0)

    def test_scale_invariance(self):
        base = deviation(1.2, 2.0, 1.7)
        for k in (0.1, 1.0, 10.0):
            assert deviation(k * 1.2, k * 2.0, k * 1.7) == pytest.approx(base, rel=1e-12)

    def test_zero_base_undefined(self):
        with pytest.raises(BiasError, match="undefined deviation"):
            deviation(1.0, 0.0, 1.0)

    def test_sign_semantics(self):
        # enhancement nearer compression -> negative
        assert deviation(0.5, 2.0, 1.5) < 0
        assert deviation(1.5, 2.0, 0.5) > 0


class ConstD(torch.nn.Module):
    def __init__(self, logit):
        super().__init__()
        self.logit = logit

    def forward(self, image, condition=None):
        return torch.full((image.shape[0],), float(self.logit))


class CondMeanD(torch.nn.Module):
    """Logit equals the mean of the condition: detects which condition was fed."""

    def forward(self, image, condition=None):
        assert condition is not None
        return condition.mean(dim=(1, 2, 3)) * 10


class TestRealismScores:
    def test_constant_discriminator(self, rng):
        trips = triplets(rng, n=2)
        logit = float(np.log(0.7 / 0.3))
        report = realism_scores(ConstD(logit), trips, patch_size=32, conditional=False)
        assert report.mean_score_raw == pytest.approx(0.7, abs=1e-6)
        assert report.mean_score_enhanced == pytest.approx(0.7, abs=1e-6)
        assert report.mean_score_compressed == pytest.approx(0.7, abs=1e-6)
        assert report.delta_enh_to_raw == pytest.approx(0.0, abs=1e-7)
        assert report.delta_comp_to_raw == pytest.approx(0.0, abs=1e-7)

    def test_patch_tiling_count(self, rng):
        trips = triplets(rng, n=2, size=64)
        report = realism_scores(ConstD(0.0), trips, patch_size=32, conditional=False)
        assert report.n_patches == 2 * 4
        assert report.patch_size == 32

    def test_condition_is_always_the_compressed_patch(self, rng):
        """For conditional scoring, raw/enhanced/compressed all share the
        compressed patch as condition, so a condition-only discriminator
        scores the three domains identically."""
        trips = triplets(rng, n=2)
        report = realism_scores(CondMeanD(), trips, patch_size=32, conditional=True)
        assert report.mean_score_raw == pytest.approx(report.mean_score_compressed, abs=1e-7)
        assert report.mean_score_raw == pytest.approx(report.mean_score_enhanced, abs=1e-7)

    def test_missing_enhanced_named(self, rng):
        trips = triplets(rng, n=2, enhanced=False)
        with pytest.raises(BiasError, match="t0"):
            realism_scores(ConstD(0.0), trips, patch_size=32)

    def test_unet_mean_sigmoid_reduction(self, rng):
        trips = triplets(rng, n=1)
        d = build_discriminator(DiscriminatorConfig(arch=DiscArch.UNET_STYLE, base_channels=8))
        report = realism_scores(d, trips, patch_size=32, conditional=False)
        assert 0.0 <= report.mean_score_raw <= 1.0

    def test_patch_too_large(self, rng):
        trips = triplets(rng, n=1, size=32)
        with pytest.raises(BiasError, match="patch size"):
            realism_scores(ConstD(0.0), trips, patch_size=64)


class TestTriangleReport:
    def test_enhanced_equals_raw_fid_identity(self, rng):
        ext = tiny_pool_extractor(dim=8, seed=0)
        raws = [img(rng) for _ in range(4)]
        comps = [img(rng) for _ in range(4)]
        report = triangle_report(raws, comps, list(raws), metric_id="fid", pool_extractor=ext)
        assert report.s_re == 0.0
        assert report.deviation_pct == pytest.approx(
            report.s_ce**2 / report.s_cr**2 * 100.0, rel=1e-9
        )
        assert report.deviation_pct >= 0

    def test_enhanced_equals_compressed_minus_100(self, rng):
        ext = tiny_pool_extractor(dim=8, seed=0)
        raws = [img(rng) for _ in range(4)]
        comps = [img(rng) for _ in range(4)]
        report = triangle_report(raws, comps, list(comps), metric_id="fid", pool_extractor=ext)
        assert report.s_ce == 0.0
        # s_re and s_cr agree up to matrix-square-root round-off
        assert report.deviation_pct == pytest.approx(-100.0, rel=1e-6)

    def test_gaussian_domains_match_closed_form_oracle(self):
        rng = np.random.default_rng(3)
        dim = 4

        def gauss(mean_scale):
            mean = rng.normal(size=dim) + mean_scale
            m = rng.normal(size=(dim, dim)) * 0.3
            return FeatureStats(mean, m @ m.T + 0.2 * np.eye(dim), 50)

        s_r, s_c, s_e = gauss(0.0), gauss(1.0), gauss(0.5)
        report = triangle_from_stats(s_r, s_c, s_e)
        exp_ce = fid_closed_form(s_c.mean, s_c.cov, s_e.mean, s_e.cov)
        exp_cr = fid_closed_form(s_c.mean, s_c.cov, s_r.mean, s_r.cov)
        exp_re = fid_closed_form(s_r.mean, s_r.cov, s_e.mean, s_e.cov)
        assert report.s_ce == pytest.approx(exp_ce, abs=1e-8)
        assert report.deviation_pct == pytest.approx(
            (exp_ce**2 - exp_re**2) / exp_cr**2 * 100, rel=1e-6
        )

    def test_lpips_triangle_aligned_pairs(self, rng):
        metric = LpipsMetric(tiny_extractor(blocks=2, channels=8, seed=5, pre_activation=False))
        raws = [img(rng) for _ in range(3)]
        comps = [img(rng) for _ in range(3)]
        report = triangle_report(raws, comps, list(raws), metric_id="lpips", lpips_metric=metric)
        assert report.s_re == 0.0
        expected_cr = float(np.mean([metric(c, r) for c, r in zip(comps, raws)]))
        assert report.s_cr == pytest.approx(expected_cr, rel=1e-9)

    def test_lpips_requires_aligned_sets(self, rng):
        metric = LpipsMetric(tiny_extractor(blocks=2, channels=8, seed=5))
        with pytest.raises(BiasError, match="aligned"):
            triangle_report([img(rng)], [img(rng)], [img(rng), img(rng)],
                            metric_id="lpips", lpips_metric=metric)

    def test_fid_insufficient_samples(self, rng):
        ext = tiny_pool_extractor(dim=8, seed=0)
        with pytest.raises(BiasError, match="insufficient"):
            triangle_report([img(rng)], [img(rng)], [img(rng)], metric_id="fid", pool_extractor=ext)

    def test_empty_sets_rejected(self, rng):
        with pytest.raises(BiasError, match="non-empty"):
            triangle_report([], [img(rng)], [img(rng)], metric_id="fid", pool_extractor=None)


class TestResidualMap:
    def test_identical_all_zero(self, rng):
        a = img(rng)
        out = residual_map(a, a, amplify=5.0)
        assert float(np.abs(out.data).max()) == 0.0

    def test_uniform_difference_scaled(self):
        a = ImageTensor(np.full((4, 4, 3), 0.6, dtype=np.float32))
        b = ImageTensor(np.full((4, 4, 3), 0.5, dtype=np.float32))
        out = residual_map(a, b, amplify=5.0)
        assert np.allclose(out.data, 0.5, atol=1e-6)

    def test_clipping(self):
        a = ImageTensor(np.full((4, 4, 3), 0.9, dtype=np.float32))
        b = ImageTensor(np.zeros((4, 4, 3), dtype=np.float32))
        out = residual_map(a, b, amplify=10.0)
        assert float(out.data.max()) == 1.0

    def test_shape_mismatch(self, rng):
        with pytest.raises(BiasError, match="shape mismatch"):
            residual_map(img(rng), img(rng, 8, 8))


class TestTrianglePlot:
    def test_apex_identity_random_triangles(self):
        """Apex x equals base centroid + (deviation/100) * (s_cr / 2)."""
        rng = np.random.default_rng(11)
        for _ in range(100):
            a, b = rng.uniform(0.2, 3.0, size=2)
            s_cr = rng.uniform(max(0.05, abs(a - b) + 0.01), a + b - 0.01)
            x, y, violated = apex_position(a, s_cr, b)
            assert not violated
            dev = deviation(a, s_cr, b)
            assert x - s_cr / 2 == pytest.approx((dev / 100.0) * (s_cr / 2), rel=1e-9, abs=1e-12)

    def test_isoceles_centered(self):
        x, y, violated = apex_position(1.0, 1.2, 1.0)
        assert x == pytest.approx(0.6)
        assert not violated

    def test_apex_at_compression_vertex(self):
        x, y, violated = apex_position(0.0, 1.0, 1.0)
        assert (x, y) == (0.0, 0.0)
        assert not violated

    def test_violation_flattens_apex(self):
        x, y, violated = apex_position(0.3, 1.0, 0.3)  # 0.3 + 0.3 < 1.0
        assert violated
        assert y == 0.0

    def test_plot_files_written(self, tmp_path):
        reports = [
            TriangleReport(s_ce=1.0, s_cr=1.5, s_re=1.2, metric_id="fid", deviation_pct=-19.6, label="a"),
            TriangleReport(s_ce=0.6, s_cr=1.5, s_re=1.4, metric_id="fid", deviation_pct=-71.1, label="b"),
        ]
        out = triangle_plot(reports, tmp_path / "tri.png")
        assert out.exists() and out.stat().st_size > 0

    def test_violated_triangle_warns(self, tmp_path):
        bad = TriangleReport(s_ce=0.2, s_cr=1.0, s_re=0.2, metric_id="fid", deviation_pct=0.0)
        with pytest.warns(UserWarning, match="triangle inequality"):
            triangle_plot([bad], tmp_path / "warn.png")
