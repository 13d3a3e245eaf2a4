import math

import numpy as np
import pytest

from feder.linalg import Matrix, SingularSpectrum, Tensor4, svd_values, unfold
from feder.metrics import (MetricReport, ZeroSpectrumError, condition_number,
                           denoise_spectrum, effective_rank, layer_effective_rank,
                           metric_report, model_effective_rank, normalize_spectrum,
                           stable_rank)
from feder.rng import derive_rng


def random_spectrum(rng, n=None):
    n = n if n is not None else int(rng.integers(1, 12))
    values = np.sort(rng.uniform(0.0, 5.0, n))[::-1]
    return SingularSpectrum(values)


class TestNormalize:
    def test_examples(self):
        assert normalize_spectrum(SingularSpectrum([3.0, 1.0])).tolist() == [0.75, 0.25]
        assert normalize_spectrum(SingularSpectrum([5.0])).tolist() == [1.0]
        assert normalize_spectrum(SingularSpectrum([2.0] * 4)).tolist() == [0.25] * 4

    def test_sums_to_one(self):
        rng = derive_rng(21, "norm")
        for _ in range(50):
            p = normalize_spectrum(random_spectrum(rng))
            assert abs(float(np.sum(p)) - 1.0) <= 1e-12

    def test_zero_spectrum_error(self):
        with pytest.raises(ZeroSpectrumError):
            normalize_spectrum(SingularSpectrum([0.0, 0.0]))


class TestEffectiveRank:
    def test_rank_one_is_zero(self):
        assert effective_rank(SingularSpectrum([1.0, 0.0, 0.0])) == 0.0

    def test_uniform_is_log_n(self):
        assert abs(effective_rank(SingularSpectrum([1.0] * 4)) - math.log(4)) < 1e-12

    def test_three_one_matches_scalar_oracle(self):
        # direct scalar entropy evaluation of the normalized values
        expected = -(0.75 * math.log(0.75) + 0.25 * math.log(0.25))
        assert abs(effective_rank(SingularSpectrum([3.0, 1.0])) - expected) < 1e-14

    def test_scale_invariance(self):
        rng = derive_rng(22, "scale")
        for _ in range(30):
            s = random_spectrum(rng)
            for c in (0.25, 7.0, 1e6):
                scaled = SingularSpectrum(c * s.sigma)
                assert abs(effective_rank(scaled) - effective_rank(s)) <= 1e-12

    def test_bounds(self):
        rng = derive_rng(23, "bounds")
        for _ in range(50):
            s = random_spectrum(rng)
            er = effective_rank(s)
            nonzero = int(np.sum(s.sigma > 0))
            assert 0.0 <= er <= math.log(max(nonzero, 1)) + 1e-12

    def test_orthogonal_invariance(self):
        rng = derive_rng(24, "orth")
        a = rng.normal(size=(8, 6))
        q, _ = np.linalg.qr(rng.normal(size=(8, 8)))
        er_a = effective_rank(svd_values(Matrix(a)))
        er_qa = effective_rank(svd_values(Matrix(q @ a)))
        assert abs(er_a - er_qa) < 1e-9

    def test_zero_spectrum_error(self):
        with pytest.raises(ZeroSpectrumError):
            effective_rank(SingularSpectrum([0.0]))


class TestModelEffectiveRank:
    def test_single_e(self):
        assert abs(model_effective_rank([math.e], 1) - 1.0) < 1e-12

    def test_three_four_five(self):
        # root-sum-square of (3, 4) is 5
        assert abs(model_effective_rank([3.0, 4.0], 2) - math.log(5.0 / 2.0)) < 1e-12

    def test_uniform_four(self):
        assert abs(model_effective_rank([1.0, 1.0, 1.0, 1.0], 4) - math.log(0.5)) < 1e-12

    def test_all_zero_rejected(self):
        with pytest.raises(ZeroSpectrumError):
            model_effective_rank([0.0, 0.0], 2)

    def test_count_mismatch(self):
        with pytest.raises(ValueError):
            model_effective_rank([1.0, 2.0], 3)


class TestStableRank:
    def test_identity_spectrum(self):
        for n in (1, 4, 9):
            assert stable_rank(SingularSpectrum([1.0] * n)) == float(n)

    def test_rank_one(self):
        assert stable_rank(SingularSpectrum([1.0, 0.0])) == 1.0

    def test_two_one_one(self):
        assert stable_rank(SingularSpectrum([2.0, 1.0, 1.0])) == 1.5

    def test_bounded_by_nonzero_count(self):
        rng = derive_rng(25, "stable")
        for _ in range(30):
            s = random_spectrum(rng)
            if s.sigma[0] == 0:
                continue
            sr = stable_rank(s)
            assert 1.0 <= sr <= int(np.sum(s.sigma > 0)) + 1e-12


class TestConditionNumber:
    def test_examples(self):
        assert condition_number(SingularSpectrum([1.0, 1.0, 1.0])) == 1.0
        assert condition_number(SingularSpectrum([4.0, 2.0])) == 2.0
        assert condition_number(SingularSpectrum([1.0, 0.0])) == math.inf

    def test_at_least_one(self):
        rng = derive_rng(26, "cond")
        for _ in range(30):
            s = random_spectrum(rng)
            if s.sigma[0] == 0:
                continue
            assert condition_number(s) >= 1.0


class TestDenoise:
    def test_off_is_identity(self):
        rng = derive_rng(27, "denoise-off")
        m = Matrix(rng.normal(size=(9, 7)))
        assert np.array_equal(denoise_spectrum(m, "off").sigma, svd_values(m).sigma)

    def test_analytic_shrinkage_contract(self):
        rng = derive_rng(28, "denoise-shrink")
        for _ in range(10):
            m = Matrix(rng.normal(size=(int(rng.integers(2, 20)), int(rng.integers(2, 20)))))
            raw = svd_values(m).sigma
            den = denoise_spectrum(m, "analytic").sigma
            assert np.all(den <= raw + 1e-15)
            assert int(np.sum(den > 0)) <= int(np.sum(raw > 0))

    def test_analytic_small_diag(self):
        den = denoise_spectrum(Matrix(np.diag([10.0, 0.001])), "analytic").sigma
        assert int(np.sum(den > 0)) <= 2
        assert den[0] <= 10.0

    def test_analytic_recovers_planted_rank_one(self):
        rng = derive_rng(29, "planted")
        u = rng.normal(size=16)
        u /= np.linalg.norm(u)
        v = rng.normal(size=16)
        v /= np.linalg.norm(v)
        m = Matrix(4.0 * np.outer(u, v) + rng.normal(0.0, 1e-3, (16, 16)))
        raw_top = svd_values(m).sigma[0]  # oracle for the planted strength
        den = denoise_spectrum(m, "analytic").sigma
        assert int(np.sum(den > 0)) >= 1
        assert abs(den[0] - raw_top) <= 0.05 * raw_top

    def test_unknown_mode(self):
        with pytest.raises(ValueError, match="noise_mode"):
            denoise_spectrum(Matrix([[1.0]]), "sometimes")


class TestLayerEffectiveRank:
    def test_4d_unfolds(self):
        rng = derive_rng(30, "layer")
        t = rng.normal(size=(3, 3, 4, 8))
        direct = effective_rank(svd_values(unfold(Tensor4(t), 4)))
        assert layer_effective_rank(t, unfold_mode=4) == direct

    def test_2d_direct(self):
        rng = derive_rng(31, "layer2d")
        w = rng.normal(size=(16, 10))
        assert layer_effective_rank(w) == effective_rank(svd_values(Matrix(w)))

    def test_1d_has_none(self):
        assert layer_effective_rank(np.ones(5)) is None

    def test_zero_layer_scores_zero(self):
        assert layer_effective_rank(np.zeros((3, 3, 2, 2))) == 0.0


class TestMetricReport:
    def test_report_fields_and_invariants(self):
        rng = derive_rng(32, "report")
        layers = [
            ("conv1.weight", rng.normal(size=(3, 3, 3, 8))),
            ("conv1.bias", rng.normal(size=8)),
            ("dense.weight", rng.normal(size=(16, 10))),
        ]
        report = metric_report(layers)
        assert isinstance(report, MetricReport)
        assert set(report.per_layer_effective_rank) == {"conv1.weight", "dense.weight"}
        for name, er in report.per_layer_effective_rank.items():
            rank_bound = math.log(min(8, 27) if name == "conv1.weight" else 10)
            assert 0.0 <= er <= rank_bound + 1e-12
        for sr in report.per_layer_stable_rank.values():
            assert sr >= 1.0
        for cond in report.per_layer_condition_number.values():
            assert cond >= 1.0
        expected_q = model_effective_rank(list(report.per_layer_effective_rank.values()), 2)
        assert report.model_q_er == expected_q

    def test_report_needs_rank_bearing_layer(self):
        with pytest.raises(ValueError):
            metric_report([("bias", np.ones(3))])
