import numpy as np
import pytest

from conftest import random_distribution
from draftwire.aggregation import TopKProfile, WeightVector
from draftwire.compression import Strategy
from draftwire.dist import Distribution
from draftwire.metrics import (
    CSV_COLUMNS,
    StepMetrics,
    acceptance_variation,
    aggregation_bias,
    check_bounds,
    instrument_position,
    local_error,
    read_sweep_csv,
    sweep_aggregate,
    write_sweep_csv,
)

# Two-worker reference point used throughout: uniform weights, k=2 each.
P1 = Distribution([0.5, 0.3, 0.15, 0.05])
P2 = Distribution([0.1, 0.2, 0.3, 0.4])
Q = Distribution([0.4, 0.4, 0.1, 0.1])
W = WeightVector.uniform(2)
PROFILE = TopKProfile((2, 2), 4)


def reference_step(q=Q):
    return instrument_position([P1, P2], q, W, PROFILE)


class TestPointwiseMeasures:
    def test_local_error_renormalized_equals_twice_residual_mass(self):
        recon = Distribution([0.625, 0.375, 0.0, 0.0])
        assert local_error(P1, recon) == pytest.approx(0.4, abs=1e-12)

    def test_local_error_residual_uniform_is_smaller_here(self):
        recon = Distribution([0.5, 0.3, 0.1, 0.1])
        assert local_error(P1, recon) == pytest.approx(0.1, abs=1e-12)

    def test_lossless_error_is_zero(self):
        assert local_error(P1, P1) == 0.0

    def test_acceptance_variation_symmetric_inputs(self):
        exact = Distribution([0.3, 0.25, 0.225, 0.225])
        comp = Distribution([0.3125, 0.1875, 3 / 14, 2 / 7])
        assert acceptance_variation(Q, exact, comp) == pytest.approx(0.05, abs=1e-12)
        assert acceptance_variation(Q, comp, exact) == pytest.approx(0.05, abs=1e-12)


class TestInstrumentedReferencePoint:
    """Every number below is derived by hand from the two fixed workers."""

    def test_epsilons(self):
        step = reference_step()
        assert step.worker_epsilons == pytest.approx((0.2, 0.3), abs=1e-12)
        assert step.weighted_epsilon == pytest.approx(0.25, abs=1e-12)

    def test_local_errors(self):
        step = reference_step()
        assert step.local_errors_renormalized == pytest.approx((0.4, 0.6), abs=1e-12)
        assert step.local_errors_residual == pytest.approx((0.1, 0.1), abs=1e-12)

    def test_biases(self):
        step = reference_step()
        # exact avg [0.3,0.25,0.225,0.225]; renorm avg [0.3125,0.1875,3/14,2/7]
        assert step.bias_renormalized == pytest.approx(0.1464285714285714, abs=1e-12)
        # residual avg [0.325,0.225,0.2,0.25]
        assert step.bias_residual == pytest.approx(0.1, abs=1e-12)

    def test_acceptance_rates(self):
        step = reference_step()
        assert step.alpha_exact == pytest.approx(0.75, abs=1e-12)
        assert step.alpha_renormalized == pytest.approx(0.70, abs=1e-12)
        assert step.alpha_residual == pytest.approx(0.75, abs=1e-12)
        assert step.dalpha_renormalized == pytest.approx(0.05, abs=1e-12)
        assert step.dalpha_residual == pytest.approx(0.0, abs=1e-12)

    def test_bonus_position_has_no_acceptance(self):
        step = reference_step(q=None)
        assert step.alpha_exact is None
        assert step.dalpha_renormalized is None
        assert step.bias_renormalized == pytest.approx(0.1464285714285714, abs=1e-12)

    def test_worker_count_mismatch(self):
        with pytest.raises(ValueError):
            instrument_position([P1], Q, W, PROFILE)

    def test_all_bounds_hold_at_reference_point(self):
        report = check_bounds(reference_step())
        assert report.total == 0


class TestCheckBounds:
    def lossless_step(self):
        return instrument_position([P1, P2], Q, W, TopKProfile((4, 4), 4))

    def test_lossless_equality_at_zero(self):
        step = self.lossless_step()
        assert step.weighted_epsilon <= 1e-12
        assert step.bias_renormalized == 0.0
        assert step.bias_residual == 0.0
        assert step.dalpha_renormalized == 0.0
        assert check_bounds(step).total == 0

    def test_random_corpus_zero_violations(self):
        rng = np.random.default_rng(70)
        total = 0
        for _ in range(1_000):
            m = int(rng.integers(1, 5))
            size = int(rng.integers(2, 24))
            dists = [random_distribution(rng, size, sparsity=0.3) for _ in range(m)]
            q = random_distribution(rng, size)
            raw = rng.random(m) + 0.01
            weights = raw / raw.sum()
            weights[-1] = 1.0 - weights[:-1].sum()
            profile = TopKProfile([int(rng.integers(1, size + 1)) for _ in range(m)], size)
            step = instrument_position(dists, q, WeightVector(weights), profile)
            total += check_bounds(step).total
        assert total == 0

    def test_fabricated_lemma1_violation_detected(self):
        step = reference_step()
        bad = StepMetrics(
            worker_epsilons=step.worker_epsilons,
            weighted_epsilon=step.weighted_epsilon,
            local_errors_renormalized=(0.5, 0.6),  # 0.5 != 2 * 0.2
            local_errors_residual=step.local_errors_residual,
            bias_renormalized=step.bias_renormalized,
            bias_residual=step.bias_residual,
            alpha_exact=step.alpha_exact,
            alpha_renormalized=step.alpha_renormalized,
            alpha_residual=step.alpha_residual,
            dalpha_renormalized=step.dalpha_renormalized,
            dalpha_residual=step.dalpha_residual,
        )
        report = check_bounds(bad)
        assert report.lemma1_renormalized == 1
        assert report.for_strategy(Strategy.RENORMALIZED)[0] == 1
        assert report.for_strategy(Strategy.RESIDUAL_UNIFORM)[0] == 0

    def test_fabricated_thm1_violation_detected(self):
        step = reference_step()
        bad = StepMetrics(
            worker_epsilons=step.worker_epsilons,
            weighted_epsilon=step.weighted_epsilon,
            local_errors_renormalized=step.local_errors_renormalized,
            local_errors_residual=step.local_errors_residual,
            bias_renormalized=0.75,  # above 2 * 0.25
            bias_residual=step.bias_residual,
            alpha_exact=step.alpha_exact,
            alpha_renormalized=step.alpha_renormalized,
            alpha_residual=step.alpha_residual,
            dalpha_renormalized=step.dalpha_renormalized,
            dalpha_residual=step.dalpha_residual,
        )
        report = check_bounds(bad)
        assert report.thm1_renormalized == 1
        assert report.thm1_residual == 0
        # 0.75 also breaks the chain link bias/2 <= weighted eps
        assert report.thm2_renormalized == 1

    def test_fabricated_thm2_violation_detected(self):
        step = reference_step()
        bad = StepMetrics(
            worker_epsilons=step.worker_epsilons,
            weighted_epsilon=step.weighted_epsilon,
            local_errors_renormalized=step.local_errors_renormalized,
            local_errors_residual=step.local_errors_residual,
            bias_renormalized=step.bias_renormalized,
            bias_residual=step.bias_residual,
            alpha_exact=step.alpha_exact,
            alpha_renormalized=step.alpha_renormalized,
            alpha_residual=step.alpha_residual,
            dalpha_renormalized=0.2,  # above bias/2 = 0.0732...
            dalpha_residual=step.dalpha_residual,
        )
        report = check_bounds(bad)
        assert report.thm2_renormalized == 1
        assert report.thm2_residual == 0

    def test_bonus_position_skips_thm2(self):
        report = check_bounds(reference_step(q=None))
        assert report.thm2_renormalized == 0
        assert report.thm2_residual == 0

    def test_step_metric_validation(self):
        with pytest.raises(ValueError):
            StepMetrics(
                worker_epsilons=(1.5,),  # impossible residual mass
                weighted_epsilon=0.0,
                local_errors_renormalized=(0.0,),
                local_errors_residual=(0.0,),
                bias_renormalized=0.0,
                bias_residual=0.0,
                alpha_exact=None,
                alpha_renormalized=None,
                alpha_residual=None,
                dalpha_renormalized=None,
                dalpha_residual=None,
            )


class TestSweepAggregate:
    def record(self, steps, strategy=Strategy.RENORMALIZED):
        return sweep_aggregate(
            steps, strategy=strategy, m=2, gamma=4, vocab_size=4, k=2,
            temperature=1.0, seed=42, samples=1)

    def test_single_step_passthrough(self):
        step = reference_step()
        rec = self.record([step])
        assert rec.delta_bar == pytest.approx(step.bias_renormalized, abs=1e-15)
        assert rec.eps_bar == pytest.approx(0.25, abs=1e-12)
        assert rec.delta_alpha_bar == pytest.approx(0.05, abs=1e-12)
        assert rec.steps == 1
        assert rec.lemma1_violations == 0

    def test_mean_of_two_steps(self):
        draft = reference_step()
        bonus = reference_step(q=None)
        rec = self.record([draft, bonus])
        assert rec.steps == 2
        assert rec.delta_bar == pytest.approx(draft.bias_renormalized, abs=1e-15)
        # only the draft position contributes to the acceptance average
        assert rec.delta_alpha_bar == pytest.approx(0.05, abs=1e-12)

    def test_residual_strategy_column(self):
        rec = self.record([reference_step()], strategy=Strategy.RESIDUAL_UNIFORM)
        assert rec.delta_bar == pytest.approx(0.1, abs=1e-12)
        assert rec.delta_alpha_bar == pytest.approx(0.0, abs=1e-12)

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            self.record([])

    def test_derived_properties(self):
        rec = self.record([reference_step()])
        assert rec.k_pct == pytest.approx(50.0, abs=1e-12)
        assert rec.two_eps_bar == pytest.approx(2 * rec.eps_bar, abs=1e-15)
        assert rec.half_delta_bar == pytest.approx(rec.delta_bar / 2, abs=1e-15)

    def test_average_within_step_range(self):
        rng = np.random.default_rng(71)
        steps = []
        for _ in range(20):
            dists = [random_distribution(rng, 8) for _ in range(2)]
            q = random_distribution(rng, 8)
            steps.append(instrument_position(dists, q, W, TopKProfile((3, 3), 8)))
        rec = self.record(steps)
        biases = [s.bias_renormalized for s in steps]
        assert min(biases) - 1e-15 <= rec.delta_bar <= max(biases) + 1e-15


class TestCsvRoundTrip:
    def test_schema_and_values(self, tmp_path):
        rec = sweep_aggregate(
            [reference_step()], strategy=Strategy.RESIDUAL_UNIFORM, m=2, gamma=4,
            vocab_size=4, k=2, temperature=0.8, seed=7, samples=3)
        path = tmp_path / "sweep.csv"
        write_sweep_csv([rec], path)

        header = path.read_text().splitlines()[0]
        assert header == ",".join(CSV_COLUMNS)

        rows = read_sweep_csv(path)
        assert len(rows) == 1
        row = rows[0]
        assert row["strategy"] == "residual_uniform"
        assert row["M"] == "2"
        assert row["K"] == "2"
        assert float(row["K_pct"]) == 50.0
        assert float(row["temperature"]) == 0.8
        # repr round-trips the float exactly
        assert float(row["delta_bar"]) == rec.delta_bar
        assert float(row["two_eps_bar"]) == 2 * rec.eps_bar
        assert row["lemma1_violations"] == "0"

    def test_deterministic_bytes(self, tmp_path):
        rec = sweep_aggregate(
            [reference_step()], strategy=Strategy.RENORMALIZED, m=2, gamma=4,
            vocab_size=4, k=2, temperature=1.0, seed=42, samples=1)
        a = tmp_path / "a.csv"
        b = tmp_path / "b.csv"
        write_sweep_csv([rec], a)
        write_sweep_csv([rec], b)
        assert a.read_bytes() == b.read_bytes()


class TestBiasOrderingIsReportedNotAssumed:
    def test_residual_can_beat_renormalized_and_vice_versa(self):
        # No bound orders the two strategies; verify both orderings occur.
        rng = np.random.default_rng(72)
        res_wins = ren_wins = 0
        for _ in range(300):
            dists = [random_distribution(rng, 12, sparsity=0.4) for _ in range(2)]
            profile = TopKProfile((int(rng.integers(1, 12)),) * 2, 12)
            step = instrument_position(dists, None, W, profile)
            if step.bias_residual < step.bias_renormalized - 1e-12:
                res_wins += 1
            elif step.bias_renormalized < step.bias_residual - 1e-12:
                ren_wins += 1
        assert res_wins > 0
        assert ren_wins > 0
