import json
import math
import threading

import numpy as np
import pytest

from dcis.rope import LAMBDA_MIN, ScalingFactors
from dcis.search import (
    ObjectiveError,
    SearchConfig,
    SearchConfigError,
    SearchTrace,
    Segment,
    UnsupportedDimensionError,
    dcis_search,
    evaluate_segment,
    evo_budget,
    incremental_values,
    make_objective,
    search_budget,
    segment_schedule,
    select_increments,
    update_step,
)


def grid_oracle(trace, init, target):
    """Per-coordinate brute force over each coordinate's final-layer lattice.

    The factor value before the final step is rebuilt by summing the recorded
    increments of every segment covering the coordinate; the oracle then picks
    the lattice point minimising (lambda + v - t)^2 on its own.
    """
    lam = np.array(init, dtype=float)
    out = np.empty_like(lam)
    steps = np.empty_like(lam)
    reachable = np.zeros(lam.shape, dtype=bool)
    for rec in trace.steps:
        cover = slice(rec.segment_start, rec.segment_start + rec.width)
        if rec.width == 1:
            i = rec.segment_start
            cand = [max(lam[i] + v, LAMBDA_MIN) for v in rec.values]
            errs = [(c - target[i]) ** 2 for c in cand]
            out[i] = cand[int(np.argmin(errs))]
            steps[i] = rec.values[1] - rec.values[0]
            reachable[i] = rec.values[0] <= target[i] - lam[i] <= rec.values[-1]
        if rec.chosen is not None:
            lam[cover] = np.maximum(lam[cover] + rec.chosen, LAMBDA_MIN)
    return out, steps, reachable


class TestSchedule:
    def test_f8_order(self):
        sched = segment_schedule(8)
        assert [list(layer) for layer in sched.layers] == [
            [(4, 4), (0, 4)],
            [(6, 2), (4, 2), (2, 2), (0, 2)],
            [(7, 1), (6, 1), (5, 1), (4, 1), (3, 1), (2, 1), (1, 1), (0, 1)],
        ]
        assert len(sched) == 14

    def test_f2(self):
        assert [list(layer) for layer in segment_schedule(2).layers] == [[(1, 1), (0, 1)]]

    @pytest.mark.parametrize("F", [2, 4, 8, 16, 32, 64, 128])
    def test_counts_and_tiling(self, F):
        sched = segment_schedule(F)
        assert len(sched) == 2 * F - 2
        width = F // 2
        for layer in sched.layers:
            assert all(s.width == width for s in layer)
            starts = [s.start for s in layer]
            assert starts == sorted(starts, reverse=True)
            covered = sorted(i for s in layer for i in range(s.start, s.stop))
            assert covered == list(range(F))
            width //= 2
        assert width == 0

    def test_f64_has_126_segments(self):
        assert len(segment_schedule(64)) == 126

    @pytest.mark.parametrize("F", [0, 1, 3, 6, 12, 100])
    def test_rejects_non_power_of_two(self, F):
        with pytest.raises(UnsupportedDimensionError):
            segment_schedule(F)

    def test_children(self):
        assert Segment(4, 4).children() == (Segment(6, 2), Segment(4, 2))


class TestIncrementalValues:
    def test_default_range(self):
        v = incremental_values((-5, 5), 10)
        assert v[0] == -5 and v[-1] == 5 and len(v) == 10
        np.testing.assert_allclose(np.diff(v), 10 / 9, rtol=1e-12)

    def test_degenerate(self):
        assert incremental_values((0, 0), 5).tolist() == [0.0] * 5

    def test_three(self):
        assert incremental_values((-3, 3), 3).tolist() == [-3.0, 0.0, 3.0]

    def test_count_error(self):
        with pytest.raises(SearchConfigError):
            incremental_values((-1, 1), 1)


class TestEvaluateSegment:
    f = ScalingFactors([1.0, 2.0, 3.0, 4.0])

    def test_zero_increment(self):
        obj = make_objective("separable_quadratic", target=[0.5, 0.5, 0.5, 0.5])
        assert evaluate_segment(obj, self.f, (2, 2), [0.0]).tolist() == [obj(self.f)]

    def test_constant(self):
        scores = evaluate_segment(lambda f: 7.0, self.f, (0, 4), [-1.0, 0.0, 2.0])
        assert scores.tolist() == [7.0, 7.0, 7.0]

    def test_quadratic_against_scalar(self):
        t = [1.5, 0.0, 2.0, 9.0]
        obj = make_objective("separable_quadratic", target=t)
        vals = [-3.0, -0.5, 0.25, 4.0]
        got = evaluate_segment(obj, self.f, (2, 2), vals)
        for v, s in zip(vals, got):
            lam = [1.0, 2.0, max(3.0 + v, LAMBDA_MIN), max(4.0 + v, LAMBDA_MIN)]
            assert s == pytest.approx(sum((a - b) ** 2 for a, b in zip(lam, t)), rel=1e-14)

    def test_input_not_mutated_and_outside_untouched(self):
        seen = []
        evaluate_segment(lambda f: seen.append(f.tolist()) or 0.0, self.f, (1, 1), [10.0])
        assert seen == [[1.0, 12.0, 3.0, 4.0]]
        assert self.f.tolist() == [1.0, 2.0, 3.0, 4.0]

    def test_clamp(self):
        seen = []
        evaluate_segment(lambda f: seen.append(f.tolist()) or 0.0, self.f, (0, 2), [-5.0])
        assert seen == [[LAMBDA_MIN, LAMBDA_MIN, 3.0, 4.0]]

    def test_failure_carries_context(self):
        def boom(f):
            raise RuntimeError("nan loss")

        with pytest.raises(ObjectiveError) as info:
            evaluate_segment(boom, self.f, (2, 2), [0.5])
        assert info.value.segment == (2, 2) and info.value.increment == 0.5
        assert "nan loss" in str(info.value)

    def test_out_of_bounds(self):
        with pytest.raises(ValueError):
            evaluate_segment(lambda f: 0.0, self.f, (3, 2), [0.0])


class TestUpdateStep:
    f = ScalingFactors([1.0, 1.0, 5.0, 5.0])

    def test_hand_trace(self):
        new, child = update_step(self.f, Segment(2, 2), [-3, 0, 3], [50, 10, 20], 3, 100, (-3, 3))
        assert new == self.f
        assert child == (-3.0, 3.0)

    def test_hand_trace_with_discards(self):
        new, child = update_step(self.f, Segment(2, 2), [-3, 0, 3], [200, 10, 150], 3, 100, (-3, 3))
        assert new == self.f
        assert child == (-3.0, 3.0)
        assert select_increments([-3, 0, 3], [200, 10, 150], 3, 100).discarded == (True, False, True)

    def test_best_applied_to_segment(self):
        new, child = update_step(self.f, Segment(2, 2), [-3, 0, 3], [50, 40, 20], 3, 100, (-3, 3))
        assert new.tolist() == [1.0, 1.0, 8.0, 8.0]
        assert child == (0.0, 6.0)

    def test_all_discarded_keeps_parent(self):
        new, child = update_step(self.f, Segment(0, 2), [-1, 0, 1], [101, 500, math.inf], 3, 100, (-7, 2))
        assert new == self.f and child == (-7.0, 2.0)

    def test_top_third_ceiling(self):
        vals = incremental_values((-5, 5), 10)
        scores = [abs(v - 1.2) for v in vals]
        sel = select_increments(vals, scores, 10, 100)
        assert len(sel.top) == 4
        _, child = update_step(self.f, Segment(0, 4), vals, scores, 10, 100, (-5, 5))
        step = 10 / 9
        assert child[0] == pytest.approx(min(sel.top) - step)
        assert child[1] == pytest.approx(max(sel.top) + step)

    def test_tie_break_smallest_magnitude_then_negative(self):
        assert select_increments([-2, -1, 1, 2], [3, 3, 3, 3], 4, 100).chosen == -1
        assert select_increments([-2, 1, 2], [3, 5, 3], 3, 100).chosen == -2

    def test_nan_scores_discarded(self):
        sel = select_increments([-1, 0, 1], [math.nan, 4.0, 5.0], 3, 100)
        assert sel.discarded == (True, False, False) and sel.chosen == 0


class TestBudget:
    def test_reference_budgets(self):
        assert search_budget(128, 10) == 1260
        assert evo_budget(40, 64) == 2560
        assert search_budget(16, 10) == 140


class TestConfig:
    def test_c_too_small(self):
        with pytest.raises(SearchConfigError):
            SearchConfig(ScalingFactors.ones(4), increments_per_segment=2)

    def test_range_order(self):
        with pytest.raises(SearchConfigError):
            SearchConfig(ScalingFactors.ones(4), initial_range=(3, -3))


class TestSearch:
    def test_constant_objective_keeps_factors(self):
        init = ScalingFactors([1.0, 2.0, 0.5, 4.0, 3.0, 3.0, 1.0, 8.0], "yarn")
        for C in (3, 11):
            f, trace = dcis_search(lambda f: 1.0, SearchConfig(init, increments_per_segment=C))
            assert f == init and f.provenance == "dcis"
            assert all(s.chosen == 0.0 for s in trace.steps)

    def test_budget_f64(self):
        rng = np.random.default_rng(0)
        obj = make_objective("separable_quadratic", target=rng.uniform(1, 5, 64))
        _, trace = dcis_search(obj, SearchConfig(ScalingFactors.ones(64)))
        assert trace.total_evaluations == 1260 == search_budget(128, 10)
        assert len(trace.steps) == 126

    def test_budget_with_discards_still_counts(self):
        obj = make_objective("separable_quadratic", target=[50.0] * 8)
        _, trace = dcis_search(obj, SearchConfig(ScalingFactors.ones(8), increments_per_segment=5))
        assert trace.total_evaluations == 14 * 5
        assert any(any(s.discarded) for s in trace.steps)

    def test_non_power_of_two_rejected(self):
        with pytest.raises(UnsupportedDimensionError):
            dcis_search(lambda f: 0.0, SearchConfig(ScalingFactors.ones(6)))

    def test_child_ranges_propagate(self):
        obj = make_objective("separable_quadratic", target=[2.0, 2.5, 3.0, 1.0, 4.0, 4.0, 0.5, 2.0])
        _, trace = dcis_search(obj, SearchConfig(ScalingFactors.ones(8), increments_per_segment=6))
        by_seg = {(s.segment_start, s.width): s for s in trace.steps}
        for rec in trace.steps:
            if rec.width == 4:
                assert rec.range == [-5.0, 5.0]
            if rec.width > 1:
                half = rec.width // 2
                for child in ((rec.segment_start + half, half), (rec.segment_start, half)):
                    assert by_seg[child].range == rec.child_range
            step = (rec.range[1] - rec.range[0]) / 5
            assert rec.range[0] - step - 1e-12 <= rec.child_range[0]
            assert rec.child_range[1] <= rec.range[1] + step + 1e-12

    def test_objective_monotone_when_zero_sampled(self):
        rng = np.random.default_rng(5)
        obj = make_objective("separable_quadratic", target=rng.uniform(0.5, 6, 16))
        init = ScalingFactors(rng.uniform(1, 4, 16))
        _, trace = dcis_search(obj, SearchConfig(init, increments_per_segment=11))
        prev = obj(init)
        for rec in trace.steps:
            if 0.0 in rec.values:
                assert rec.objective <= prev
            prev = rec.objective

    @pytest.mark.parametrize("F", [8, 64])
    def test_grid_oracle(self, F):
        rng = np.random.default_rng(F)
        for _ in range(5):
            init = ScalingFactors(rng.uniform(1, 8, F))
            target = init.lambdas + rng.uniform(-0.25, 0.25, F)
            f, trace = dcis_search(make_objective("separable_quadratic", target=target), SearchConfig(init))
            oracle, steps, reachable = grid_oracle(trace, init.lambdas, target)
            assert np.all(np.abs(f.lambdas - oracle) <= steps)
            assert reachable.mean() > 0.9
            err = np.abs(f.lambdas - target)[reachable]
            assert np.all(err <= steps[reachable] / 2 + 1e-12)

    def test_failure_attaches_trace(self):
        calls = []

        def flaky(f):
            calls.append(1)
            if len(calls) > 25:
                raise FloatingPointError("diverged")
            return 1.0

        with pytest.raises(ObjectiveError) as info:
            dcis_search(flaky, SearchConfig(ScalingFactors.ones(8), n_workers=1))
        assert len(info.value.trace.steps) == 2

    def test_threads_give_same_trace(self):
        rng = np.random.default_rng(9)
        obj = make_objective("separable_quadratic", target=rng.uniform(0.5, 4, 16))
        lock = threading.Lock()
        threads = set()

        def tracking(f):
            with lock:
                threads.add(threading.get_ident())
            return obj(f)

        cfg = dict(initial_factors=ScalingFactors.ones(16))
        f1, t1 = dcis_search(tracking, SearchConfig(**cfg, n_workers=1))
        f4, t4 = dcis_search(tracking, SearchConfig(**cfg, n_workers=4))
        assert f1 == f4 and t1.to_jsonl() == t4.to_jsonl()

    def test_env_controls_workers(self, monkeypatch):
        monkeypatch.setenv("DCIS_NUM_THREADS", "bogus")
        with pytest.raises(SearchConfigError):
            dcis_search(lambda f: 0.0, SearchConfig(ScalingFactors.ones(4)))


class TestTrace:
    def test_jsonl_round_trip(self, tmp_path):
        obj = make_objective("separable_quadratic", target=[3.0, 1.0, 2.0, 60.0])
        _, trace = dcis_search(obj, SearchConfig(ScalingFactors.ones(4), increments_per_segment=4))
        path = tmp_path / "trace.jsonl"
        trace.save(path)
        lines = path.read_text().splitlines()
        assert len(lines) == 6
        rec = json.loads(lines[0])
        for key in ("layer", "segment_start", "width", "values", "scores", "discarded", "chosen", "child_range", "cumulative_evals"):
            assert key in rec
        back = SearchTrace.load(path)
        assert back == trace and back.to_jsonl() == trace.to_jsonl()

    def test_deterministic(self):
        obj = make_objective("separable_quadratic", target=np.linspace(0.5, 3, 32))
        runs = [dcis_search(obj, SearchConfig(ScalingFactors.ones(32)))[1].to_jsonl() for _ in range(2)]
        assert runs[0] == runs[1]


class TestMakeObjective:
    def test_quadratic_minimum(self):
        obj = make_objective("separable_quadratic", target=[1.0, 2.5])
        assert obj(ScalingFactors([1.0, 2.5])) == 0.0

    def test_custom(self):
        obj = make_objective("custom", fn=lambda f: f.lambdas.sum(), name="sum")
        assert obj.name == "sum" and obj(ScalingFactors([1, 2])) == 3.0

    @pytest.mark.parametrize("kind, params", [("toy_ppl", {}), ("separable_quadratic", {}), ("custom", {}), ("nope", {})])
    def test_missing_params(self, kind, params):
        with pytest.raises(SearchConfigError):
            make_objective(kind, **params)
