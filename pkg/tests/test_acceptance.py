"""Acceptance suite: the properties and qualitative orderings the engine must
reproduce on the 5-domain toy suite, plus two protocol constants checked
exactly. Each criterion prints one PASS/FAIL line.
"""

import contextlib
import math
import sys
from pathlib import Path

import numpy as np
import pytest

from evomerge.datasets import DomainTemplate, dev_fraction, make_domains
from evomerge.evaluator import (
    EvalServeConfig,
    EvaluateTimeout,
    EvaluatorSession,
    InProcessEvaluator,
    ProtocolError,
    handshake,
)
from evomerge.evolution import EvaluationFailed, EvolveConfig, Population, evolve, step_generation
from evomerge.harness import run_method, score_on_tests, time_report
from evomerge.inference import (
    FisherState,
    GramState,
    MlpSpec,
    init_weights,
    log_likelihood_and_grad,
)
from evomerge.merging import (
    TaskVector,
    default_search_grid,
    fisher_merge,
    greedy_soup,
    landscape_slice,
    regmean_merge,
    simple_average,
    ties_merge,
)
from evomerge.tensor_store import F32, FlatVector, ParamSchema, TensorMap, load_checkpoint, save_checkpoint

from conftest import SUITE_SEEDS

MOCK = str(Path(__file__).parent / "mock_evaluator.py")


@contextlib.contextmanager
def criterion(tag: str, description: str):
    try:
        yield
    except BaseException:
        print(f"{tag} {description}: FAIL")
        raise
    print(f"{tag} {description}: PASS")


EVOLVER_PAIRS = (
    ("evolver", "simple", "strict"),
    ("fisher_evolver", "fisher", "ge"),
    ("regmean_evolver", "regmean", "ge"),
    ("ties_evolver", "ties", "ge"),
)

SUITE_METHODS = (
    "simple",
    "evolver",
    "fisher",
    "fisher_evolver",
    "regmean",
    "regmean_evolver",
    "ties",
    "ties_evolver",
)


@pytest.fixture(scope="session")
def suite_results(suite_config, suite_bundles, suite_evaluators):
    """Every suite method on every seed: test macro scores plus evolve traces."""
    scores = {m: {} for m in SUITE_METHODS}
    traces = []
    for seed in SUITE_SEEDS:
        bundle = suite_bundles[seed]
        evaluator = suite_evaluators[seed]
        for method in SUITE_METHODS:
            result, trace = run_method(suite_config, bundle, method, evaluator)
            scores[method][seed] = result.macro
            if trace is not None:
                traces.append((method, seed, trace))
    return scores, traces


def test_p1_greedy_monotonicity(suite_results):
    with criterion("P1", "greedy monotonicity of best fitness"):
        _, traces = suite_results
        assert traces, "suite produced no evolve runs"
        for method, seed, trace in traces:
            curve = trace.best_curve()
            for earlier, later in zip(curve, curve[1:]):
                assert later >= earlier, f"{method} seed {seed}: best fitness decreased"


def test_p2_degenerate_fixed_points(suite_config, suite_bundles, suite_evaluators):
    with criterion("P2", "F=0 / Cr=0 leave a 20-generation evolve bitwise unchanged"):
        bundle = suite_bundles[1]
        evaluator = suite_evaluators[1]
        for cfg in (
            EvolveConfig(generations=20, scale_factor=0.0, crossover_ratio=0.5, seed=11),
            EvolveConfig(generations=20, scale_factor=0.5, crossover_ratio=0.0, seed=11),
        ):
            pop = Population.from_members(bundle.members, seed=cfg.seed)
            final, trace, _ = evolve(pop, cfg, evaluator)
            assert sum(r.replacements for r in trace.records) == 0
            for got, want in zip(final.members, bundle.members):
                assert got.bitwise_equal(want)


def test_p3_qualitative_ordering(suite_results):
    with criterion("P3", "Table-2 ordering pattern on the toy suite"):
        scores, _ = suite_results
        for better, worse, kind in EVOLVER_PAIRS:
            mean_better = np.mean([scores[better][s] for s in SUITE_SEEDS])
            mean_worse = np.mean([scores[worse][s] for s in SUITE_SEEDS])
            if kind == "strict":
                assert mean_better > mean_worse, f"mean {better} <= mean {worse}"
            else:
                assert mean_better >= mean_worse, f"mean {better} < mean {worse}"
            per_seed_wins = sum(
                (scores[better][s] > scores[worse][s])
                if kind == "strict"
                else (scores[better][s] >= scores[worse][s])
                for s in SUITE_SEEDS
            )
            assert per_seed_wins >= 4, f"{better} vs {worse}: only {per_seed_wins}/5 seeds ordered"


def test_p4_fisher_reductions(suite_config, suite_bundles):
    with criterion("P4", "Fisher reductions (equal diagonals, gradient check)"):
        # equal Fisher diagonals cancel algebraically; entries sit well above
        # the 1e-8 denominator floor so the reduction is exact to 1e-6
        bundle = suite_bundles[1]
        models = bundle.members[:3]
        rng = np.random.default_rng(44)
        diag_values = rng.uniform(0.05, 2.0, models[0].dim).astype(F32)
        diag = FisherState(FlatVector(models[0].schema, diag_values), 1)
        merged = fisher_merge(models, [diag] * 3)
        averaged = simple_average(models)
        np.testing.assert_allclose(merged.values, averaged.values, atol=1e-6)

        # the captured per-model Fisher is valid merge input: non-negative and
        # reproduced by the per-coordinate weighted-mean formula
        captured = bundle.fishers[:3]
        assert all(np.all(fs.diagonal.values >= 0) for fs in captured)
        merged_real = fisher_merge(models, captured)
        f = np.stack([fs.diagonal.values.astype(np.float64) for fs in captured])
        theta = np.stack([m.values.astype(np.float64) for m in models])
        expected = (f * theta).mean(axis=0) / (f.mean(axis=0) + 1e-8)
        np.testing.assert_allclose(merged_real.values, expected.astype(F32), atol=1e-6)

        # gradients behind the Fisher match central finite differences
        spec = MlpSpec((3, 6, 6, 4))
        assert spec.param_schema().total_dim <= 500
        w_rng = np.random.default_rng(45)
        weights = FlatVector(spec.param_schema(), w_rng.normal(0, 0.5, spec.param_schema().total_dim).astype(F32))
        x = w_rng.normal(0, 1, 3)
        label = 2
        _, grad = log_likelihood_and_grad(spec, weights, x, label)

        def independent_logp(values64):
            h = x.astype(np.float64)
            schema = spec.param_schema()
            for li in range(spec.n_layers):
                ws = schema.slot(spec.weight_name(li))
                bs = schema.slot(spec.bias_name(li))
                wm = values64[ws.offset : ws.offset + ws.size].reshape(ws.shape)
                bv = values64[bs.offset : bs.offset + bs.size]
                z = wm @ h + bv
                h = np.tanh(z) if li < spec.n_layers - 1 else z
            shifted = h - h.max()
            return float(shifted[label] - np.log(np.exp(shifted).sum()))

        base = weights.values.astype(np.float64)
        step = 1e-4
        fd = np.zeros_like(grad)
        for j in range(len(base)):
            plus, minus = base.copy(), base.copy()
            plus[j] += step
            minus[j] -= step
            fd[j] = (independent_logp(plus) - independent_logp(minus)) / (2 * step)
        denom = np.maximum(np.abs(fd), np.abs(grad))
        mask = denom > 1e-8
        assert (np.abs(grad - fd)[mask] / denom[mask]).max() < 1e-4


def test_p5_regmean_optimality():
    with criterion("P5", "regmean matches stacked least squares and is idempotent"):
        rng = np.random.default_rng(46)
        in_dim, out_dim = 5, 3
        schema = ParamSchema.from_shapes({"layer0.weight": (out_dim, in_dim)})
        models, grams, xs, ws = [], [], [], []
        for _ in range(3):
            w = rng.normal(0, 1, (out_dim, in_dim))
            x = rng.normal(0, 1, (60, in_dim))
            models.append(FlatVector(schema, w.reshape(-1).astype(F32)))
            grams.append(GramState({"layer0.weight": x.T @ x}, 60))
            xs.append(x)
            ws.append(models[-1].values.reshape(out_dim, in_dim).astype(np.float64).T)
        merged = regmean_merge(models, grams, alpha=1.0)
        lhs = sum(x.T @ x for x in xs)
        rhs = sum(x.T @ x @ w for x, w in zip(xs, ws))
        direct = np.linalg.solve(lhs, rhs)
        got = merged.values.reshape(out_dim, in_dim).astype(np.float64).T
        np.testing.assert_allclose(got, direct, atol=1e-4)

        same = regmean_merge([models[0]] * 3, [grams[0]] * 3, alpha=0.9)
        np.testing.assert_allclose(same.values, models[0].values, atol=1e-5)


def test_p6_ties_oracle():
    with criterion("P6", "sign-consensus merge matches the brute-force oracle"):
        def oracle(models, base, k, lam):
            d = base.values.shape[0]
            base64 = base.values.astype(np.float64)
            taus = [m.values.astype(np.float64) - base64 for m in models]
            keep = math.ceil(k * d)
            trimmed = []
            for tau in taus:
                ranked = sorted(range(d), key=lambda j: (-abs(tau[j]), j))[:keep]
                t = np.zeros(d)
                for j in ranked:
                    t[j] = tau[j]
                trimmed.append(t)
            out = np.zeros(d)
            for j in range(d):
                total = sum(t[j] for t in trimmed)
                sign = 0.0 if total == 0.0 else math.copysign(1.0, total)
                picked = [t[j] for t in trimmed if t[j] != 0.0 and math.copysign(1.0, t[j]) == sign]
                if sign != 0.0 and picked:
                    out[j] = sum(picked) / len(picked)
            return (base64 + lam * out).astype(F32)

        schema = ParamSchema.from_shapes({"w": (10,)})
        rng = np.random.default_rng(47)
        for trial in range(200):
            k = float(rng.choice([0.1, 0.2, 0.3, 0.5, 0.7, 1.0]))
            lam = float(rng.choice([0.5, 1.0, 1.5]))
            base = FlatVector(schema, rng.normal(0, 1, 10).astype(F32))
            models = [FlatVector(schema, rng.normal(0, 1, 10).astype(F32)) for _ in range(3)]
            got = ties_merge(models, base, trim_fraction=k, rescale=lam)
            np.testing.assert_array_equal(got.values, oracle(models, base, k, lam))

        # identical task vectors with k=1 give theta_pre + lambda*tau exactly
        base = FlatVector(schema, rng.normal(0, 1, 10).astype(F32))
        model = FlatVector(schema, (base.values.astype(np.float64) + rng.normal(0, 0.5, 10)).astype(F32))
        lam = 1.5
        got = ties_merge([model, model, model], base, trim_fraction=1.0, rescale=lam)
        tau = model.values.astype(np.float64) - base.values.astype(np.float64)
        expected = (base.values.astype(np.float64) + lam * tau).astype(F32)
        np.testing.assert_array_equal(got.values, expected)


def test_p7_greedy_soup_floor(suite_bundles, suite_evaluators):
    with criterion("P7", "greedy soup never scores below the best single model"):
        for seed in SUITE_SEEDS:
            bundle = suite_bundles[seed]
            evaluator = suite_evaluators[seed]
            soup = greedy_soup(bundle.members, evaluator)
            soup_score = evaluator.evaluate(soup).score
            best_single = max(evaluator.evaluate(m).score for m in bundle.members)
            assert soup_score >= best_single, f"seed {seed}: soup {soup_score} < best {best_single}"


def test_p8_protocol_constants():
    with criterion("P8", "default coefficient grid and F/Cr defaults"):
        grid = default_search_grid()
        assert len(grid) == 17
        assert list(grid) == [
            0.10, 0.15, 0.20, 0.25, 0.30, 0.35, 0.40, 0.45, 0.50,
            0.55, 0.60, 0.65, 0.70, 0.75, 0.80, 0.85, 0.90,
        ]
        cfg = EvolveConfig()
        assert cfg.scale_factor == 0.5
        assert cfg.crossover_ratio == 0.5


def test_p9_landscape_identity(suite_config, suite_bundles):
    with criterion("P9", "landscape cells (1,0) and (0,0) equal direct evaluations"):
        bundle = suite_bundles[1]
        tau1 = TaskVector.from_pair(bundle.theta_pre, bundle.members[0])
        tau2 = TaskVector.from_pair(bundle.theta_pre, bundle.members[1])
        evaluator = InProcessEvaluator(
            suite_config.model,
            [bundle.split.domains[0].dev, bundle.split.domains[1].dev],
        )
        grid = landscape_slice(bundle.theta_pre, tau1, tau2, [0.0, 1.0], [0.0, 1.0], evaluator)
        assert grid.scores[1, 0] == evaluator.evaluate(bundle.members[0]).score
        assert grid.scores[0, 0] == evaluator.evaluate(bundle.theta_pre).score
        assert grid.scores[0, 1] == evaluator.evaluate(bundle.members[1]).score


def test_p10_time_model():
    with criterion("P10", "doubling dev length scales eval time and the G*N*(t1+L*t2) fit holds"):
        model = MlpSpec((2, 16, 16, 6))
        members = [init_weights(model, s) for s in range(5)]

        def timed(n_dev):
            split = make_domains(
                5,
                DomainTemplate(n_classes=6, radius=2.0, noise=0.25, n_train=2, n_dev=n_dev, n_test=2),
                seed=9,
            )
            evaluator = InProcessEvaluator(model, split.dev_batches())
            pop = Population.from_members(members, seed=3)
            _, trace, _ = evolve(pop, EvolveConfig(generations=6, seed=3), evaluator)
            return trace, evaluator.n_examples("dev")

        timed(1000), timed(2000)  # warm-up pass for allocator and caches
        ratios = []
        fit_ratios = []
        for _ in range(5):
            trace_a, len_a = timed(1000)
            trace_b, len_b = timed(2000)
            ratios.append(trace_b.total_eval_ms() / trace_a.total_eval_ms())
            fitted = time_report(trace_a, len_a, population=5, generations=6)
            predicted = fitted.predict_ms(dev_examples=len_b)
            measured = trace_b.total_mutate_ms() + trace_b.total_eval_ms()
            fit_ratios.append(predicted / measured)
        ratio = sorted(ratios)[2]
        fit_ratio = sorted(fit_ratios)[2]
        assert 1.5 <= ratio <= 2.5, f"median eval-time ratio {ratio:.2f} outside [1.5, 2.5]"
        assert 0.5 <= fit_ratio <= 2.0, f"predicted/measured {fit_ratio:.2f} outside x2"


def test_p11_dev_length_trend(suite_config, suite_bundles):
    with criterion("P11", "evolver score non-decreasing in dev fraction and above baseline"):
        fractions = (0.25, 0.5, 1.0)
        per_fraction = {f: [] for f in fractions}
        baselines = []
        for seed in SUITE_SEEDS:
            bundle = suite_bundles[seed]
            full_eval = InProcessEvaluator(
                suite_config.model, bundle.split.dev_batches(), bundle.split.test_batches()
            )
            baseline, _ = run_method(suite_config, bundle, "simple", full_eval)
            baselines.append(baseline.macro)
            for frac in fractions:
                split = dev_fraction(bundle.split, frac)
                evaluator = InProcessEvaluator(suite_config.model, split.dev_batches())
                pop = Population.from_members(bundle.members, seed=suite_config.evolve.seed + seed)
                cfg = EvolveConfig(generations=30, seed=suite_config.evolve.seed + seed)
                _, _, artifact = evolve(pop, cfg, evaluator)
                per_fraction[frac].append(score_on_tests(suite_config, bundle, artifact).macro)
        means = {f: float(np.mean(per_fraction[f])) for f in fractions}
        baseline_mean = float(np.mean(baselines))
        assert means[0.25] <= means[0.5] <= means[1.0], f"trend not monotone: {means}"
        for frac in fractions:
            assert means[frac] > baseline_mean, f"evolver at {frac} does not beat the baseline"


def test_p12_format_and_protocol(tmp_path, suite_config, suite_bundles):
    with criterion("P12", "bit-exact checkpoints and wire-protocol conformance"):
        # checkpoint round trip is byte-identical
        rng = np.random.default_rng(48)
        tensors = {
            "layer0.weight": rng.normal(0, 1, (4, 3)).astype(F32),
            "layer0.bias": rng.normal(0, 1, 4).astype(F32),
        }
        tmap = TensorMap(tensors, metadata={"note": "acceptance"})
        path_a, path_b = tmp_path / "a.st", tmp_path / "b.st"
        save_checkpoint(tmap, path_a)
        save_checkpoint(load_checkpoint(path_a), path_b)
        assert path_a.read_bytes() == path_b.read_bytes()

        # misbehaving evaluators produce the specified errors without
        # corrupting the population
        spec = MlpSpec((2, 3))
        members = [init_weights(spec, s) for s in range(4)]

        def fresh_pop():
            pop = Population.from_members(members, seed=5)
            pop.fitness = [0.5] * 4
            return pop

        # mid-evolution, protocol violations surface wrapped with the failing
        # candidate's index and never touch the population
        for mode, match in [
            ("malformed", "malformed"),
            ("out-of-range", "score out of range"),
            ("bad-id", "does not match"),
        ]:
            pop = fresh_pop()
            with handshake([sys.executable, MOCK, mode]) as session:
                with pytest.raises(EvaluationFailed) as excinfo:
                    step_generation(pop, EvolveConfig(seed=6), session)
                assert isinstance(excinfo.value.cause, ProtocolError)
                assert match in str(excinfo.value.cause)
            for got, want in zip(pop.members, members):
                assert got.bitwise_equal(want)
            assert pop.fitness == [0.5] * 4

        pop = fresh_pop()
        session = EvaluatorSession([sys.executable, MOCK, "hang"], evaluate_timeout=0.4)
        try:
            with pytest.raises(EvaluationFailed) as excinfo:
                step_generation(pop, EvolveConfig(seed=7), session)
            assert isinstance(excinfo.value.cause, EvaluateTimeout)
        finally:
            session.close()
        for got, want in zip(pop.members, members):
            assert got.bitwise_equal(want)

        # in-process fitness and an external process wrapping the same model
        # produce identical evolve trajectories
        serve_config = EvalServeConfig(
            model=suite_config.model,
            n_domains=suite_config.n_domains,
            template=suite_config.template,
            data_seed=1,
            n_ood=suite_config.n_ood,
        )
        config_path = tmp_path / "serve.json"
        config_path.write_text(serve_config.to_json())
        bundle = suite_bundles[1]
        in_process = serve_config.build()
        cfg = EvolveConfig(generations=3, seed=21)
        pop_a, trace_a, best_a = evolve(
            Population.from_members(bundle.members, seed=21), cfg, in_process
        )
        command = [sys.executable, "-m", "evomerge", "serve", "--eval-config", str(config_path)]
        with handshake(command) as session:
            pop_b, trace_b, best_b = evolve(
                Population.from_members(bundle.members, seed=21), cfg, session
            )
        assert best_a.bitwise_equal(best_b)
        assert pop_a.fitness == pop_b.fitness
        for a, b in zip(pop_a.members, pop_b.members):
            assert a.bitwise_equal(b)
        assert [r.best for r in trace_a.records] == [r.best for r in trace_b.records]
