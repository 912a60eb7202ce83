"""Acceptance criteria, one test each.

Every test prints a single ``PASS``/``FAIL`` line with the measured values.
Run standalone with ``python3 tests/test_acceptance.py`` or through pytest
(the lines bypass output capture).
"""

import math
import sys
import time
from dataclasses import replace
from pathlib import Path

import mpmath
import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from annomap.corpus import FoldSpec, preprocess, sample_enrollment
from annomap.crowd_sim import SimConfig, perception_model, simulate
from annomap.harness import ExperimentConfig, pretrain, run_experiment, write_records
from annomap.mapper import AGG_GROUND_TRUTH, AGG_PT, METHODS, PT_MAPPED, PT_RANDOM, map_similar
from annomap.metrics import ccc, entropy_log2, paired_t_test, pcc
from annomap.network import ModelConfig, batch_loss_aggregate, batch_loss_individual, init_model

from gradcheck import numeric_grads, relative_error
from oracles import lin_ccc, paired_t, pearson, shannon_bits

CONFIGS = Path(__file__).resolve().parents[1] / "configs"
DIMS = ("activation", "valence")
_capture = None


@pytest.fixture(autouse=True)
def _visible_output(capsys):
    global _capture
    _capture = capsys
    yield
    _capture = None


def verdict(number: int, ok: bool, detail: str) -> None:
    line = f"{'PASS' if ok else 'FAIL'} criterion {number}: {detail}"
    if _capture is not None:
        with _capture.disabled():
            print("\n" + line)
    else:
        print(line)
    assert ok, line


@pytest.fixture(scope="module")
def benchmark():
    cfg = ExperimentConfig.load(CONFIGS / "benchmark.json")
    start = time.perf_counter()
    report = run_experiment(cfg)
    return cfg, report, time.perf_counter() - start


# ---------------------------------------------------------------------------


def _t_p_value(t: float, df: int) -> float:
    """Two-sided p from the regularized incomplete beta, in arbitrary precision."""
    x = df / (df + t * t)
    return float(mpmath.betainc(df / 2, 0.5, 0, x, regularized=True))


def test_criterion_1_metric_oracles():
    start = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst = {"ccc": 0.0, "pcc": 0.0, "entropy": 0.0, "t": 0.0, "p": 0.0}
    for _ in range(1000):
        n = int(rng.integers(2, 50))
        x = rng.normal(size=n) * rng.uniform(0.1, 3)
        y = 0.5 * x + rng.normal(size=n) + rng.uniform(-1, 1)
        worst["ccc"] = max(worst["ccc"], abs(ccc(x, y) - lin_ccc(x.tolist(), y.tolist())))
        worst["pcc"] = max(worst["pcc"], abs(pcc(x, y) - pearson(x.tolist(), y.tolist())))
        counts = rng.integers(0, 6, size=int(rng.integers(1, 40)))
        counts[0] += 1
        worst["entropy"] = max(worst["entropy"], abs(entropy_log2(counts.tolist()) - shannon_bits(counts.tolist())))
        res = paired_t_test(x, y)
        t, df = paired_t(x.tolist(), y.tolist())
        worst["t"] = max(worst["t"], abs(res.t_statistic - t) / max(1.0, abs(t)))
        worst["p"] = max(worst["p"], abs(res.p_value - _t_p_value(t, df)))
    hand = [
        ccc([0.1, 0.5, -0.3], [0.1, 0.5, -0.3]) == 1.0,
        ccc([0, 0, 0], [0, 0, 0]) == 0.0,
        abs(ccc([1, 2, 3], [2, 3, 4]) - 4 / 7) < 1e-15,
        ccc([1, 2, 3], [3, 2, 1]) == -1.0,
    ]
    elapsed = time.perf_counter() - start
    ok = max(worst.values()) <= 1e-9 and all(hand) and elapsed < 5
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    verdict(1, ok, f"max abs error ({detail}) <= 1e-9; hand CCC examples {sum(hand)}/4 exact; {elapsed:.1f}s < 5s")


def test_criterion_2_gradients():
    start = time.perf_counter()
    worst_agg = worst_ind = 0.0
    for seed in range(5):
        params = init_model(ModelConfig(8, ("a", "b", "c"), 8, 0.2), seed)
        rng = np.random.default_rng(seed + 50)
        x, y = rng.normal(size=(8, 8)), rng.uniform(-1, 1, size=(8, 2))
        res = batch_loss_aggregate(params, x, y)
        num = numeric_grads(lambda p: batch_loss_aggregate(p, x, y).loss, params)
        worst_agg = max(worst_agg, max(relative_error(res.grads, num).values()))
        ids = ["a", "a", "a", "b", "b", "c", "c", "c"]
        res = batch_loss_individual(params, x, ids, y)
        num = numeric_grads(lambda p: batch_loss_individual(p, x, ids, y).loss, params)
        worst_ind = max(worst_ind, max(relative_error(res.grads, num).values()))
    elapsed = time.perf_counter() - start
    ok = worst_agg <= 1e-5 and worst_ind <= 1e-5 and elapsed < 30
    verdict(2, ok, f"relative error aggregate {worst_agg:.1e}, individual {worst_ind:.1e} <= 1e-5; {elapsed:.1f}s < 30s")


def _recovery(model, bench, enrollment=30, seed=0):
    target = preprocess(bench.target, 30, scaling="declared")
    fold = FoldSpec(0, frozenset(target.sample_ids), frozenset())
    enroll = {t: sample_enrollment(target, fold, t, enrollment, seed) for t in target.annotator_ids}
    table = map_similar(model, enroll)
    rates = {}
    for d, dim in enumerate(DIMS):
        eligible = [t for t in target.annotator_ids if np.ptp(enroll[t].labels[:, d]) > 0]
        rates[dim] = float(np.mean([table.source_for(t, dim) == bench.planted[t] for t in eligible]))
    return rates


@pytest.mark.slow
def test_criterion_3_planted_recovery():
    start = time.perf_counter()
    cfg = ExperimentConfig.load(CONFIGS / "benchmark.json")
    bench = simulate(cfg.sim)
    trained = pretrain(bench.source, cfg, 0, "declared").ia
    noisy = _recovery(trained, bench)

    quiet_sim = replace(cfg.sim, noise_sd=0.0, clone_noise_sd=0.0, feature_noise_sd=0.0)
    quiet = simulate(quiet_sim)
    exact = _recovery(perception_model(quiet.sources, quiet_sim), quiet)
    trained_quiet = _recovery(pretrain(quiet.source, replace(cfg, sim=quiet_sim), 0, "declared").ia, quiet)
    elapsed = time.perf_counter() - start
    ok = min(noisy.values()) >= 0.5 and min(exact.values()) == 1.0 and elapsed < 300
    fmt = lambda r: "/".join(f"{v:.0%}" for v in r.values())  # noqa: E731
    verdict(3, ok, f"noisy recovery (trained) act/val {fmt(noisy)} >= 50% (chance 2%); "
                   f"zero-noise recovery (exact perceiver) {fmt(exact)} == 100% "
                   f"[trained zero-noise model: {fmt(trained_quiet)}]; {elapsed:.0f}s < 300s")  # fmt: skip


def _significantly_better(report, other, dim):
    test = next(t for t in report.significance if t["method"] == other and t["dimension"] == dim and t["metric"] == "ccc_ind")
    mapped = np.mean(report.values(PT_MAPPED, dim))
    return mapped > np.mean(report.values(other, dim)) and test["significant"] and test["mean_difference"] < 0, test


@pytest.mark.slow
def test_criterion_4_table_ordering(benchmark):
    cfg, report, elapsed = benchmark
    parts, ok = [], not report.errors
    for dim in DIMS:
        cells = len(report.values(PT_MAPPED, dim))
        ok &= cells == 30
        for other in (PT_RANDOM, AGG_PT):
            good, test = _significantly_better(report, other, dim)
            ok &= good
            parts.append(f"{dim[:3]} Mapped {np.mean(report.values(PT_MAPPED, dim)):.3f} vs {other} "
                         f"{np.mean(report.values(other, dim)):.3f} (p={test['p']:.1e}, df={test['df']})")  # fmt: skip
    verdict(4, ok, "; ".join(parts) + f"; 6 seeds x 5 folds in {elapsed:.0f}s")


@pytest.mark.slow
def test_criterion_5_rq3_plateau(benchmark):
    _, report, _ = benchmark
    table = {(r["n"], r["dimension"]): r["ccc_ind_mean"] for r in report.rq["rq3"]}
    gaps = {dim: abs(table[(30, dim)] - table[("all", dim)]) for dim in DIMS}
    ok = max(gaps.values()) <= 0.03
    verdict(5, ok, "; ".join(f"{d[:3]} CCC_ind N=30 {table[(30, d)]:.4f} vs ALL {table[('all', d)]:.4f} (gap {g:.4f})" for d, g in gaps.items())
            + " <= 0.03")  # fmt: skip


@pytest.mark.slow
def test_criterion_6_rq4_stability(benchmark):
    _, report, _ = benchmark
    rq4 = report.rq["rq4"]
    ref_ok = rq4["repetitions"] == 30 and abs(rq4["max_entropy_reference"] - 4.9069) <= 1e-3
    lower = {dim: rq4["mapped"][dim]["mean"] < rq4["random"][dim]["mean"] for dim in DIMS}
    ok = ref_ok and all(lower.values())
    verdict(6, ok, f"reference log2({rq4['repetitions']}) = {rq4['max_entropy_reference']:.4f} (4.9069 +- 1e-3); "
                   + "; ".join(f"{d[:3]} mapped {rq4['mapped'][d]['mean']:.3f} < random {rq4['random'][d]['mean']:.3f}" for d in DIMS))  # fmt: skip


@pytest.mark.slow
def test_criterion_7_oracle():
    cfg = ExperimentConfig.load(CONFIGS / "crowd.json")
    report = run_experiment(cfg)
    exact = all(r.ccc_agg == 1.0 for r in report.records if r.method == AGG_GROUND_TRUTH)
    parts, ok = [], exact and not report.errors
    for dim in DIMS:
        means = {m: np.mean(report.values(m, dim)) for m in METHODS}
        runner_up = max((m for m in METHODS if m != AGG_GROUND_TRUTH), key=means.get)
        ok &= means[AGG_GROUND_TRUTH] > means[runner_up]
        parts.append(f"{dim[:3]} oracle CCC_ind {means[AGG_GROUND_TRUTH]:.3f} > best other {runner_up} {means[runner_up]:.3f}")
    verdict(7, ok, f"oracle CCC_agg == 1.0 exactly in every cell: {exact}; " + "; ".join(parts)
            + f" (noisy crowd setting: label noise {cfg.sim.noise_sd}, {cfg.sim.target_k} annotators per target sample)")  # fmt: skip


@pytest.mark.slow
def test_criterion_8_determinism(benchmark, tmp_path):
    cfg, first, _ = benchmark
    second = run_experiment(cfg)
    write_records(first.records, tmp_path / "a.csv")
    write_records(second.records, tmp_path / "b.csv")
    a, b = (tmp_path / "a.csv").read_bytes(), (tmp_path / "b.csv").read_bytes()
    verdict(8, a == b and len(first.records) > 0, f"two run_experiment invocations -> records files of {len(a)} bytes, byte-identical: {a == b}")


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q", "-p", "no:cacheprovider"]))
