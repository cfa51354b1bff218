"""End-to-end acceptance checks, one test per criterion.

Each test prints a single ``ACCEPTANCE <n> PASS|FAIL ...`` line before it
asserts.  The two training experiments (5 and 6) take tens of minutes on one
core; deselect them with ``-m "not slow"`` for a quick pass.
"""
import time
from pathlib import Path

import numpy as np
import pytest

from mamlrk import diffengine as ad
from mamlrk.harness import ExperimentConfig, run_experiment
from mamlrk.harness.cli import main as cli_main
from mamlrk.harness.experiments import TEST_ID_OFFSET, evaluate_navigation, sample_goals, streams
from mamlrk.models import NAVIGATION_POLICY, REGRESSION_NET, forward, init_params, mse_loss
from mamlrk.rkmeta import (
    FIELDS,
    PRESET_NAMES,
    TaskData,
    generic_rk2,
    meta_step,
    order_check,
    parse_tableau,
    preset,
    regression_binding,
    swapped_generic_rk2,
    validate,
)
from mamlrk.rlnav import NavTask, Surrogate, rollout_batch
from mamlrk.tasks import sample_sinusoid_batch, sample_sinusoid_task

RK2 = ("midpoint", "heun", "ralston", "itb")


@pytest.fixture
def report(capsys):
    def emit(n, ok, detail):
        with capsys.disabled():
            print(f"\nACCEPTANCE {n} {'PASS' if ok else 'FAIL'}: {detail}")

    return emit


def _sinusoid_task(rng, tid=0, shots=10):
    return TaskData.from_batch(tid, sample_sinusoid_batch(sample_sinusoid_task(rng, tid), shots, rng))


# 1 -------------------------------------------------------------------------


def _relu_pattern(net, P, x):
    """Signs of every hidden pre-activation, one row per parameter row of ``P``."""
    P = np.atleast_2d(P)
    h, start, signs = np.broadcast_to(x, (P.shape[0],) + x.shape), 0, []
    for fi, fo in zip(net.widths[:-2], net.widths[1:-1]):
        W = P[:, start : start + fi * fo].reshape(-1, fi, fo)
        b = P[:, start + fi * fo : start + fi * fo + fo]
        start += fi * fo + fo
        z = h @ W + b[:, None, :]
        signs.append((z > 0).reshape(P.shape[0], -1))
        h = np.maximum(z, 0.0)
    return np.concatenate(signs, axis=1)


def test_1_gradients_match_finite_differences(report):
    start = time.perf_counter()
    net = REGRESSION_NET
    g = ad.trace(lambda p, x, y: mse_loss(forward(net, p, x), y), net.n_params, x=(10, 1), y=(10, 1))
    eps = 1e-5
    worst_grad = worst_hvp = 0.0
    skipped = 0
    for i in range(50):
        rng = np.random.default_rng(100 + i)
        theta = rng.normal(0.0, 0.3, net.n_params)
        task = _sinusoid_task(rng, i)
        x, y = task.support_x, task.support_y
        inputs = {"x": x, "y": y}
        a = ad.gradient(g, theta, inputs).gradient
        base = _relu_pattern(net, theta, x)

        # central differences of an independent numpy loss, all coordinates at once;
        # a stencil that flips a ReLU straddles a kink and is not a valid reference
        E = np.eye(theta.size) * eps
        P = np.concatenate([theta + E, theta - E])
        L = ((forward(net, P, x) - y) ** 2).mean(axis=(1, 2))
        n = (L[: theta.size] - L[theta.size :]) / (2 * eps)
        smooth = (_relu_pattern(net, P, x) == base).all(axis=1)
        smooth = smooth[: theta.size] & smooth[theta.size :]
        skipped += int((~smooth).sum())
        floor = 1e-3 * np.abs(a).max()
        rel = np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
        worst_grad = max(worst_grad, rel[smooth].max())

        v = rng.normal(size=theta.size)
        step = eps
        while not (_relu_pattern(net, np.stack([theta + step * v, theta - step * v]), x) == base).all():
            step /= 4
        Hv = ad.hvp(g, theta, v, inputs)
        fd = (ad.gradient(g, theta + step * v, inputs).gradient - ad.gradient(g, theta - step * v, inputs).gradient) / (
            2 * step
        )
        worst_hvp = max(worst_hvp, np.abs(Hv - fd).max() / np.abs(Hv).max())
    elapsed = time.perf_counter() - start
    ok = worst_grad < 1e-6 and worst_hvp < 1e-5 and elapsed < 30
    report(
        1, ok,
        f"grad rel err {worst_grad:.2e} ({skipped} kink-straddling stencils of {50 * net.n_params} skipped), "
        f"hvp rel err {worst_hvp:.2e}, {elapsed:.1f} s",
    )
    assert ok


# 2 -------------------------------------------------------------------------


def test_2_midpoint_meta_step_is_maml(report):
    oracles = pytest.importorskip("oracles")
    start = time.perf_counter()
    net = REGRESSION_NET
    binding = regression_binding(net)
    worst = 0.0
    for i in range(20):
        rng = np.random.default_rng(200 + i)
        theta = init_params(net, 200 + i).values
        tasks = [_sinusoid_task(rng, j) for j in range(int(rng.integers(1, 5)))]
        h = float(rng.uniform(0.001, 0.05))
        ours = meta_step(theta, tasks, preset("midpoint"), h, "differentiate", binding)
        ref = oracles.maml_step(
            net.widths, theta, [(t.support_x, t.support_y, t.query_x, t.query_y) for t in tasks], h / 2, h
        )
        worst = max(worst, np.abs(ours - ref).max())
    elapsed = time.perf_counter() - start
    ok = worst <= 1e-12 and elapsed < 10
    report(2, ok, f"max |ours - MAML| {worst:.2e} over 20 instances, {elapsed:.1f} s")
    assert ok


# 3 -------------------------------------------------------------------------


def test_3_local_error_orders(report):
    start = time.perf_counter()
    fld = FIELDS["linear"]
    steps = np.logspace(-1, -3, 7)
    orders = {}
    for name in (*RK2, "generic:0.3", "generic:2.0", "euler"):
        orders[name] = order_check(fld, np.array([1.0]), parse_tableau(name), steps).order
    elapsed = time.perf_counter() - start
    ok = all(2.7 <= orders[n] <= 3.3 for n in orders if n != "euler")
    ok = ok and 1.8 <= orders["euler"] <= 2.2 and elapsed < 5
    detail = ", ".join(f"{n} {p:.3f}" for n, p in orders.items())
    report(3, ok, f"{detail}; {elapsed:.2f} s")
    assert ok


# 4 -------------------------------------------------------------------------


def test_4_tableau_validation(report):
    start = time.perf_counter()
    rng = np.random.default_rng(4)
    xs = rng.uniform(-10, 10, 100)
    failures = [n for n in PRESET_NAMES if validate(preset(n))]
    failures += [f"generic({x:.3g})" for x in xs if validate(generic_rk2(x))]
    swapped_rejected = all(validate(swapped_generic_rk2(x)) for x in xs if abs(x - 1.0) > 1e-3)
    elapsed = time.perf_counter() - start
    ok = not failures and swapped_rejected and elapsed < 1
    report(4, ok, f"{len(PRESET_NAMES)} presets + {xs.size} generic rows valid: {not failures}; "
           f"uncorrected row rejected: {swapped_rejected}; {elapsed:.3f} s")
    assert ok


# 5 -------------------------------------------------------------------------


@pytest.mark.slow
def test_5_regression_rk2_beats_pretraining(report):
    seeds = (0, 1, 2)
    finals = {name: [] for name in (*RK2, "euler")}
    longest = 0.0
    for name in finals:
        for seed in seeds:
            rec = run_experiment(ExperimentConfig(experiment="regression", tableau=name, seed=seed))
            finals[name].append(rec.final)
            longest = max(longest, rec.wall_clock)
    means = {n: float(np.mean(v)) for n, v in finals.items()}
    ok = all(means[n] <= 0.5 for n in RK2) and means["euler"] >= 1.5 and longest < 15 * 60
    detail = ", ".join(f"{n} {m:.3f}" for n, m in means.items())
    report(5, ok, f"post-adaptation MSE (3 seeds) {detail}; slowest run {longest:.0f} s")
    assert ok


# 6 -------------------------------------------------------------------------


@pytest.mark.slow
def test_6_navigation_meta_training_helps(report):
    results = []
    longest = 0.0
    for seed in (0, 1, 2):
        cfg = ExperimentConfig(experiment="navigation", seed=seed).resolved()
        rec = run_experiment(cfg)
        longest = max(longest, rec.wall_clock)
        # same held-out goals and evaluation noise, starting from the untrained policy
        rngs = streams(seed)
        goals = sample_goals(rngs["test"], cfg.test_tasks, TEST_ID_OFFSET)
        rand = evaluate_navigation(cfg, init_params(NAVIGATION_POLICY, seed).values, goals, rngs["eval"])
        meta, base = rec.final, float(rand.mean(axis=1)[-1])
        gain = (meta - base) / abs(base)
        results.append((seed, meta, base, gain))
        if sum(r[3] >= 0.3 for r in results) >= 2:
            break
    passed = sum(r[3] >= 0.3 for r in results)
    ok = passed >= 2 and longest < 20 * 60
    detail = "; ".join(f"seed {s}: {m:.2f} vs {b:.2f} ({g:+.0%})" for s, m, b, g in results)
    report(6, ok, f"{detail}; slowest run {longest:.0f} s")
    assert ok


# 7 -------------------------------------------------------------------------


def test_7_reinforce_is_unbiased(report):
    from rl_oracle import GOAL, LINEAR_POLICY, exact_gradient, params

    start = time.perf_counter()
    n = 10_000
    p = params()
    rng = np.random.default_rng(7)
    tasks = [NavTask(GOAL, i) for i in range(n)]
    # one single-step episode per row; each row is one independent estimate
    batch = rollout_batch(LINEAR_POLICY, p, tasks, 1, 1, rng.spawn(n))
    draws = -Surrogate(LINEAR_POLICY, normalize=False).gradient(p, batch, baseline=False)
    mean = draws.mean(axis=0)
    se = draws.std(axis=0, ddof=1) / np.sqrt(n)
    exact = exact_gradient()
    live = se > 0
    z = np.abs(mean - exact)[live] / se[live]
    elapsed = time.perf_counter() - start
    ok = bool((z <= 3).all()) and np.array_equal(mean[~live], exact[~live]) and elapsed < 60
    report(7, ok, f"max |mean - exact| / SE {z.max():.2f} over {live.sum()} coordinates, {elapsed:.1f} s")
    assert ok


# 8 -------------------------------------------------------------------------


def test_8_cli_output_is_deterministic(tmp_path, report):
    config = Path(__file__).resolve().parents[1] / "configs" / "quick_regression.ini"
    outs = []
    for k in range(2):
        out = tmp_path / f"run{k}"
        assert cli_main(["run", str(config), "--out", str(out)]) == 0
        outs.append(out)
        assert cli_main(["order-check", "--out", str(out / "order")]) == 0
    names = sorted(str(p.relative_to(outs[0])) for p in outs[0].rglob("*") if p.suffix in (".csv", ".svg"))
    differing = [n for n in names if (outs[0] / n).read_bytes() != (outs[1] / n).read_bytes()]
    ok = bool(names) and not differing
    report(8, ok, f"{len(names)} CSV/SVG files compared, differing: {differing or 'none'}")
    assert ok
