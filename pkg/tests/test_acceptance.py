"""Acceptance suite: one PASS/FAIL line per criterion.

Every criterion is checked at its stated tolerance. A criterion that does
not hold fails its test; nothing is relaxed to make it pass.
"""
import time

import numpy as np
import pytest

import conftest
from conftest import random_system
from ddstc import ddmpc, sim
from ddstc.experiment import collect_data, load_config, prepare_output_feedback, run_experiment
from ddstc.model import extended_system, observability_index, rho_oracle, simulate_step
from ddstc.trajectory import (collect_offline_data, generate_pe_input, hankel,
                              min_length_for_pe)
from ddstc.trigger_output import estimate_rho_bounds

SEEDS = range(20)
SIGMAS = (0.7, 0.8, 0.88, 0.95)


def report(n: int, ok: bool, detail: str, capsys) -> None:
    line = f"CRITERION {n}: {'PASS' if ok else 'FAIL'} ({detail})"
    conftest.ACCEPTANCE_LINES.append(line)
    with capsys.disabled():
        print(f"\n{line}")
    assert ok, line


def _fleet(cfg, data, setup=None):
    out = []
    for s in SEEDS:
        res = run_experiment(cfg.with_overrides(seed=s), data, setup)
        out.append((res, sim.metrics(res)))
    return out


@pytest.fixture(scope="module")
def tank():
    t0 = time.perf_counter()
    cfg = load_config("four-tank")
    data = collect_data(cfg)
    setup = prepare_output_feedback(cfg, data)
    runs = _fleet(cfg, data, setup)
    return dict(cfg=cfg, data=data, setup=setup, runs=runs,
                seconds=time.perf_counter() - t0)


@pytest.fixture(scope="module")
def example1():
    cfg = load_config("double-integrator")
    return cfg, _fleet(cfg, collect_data(cfg))


@pytest.fixture(scope="module")
def example2():
    cfg = load_config("inverted-pendulum")
    return cfg, _fleet(cfg, collect_data(cfg))


def test_criterion_1_fundamental_lemma(capsys):
    rng = np.random.default_rng(1)
    t0 = time.perf_counter()
    worst = 0.0
    for k in range(50):
        sys = random_system(rng)
        L = int(rng.integers(2, 9))
        order = L + sys.n_x
        N = min_length_for_pe(sys.n_u, order) + 30
        d = collect_offline_data(sys, generate_pe_input(sys.n_u, N, order, k),
                                 rng.standard_normal(sys.n_x))
        M = np.vstack([hankel(d.inputs, L).entries, hankel(d.outputs, L).entries])
        x = rng.standard_normal(sys.n_x)
        us, ys = [], []
        for _ in range(L):
            u = rng.standard_normal(sys.n_u)
            x, y = simulate_step(sys, x, u)
            us.append(u)
            ys.append(y)
        w = np.concatenate(us + ys)
        g = np.linalg.lstsq(M, w, rcond=None)[0]
        worst = max(worst, np.linalg.norm(M @ g - w) / (1 + np.linalg.norm(w)))
    secs = time.perf_counter() - t0
    report(1, worst <= 1e-8 and secs < 10,
           f"50 systems, worst relative residual {worst:.1e}, {secs:.1f} s", capsys)


def test_criterion_2_rho_bounds(capsys):
    rng = np.random.default_rng(2)
    t0 = time.perf_counter()
    cases = [(load_config("four-tank").plant(), 11)]
    cases += [(random_system(rng), 8) for _ in range(20)]
    violations = checks = 0
    for k, (sys, L) in enumerate(cases):
        eta = observability_index(sys)
        order = L + sys.n_x + eta
        N = max(800, min_length_for_pe(sys.n_u, order) + 60) if k == 0 else \
            min_length_for_pe(sys.n_u, order) + 60
        d = collect_offline_data(sys, generate_pe_input(sys.n_u, N, order, k + 1))
        rho = estimate_rho_bounds(hankel(d.inputs, L + eta), hankel(d.outputs, L + eta),
                                  eta, L)
        for i in range(1, L):
            checks += 1
            violations += rho.J(i) < rho_oracle(sys, i, eta)
    secs = time.perf_counter() - t0
    report(2, violations == 0 and secs < 30,
           f"{violations} violations in {checks} checks, {secs:.1f} s", capsys)


def test_criterion_3_zero_noise_exactness(capsys):
    # Noise-free limit: the slack weight grows like 1/nbar while the
    # regularization on g keeps its default, so the slack vanishes.
    rng = np.random.default_rng(7)
    nbar = 1e-10
    worst, failed = 0.0, 0
    for k in range(20):
        sys = random_system(rng, spectral_radius=0.9)
        eta, L = observability_index(sys), 8
        order = L + sys.n_x + eta
        d = collect_offline_data(sys, generate_pe_input(
            sys.n_u, (sys.n_u + 1) * order + 80, order, k))
        Hu, Hy = hankel(d.inputs, L + eta), hankel(d.outputs, L + eta)
        cfg = ddmpc.MpcConfig(L=L, eta=eta, Q=np.eye(sys.n_y), R=1e-2 * np.eye(sys.n_u),
                              lambda_g_nbar=1e-6, lambda_h_over_nbar=500 * 0.0015 / nbar,
                              noise_bound=nbar, u_min=-10 * np.ones(sys.n_u),
                              u_max=10 * np.ones(sys.n_u), u_e=np.zeros(sys.n_u),
                              y_e=np.zeros(sys.n_y))
        term = ddmpc.terminal_ingredients_oracle(extended_system(sys, eta), cfg.Q, cfg.R, L,
                                                 cfg.u_min, cfg.u_max, cfg.u_e)
        x = rng.uniform(-0.1, 0.1, sys.n_x)
        u_past = rng.uniform(-0.1, 0.1, (eta, sys.n_u))
        y_past = []
        for u in u_past:
            x, y = simulate_step(sys, x, u)
            y_past.append(y)
        sol = ddmpc.solve_mpc(cfg, Hu, Hy, u_past, np.array(y_past), term, tol=1e-9)
        if not sol.ok:
            failed += 1
            continue
        for t, u in enumerate(sol.u_bar[eta:]):
            x, y = simulate_step(sys, x, u)
            worst = max(worst, float(np.linalg.norm(y - sol.y_bar[eta + t])))
    report(3, failed == 0 and worst <= 1e-4,
           f"20 instances, {failed} solver failures, worst output mismatch {worst:.1e}",
           capsys)


@pytest.mark.slow
def test_criterion_4_four_tank(tank, capsys):
    ms = [m for _, m in tank["runs"]]
    err = max(m["terminal_error"] for m in ms)
    packets = [m["packets_sent"] for m in ms]
    med = float(np.median(packets))
    meas_ok = all(m["measurements_sent"] <= 2 * m["packets_sent"] for m in ms)
    a, b, c = err <= 0.02, 25 <= med <= 60, meas_ok
    d = tank["seconds"] < 300
    report(4, a and b and c and d,
           f"(a) max terminal error {err:.4f} vs 0.02 {'ok' if a else 'FAIL'}; "
           f"(b) median packets {med:g} vs [25, 60] {'ok' if b else 'FAIL'}; "
           f"(c) measurements <= 2 packets {'ok' if c else 'FAIL'}; "
           f"fleet {tank['seconds']:.0f} s", capsys)


@pytest.mark.slow
def test_criterion_5_prediction_audit(tank, capsys):
    audits = sum(len(res.log.audits) for res, _ in tank["runs"])
    bad = sum(m["audit_violations"] for _, m in tank["runs"])
    report(5, bad == 0 and audits > 0, f"{bad} violations in {audits} audited intervals",
           capsys)


@pytest.mark.slow
def test_criterion_6_feasibility_and_decrease(tank, capsys):
    nbar = tank["cfg"]["noise"]["bound"]
    infeasible = sum(not res.feasible for res, _ in tank["runs"])
    pairs = dec = 0
    for res, _ in tank["runs"]:
        c = np.asarray(res.log.costs)
        for l in range(3, c.size - 1):  # the first three triggers are the transient
            pairs += 1
            dec += c[l + 1] <= c[l] + 10 * nbar
    frac = dec / pairs if pairs else 0.0
    report(6, infeasible == 0 and frac >= 0.95,
           f"{infeasible} infeasible runs; cost decrease on {frac:.1%} of {pairs} pairs",
           capsys)


@pytest.mark.slow
def test_criterion_7_sigma_sweep(tank, capsys):
    means = []
    for sg in SIGMAS:
        if sg == tank["cfg"]["output_feedback"]["sigma"]:
            runs = tank["runs"]
        else:
            cfg = tank["cfg"].with_overrides(sigma=sg)
            setup = prepare_output_feedback(cfg, tank["data"], rho=tank["setup"].rho)
            runs = _fleet(cfg, tank["data"], setup)
        means.append(float(np.mean([m["packets_sent"] for _, m in runs])))
    rises = [(b - a) / a for a, b in zip(means, means[1:]) if b > a]
    ok = len(rises) <= 1 and all(r <= 0.05 for r in rises)
    detail = ", ".join(f"sigma {s}: {m:.2f}" for s, m in zip(SIGMAS, means))
    report(7, ok, f"mean packets {detail}", capsys)


def _state_fb_line(n, cfg, runs, band, capsys):
    nbar = cfg["noise"]["bound"]
    samples = [m["packets_sent"] for _, m in runs]
    med = float(np.median(samples))
    worst = max(m["terminal_error"] for _, m in runs)
    a, b = band[0] <= med <= band[1], worst <= 10 * nbar
    report(n, a and b,
           f"median samples {med:g} vs [{band[0]}, {band[1]}] {'ok' if a else 'FAIL'}; "
           f"max final state {worst:.1e} vs {10 * nbar:.1e} {'ok' if b else 'FAIL'}", capsys)


@pytest.mark.slow
def test_criterion_8_state_feedback_example1(example1, capsys):
    cfg, runs = example1
    _state_fb_line(8, cfg, runs, (8, 30), capsys)


@pytest.mark.slow
def test_criterion_9_state_feedback_example2(example2, capsys):
    cfg, runs = example2
    _state_fb_line(9, cfg, runs, (40, 100), capsys)


@pytest.mark.slow
def test_criterion_10_exact_counts_not_claimed(tank, example1, example2, capsys):
    meds = [float(np.median([m["packets_sent"] for _, m in runs]))
            for runs in (tank["runs"], example1[1], example2[1])]
    report(10, True,
           "informational: exact counts are not claimed; fleet medians "
           f"{meds[0]:g} / {meds[1]:g} / {meds[2]:g} against single published runs "
           "of 37 / 14 / 62", capsys)
