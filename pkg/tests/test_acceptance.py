"""Acceptance criteria 1-10, each at its stated tolerance.

Every test records one PASS/FAIL line (shown in the terminal summary).
The benchmark grid of criterion 1 dominates the runtime; set
``CROWDPSF_TEST_JOBS`` to run its cells concurrently.
"""

import os
import statistics
import time

import numpy as np
import pytest

from crowdpsf import bench, cdl, lanczos, metric, sparse, starfield
from oracles import central_difference_gradient, prox_l1l2_bruteforce, xstep_dense

JOBS = int(os.environ.get("CROWDPSF_TEST_JOBS", "1"))
DENSITIES = (1, 10, 25, 50, 100)
THRESHOLDS = {
    "narrow": (28, 33, 30, 30, 25),
    "wide": (28, 27, 25, 25, 19),
    "elong": (27, 29, 28, 29, 25),
}
CELL_BUDGET_S = 300.0


def _median_table(rows):
    table = {}
    for s in bench.summarize(rows):
        table[(s["M"], s["shape"], s["density"])] = s
    return table


@pytest.fixture(scope="module")
def benchmark_rows():
    cells = bench.make_cells(["narrow", "wide", "elong", "complex"], DENSITIES, [0, 1, 2])
    return bench.run_grid(cells, jobs=JOBS)


def test_criterion_01_benchmark_reproduction(benchmark_rows, acceptance_report):
    table = _median_table(benchmark_rows)
    failures = []
    lines = []
    for shape in ("narrow", "wide", "elong", "complex"):
        vals = []
        for i, d in enumerate(DENSITIES):
            s = table[(5, shape, d)]
            v = s["median_snr_db"]
            vals.append("  n/a" if v is None else f"{v:5.1f}")
            if shape in THRESHOLDS and (v is None or v < THRESHOLDS[shape][i]):
                failures.append(f"{shape}/{d}: {v if v is None else round(v, 2)} < {THRESHOLDS[shape][i]}")
        lines.append(f"{shape:>8}: " + " ".join(vals))
    errors = [r for r in benchmark_rows if r["status"] != "ok"]
    slow = [r for r in benchmark_rows if r["status"] == "ok" and r["runtime_s"] > CELL_BUDGET_S]
    ok = not failures and not errors and not slow
    worst = max(r["runtime_s"] for r in benchmark_rows if r["status"] == "ok")
    detail = (f"median SNR (dB) over densities {DENSITIES}: " + " | ".join(lines)
              + f"; slowest cell {worst:.1f} s")
    if failures:
        detail += "; below threshold: " + ", ".join(failures)
    if errors:
        detail += f"; {len(errors)} cells errored"
    acceptance_report(1, ok, detail)
    assert not errors, [r["message"] for r in errors]
    assert not slow
    assert not failures, failures


def test_criterion_02_m_sweep(acceptance_report):
    rows = bench.run_grid(bench.make_cells(["narrow"], [10], [0, 1, 2], m_values=[1, 2, 3, 4, 5]),
                          jobs=JOBS)
    assert all(r["status"] == "ok" for r in rows), [r["message"] for r in rows]
    by_m = {M: [r for r in rows if r["M"] == M] for M in range(1, 6)}
    mean_snr = {M: statistics.fmean(r["snr_db"] for r in rs) for M, rs in by_m.items()}
    med_snr_1 = statistics.median(r["snr_db"] for r in by_m[1])
    runtime = {M: statistics.median(r["runtime_s"] for r in rs) for M, rs in by_m.items()}
    single_ok = med_snr_1 >= 20.0
    monotone_ok = all(mean_snr[M + 1] >= mean_snr[M] - 1.5 for M in range(1, 5))
    runtime_ok = runtime[1] < runtime[3] < runtime[5]
    ok = single_ok and monotone_ok and runtime_ok
    acceptance_report(2, ok, "mean SNR by M: " + ", ".join(f"{M}:{v:.1f}" for M, v in mean_snr.items())
                      + f"; median at M=1 {med_snr_1:.1f} dB; median runtime by M: "
                      + ", ".join(f"{M}:{v:.1f}s" for M, v in runtime.items()))
    assert single_ok and monotone_ok and runtime_ok


def test_criterion_03_prox_oracle(acceptance_report):
    rng = np.random.default_rng(3)
    t0 = time.perf_counter()
    worst, count = 0.0, 0
    for n in range(1, 9):
        for t in (0.01, 0.1, 1.0):
            V = rng.normal(size=(45, n)) * rng.choice([0.005, 0.05, 0.5, 3.0], size=(45, 1))
            X = prox_l1l2_bruteforce(V, t)
            for v, x in zip(V, X):
                worst = max(worst, float(np.max(np.abs(sparse.prox_l1_minus_l2(v, t) - x))))
                count += 1
    dt = time.perf_counter() - t0
    ok = count >= 1000 and worst <= 1e-5 and dt <= 10
    acceptance_report(3, ok, f"{count} inputs, max error {worst:.2e} (<= 1e-5), {dt:.2f} s (<= 10 s)")
    assert ok


def test_criterion_04_gradients(acceptance_report):
    from crowdpsf import dictupdate, gridops
    rng = np.random.default_rng(4)
    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(20):
        h, w = rng.integers(2, 9, 2)
        y, b, s = rng.normal(size=(3, h, w))
        lam = float(rng.uniform(0.01, 1.0))

        def fid(z):
            return gridops.weighted_fidelity(gridops.circular_convolve(b, z) - s)

        for grad, f in ((dictupdate.fidelity_gradient(y, b, s), fid),
                        (dictupdate.smoothness_gradient(y, lam),
                         lambda z: dictupdate.smoothness_penalty(z, lam))):
            fd = central_difference_gradient(f, y)
            worst = max(worst, float(np.max(np.abs(grad - fd)) / np.max(np.abs(fd))))
    dt = time.perf_counter() - t0
    ok = worst <= 1e-5 and dt <= 10
    acceptance_report(4, ok, f"20 problems, max relative error {worst:.2e} (<= 1e-5), {dt:.2f} s")
    assert ok


def test_criterion_05_xstep_exactness(acceptance_report):
    import scipy.fft as sfft

    def masked(x):
        X = sfft.rfft2(x)
        X[..., 0, 0] = 0
        return X

    rng = np.random.default_rng(5)
    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(10):
        filters = rng.normal(size=(4, 8, 8))
        s = rng.normal(size=(8, 8))
        u, v = rng.normal(size=(2, 4, 8, 8))
        rho = float(rng.uniform(0.1, 5))
        state = sparse.AdmmState(np.zeros_like(u), u, v, rho)
        x = sparse.csc_x_step(state, masked(filters), masked(s))
        worst = max(worst, float(np.max(np.abs(x - xstep_dense(filters, s, rho, u - v)))))
    dt = time.perf_counter() - t0
    ok = worst <= 1e-6 and dt <= 30
    acceptance_report(5, ok, f"10 problems (8x8, 4 filters), max error {worst:.2e} (<= 1e-6), {dt:.2f} s")
    assert ok


def test_criterion_06_dc_invariance(acceptance_report):
    img, _ = starfield.render_scene(starfield.SceneSpec(density=10, seed=0), "narrow")
    params = cdl.params_for("narrow", 10)
    t0 = time.perf_counter()
    a = cdl.run_cdl(img, params).psf
    b = cdl.run_cdl(img + 500.0, params).psf
    dt = time.perf_counter() - t0
    diff = float(np.max(np.abs(a - b)))
    ok = diff <= 1e-8 and dt <= 600
    acceptance_report(6, ok, f"max |psf(s) - psf(s + 500)| = {diff:.2e} (<= 1e-8), pair took {dt:.1f} s")
    assert ok


def test_criterion_07_single_star(acceptance_report):
    # a lone star is only identifiable with one offset map (with M > 1 it can
    # be split over the offset maps at no penalty), and the smoothness prior
    # would bias an otherwise exact fit
    psf = starfield.make_reference_psf("narrow")
    spec = starfield.SceneSpec(width=64, height=64, noise=False, n_stars=0)
    img = starfield.render_noiseless(np.array([[32.3, 31.6, 50000.0]]), psf, spec) + 1000.0
    params = cdl.params_for("narrow", 10, M=1, lambda_g=0.0, n_iter=300, csc_inner=5, dict_inner=5)
    t0 = time.perf_counter()
    res = cdl.run_cdl(img, params)
    dt = time.perf_counter() - t0
    m = metric.evaluate(psf, res.psf)
    ok = m.snr_db >= 40.0 and dt <= 300
    acceptance_report(7, ok, f"star at (x, y) = (32.3, 31.6): {m.snr_db:.1f} dB (>= 40), "
                             f"best offset {m.best_offset}/50, {dt:.1f} s")
    assert ok


def test_criterion_08_interpolation(acceptance_report):
    t0 = time.perf_counter()
    bank = lanczos.build_filter_bank(5, 5)
    sigma = 2.0 / (2.0 * np.sqrt(2.0 * np.log(2.0)))
    x = np.arange(-20, 21, dtype=float)
    g = np.exp(-0.5 * (x / sigma) ** 2)
    round_trip = 0.0
    one_way = 0.0
    for m, d in enumerate(bank.offsets):
        shifted = lanczos.shift_same(g, bank.taps[m], 0)
        back = lanczos.shift_same(shifted, bank.taps[m][::-1], 0)
        round_trip = max(round_trip, float(np.max(np.abs(back - g)) / g.max()))
        one_way = max(one_way, float(np.max(np.abs(shifted - np.exp(-0.5 * ((x + d) / sigma) ** 2)))))
    z = bank.zero_index
    impulse = np.zeros(2 * bank.order + 1)
    impulse[bank.order] = 1.0
    impulse_ok = np.array_equal(bank.taps[z], impulse)
    dt = time.perf_counter() - t0
    ok = round_trip <= 0.01 and impulse_ok and dt <= 1
    acceptance_report(8, ok, f"shift-then-unshift max error {100 * round_trip:.2f}% (<= 1%); "
                             f"zero-offset filter exact impulse: {impulse_ok}; "
                             f"(info: single shift vs analytic {100 * one_way:.2f}%)")
    assert impulse_ok
    assert round_trip <= 0.01


def test_criterion_09_metric(acceptance_report):
    t0 = time.perf_counter()
    ref = starfield.make_reference_psf("narrow")
    g = metric.sample_reference(ref, 11)
    exact = metric.snr_db(g, g)[0]
    rng = np.random.default_rng(9)
    e = rng.normal(size=g.shape)
    e -= (e * g).sum() / (g * g).sum() * g
    e *= np.sqrt(1e-3 * (g * g).sum() / (e * e).sum())
    constructed = metric.snr_db(g + e, g)[0]
    h = g + e
    scales = [metric.snr_db(c * h, g)[0] for c in (1e-3, 0.5, 3.0, 1e3)]
    scale_ok = all(abs(s - constructed) <= 1e-9 for s in scales)
    dt = time.perf_counter() - t0
    ok = exact == 100.0 and abs(constructed - 30.0) <= 0.5 and scale_ok and dt <= 1
    acceptance_report(9, ok, f"exact samples {exact:.1f} dB (cap 100); energy ratio 1e-3 -> "
                             f"{constructed:.3f} dB (30 +/- 0.5); scale invariance exact: {scale_ok}; "
                             f"{dt:.2f} s")
    assert ok


def test_criterion_10_simulator(acceptance_report):
    t0 = time.perf_counter()
    counts = {}
    for d in DENSITIES:
        counts[d] = len(starfield.draw_stars(starfield.SceneSpec(density=d)))
    counts_ok = all(counts[d] == (256 * 256) // d for d in DENSITIES)
    draws = starfield.add_poisson_noise(np.full(100_000, 1000.0), inverse_gain=1.0, seed=10)
    var = float(draws.var(ddof=1))
    dt = time.perf_counter() - t0
    ok = counts_ok and 950 <= var <= 1050 and dt <= 30
    acceptance_report(10, ok, f"star counts {counts} (= floor(65536 / density)); "
                              f"Poisson variance at 1000 counts {var:.1f} (in [950, 1050]); {dt:.2f} s")
    assert ok
