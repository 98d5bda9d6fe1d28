"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Heavy training cells are shared through session fixtures; every tolerance
is the one stated in the criteria. Run with ``pytest tests/test_acceptance.py -v -s``.
"""

import math
import os
import time
from concurrent.futures import ProcessPoolExecutor

import numpy as np
import pytest

from invae.data import generate_dataset
from invae.evaluation import affine_fit
from invae.experiments import ExperimentConfig, run_cell
from invae.invariance import PenaltyConfig, mmd_rbf, total_penalty
from invae.latentgen import SupportBox, sample_interval_minmax, sample_support_boxes
from invae.models import (
    LinearAutoencoder,
    OracleAutoencoder,
    PolynomialAutoencoder,
    Stage2Autoencoder,
)
from invae.numcore import Tape
from invae.theory import (
    GammaParams,
    gamma_domain_bound,
    good_intervention_coverage_mc,
    multinode_t_bound,
    positive_orthant_oracle,
)
from invae.trainer import TrainConfig, train_linear_joint

SEEDS = (0, 1, 2)


def _report(criterion: int, passed: bool, detail: str) -> None:
    print(f"ACCEPTANCE {criterion:2d} {'PASS' if passed else 'FAIL'}: {detail}")
    assert passed, f"criterion {criterion}: {detail}"


def _one_cell(args):
    cfg, seed = args
    return run_cell(cfg, seed)


def _limit_worker_blas():
    # one BLAS thread per worker; two workers on two cores otherwise thrash
    try:
        import threadpoolctl

        threadpoolctl.threadpool_limits(1)
    except ImportError:
        pass


def _timed_cells(cfg: ExperimentConfig, jobs: int = 2):
    """Run the three seed cells, using worker processes when allowed;
    each cell is deterministic on its own, so parallelism only buys time."""
    if os.environ.get("INVAE_DETERMINISTIC") == "1":
        jobs = 1
    t0 = time.perf_counter()
    work = [(cfg, seed) for seed in SEEDS]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs, initializer=_limit_worker_blas) as pool:
            reports = list(pool.map(_one_cell, work))
    else:
        reports = [_one_cell(w) for w in work]
    return reports, time.perf_counter() - t0


@pytest.fixture(scope="session")
def linear_main_runs():
    """Criterion 1 cells: linear D-SCM d=32 k=16, MMD+Min-Max, desk scale."""
    cfg = ExperimentConfig(latents="dscm", mixing="linear", d=32, k=16,
                           n_train=5000, n_val=1000, penalty="minmax+mmd")
    return _timed_cells(cfg)


@pytest.fixture(scope="session")
def linear_k2_runs():
    cfg = ExperimentConfig(latents="dscm", mixing="linear", d=32, k=2,
                           n_train=5000, n_val=1000, penalty="minmax+mmd")
    return _timed_cells(cfg)


@pytest.fixture(scope="session")
def linear_indep_minmax_runs():
    """Criterion 2 cells: linear independent d=8 k=16, Min-Max."""
    cfg = ExperimentConfig(latents="independent", mixing="linear", d=8, k=16,
                           n_train=5000, n_val=1000, penalty="minmax")
    return _timed_cells(cfg)


@pytest.fixture(scope="session")
def poly_runs():
    """Criterion 3 cells: polynomial D-SCM d=6 degree 2 k=16, MMD+Min-Max."""
    cfg = ExperimentConfig(latents="dscm", mixing="polynomial", d=6, degree=2,
                           k=16, n_train=5000, n_val=1000, penalty="minmax+mmd")
    return _timed_cells(cfg)


def test_criterion_1_linear_dscm_d32_k16(linear_main_runs):
    reports, wall = linear_main_runs
    r2_s = float(np.mean([r.r2_s for r in reports]))
    r2_u = float(np.mean([r.r2_u for r in reports]))
    ok = r2_s >= 0.85 and r2_u <= 0.15 and wall < 300
    _report(1, ok, f"R2_S={r2_s:.3f} (>=0.85), R2_U={r2_u:.3f} (<=0.15), "
                   f"wall={wall:.0f}s (<300s)")


def test_criterion_2_linear_independent_d8_minmax(linear_indep_minmax_runs):
    reports, wall = linear_indep_minmax_runs
    r2_s = float(np.mean([r.r2_s for r in reports]))
    r2_u = float(np.mean([r.r2_u for r in reports]))
    ok = r2_s >= 0.9 and r2_u <= 0.1 and wall < 120
    _report(2, ok, f"R2_S={r2_s:.3f} (>=0.9), R2_U={r2_u:.3f} (<=0.1), "
                   f"wall={wall:.0f}s (<120s)")


def test_criterion_3_polynomial_d6_deg2(poly_runs):
    reports, wall = poly_runs
    r2_s = float(np.mean([r.r2_s for r in reports]))
    r2_u = float(np.mean([r.r2_u for r in reports]))
    ok = r2_s >= 0.9 and r2_u <= 0.05 and wall < 900
    _report(3, ok, f"R2_S={r2_s:.3f} (>=0.9), R2_U={r2_u:.3f} (<=0.05), "
                   f"wall={wall:.0f}s (<900s)")


def test_criterion_4_domain_count_monotonicity(linear_main_runs, linear_k2_runs):
    r16, _ = linear_main_runs
    r2, _ = linear_k2_runs
    s16 = float(np.mean([r.r2_s for r in r16]))
    s2 = float(np.mean([r.r2_s for r in r2]))
    u16 = float(np.mean([r.r2_u for r in r16]))
    u2 = float(np.mean([r.r2_u for r in r2]))
    ok = (s16 - s2 >= 0.3) and (u16 < u2)
    _report(4, ok, f"R2_S gap={s16 - s2:.3f} (>=0.3), "
                   f"R2_U k16={u16:.3f} < k2={u2:.3f}")


def test_criterion_5_affine_identification(poly_runs):
    reports, _ = poly_runs
    fits = [r.affine_fit_r2 for r in reports]
    trained_ok = all(f >= 0.95 for f in fits)
    rng = np.random.default_rng(0)
    z = rng.uniform(-1, 1, size=(3000, 2))
    _, _, quad_fit, _ = affine_fit(z**2, z)
    ok = trained_ok and quad_fit <= 0.9
    _report(5, ok, f"trained fits={[f'{f:.3f}' for f in fits]} (>=0.95), "
                   f"quadratic counterexample={quad_fit:.3f} (<=0.9)")


WITNESS_GRID = [
    ("independent", "linear", 2),
    ("independent", "polynomial", 2),
    ("dscm", "linear", 2),
    ("dscm", "polynomial", 2),
    ("single-node-scm", "linear", 1),
    ("single-node-scm", "polynomial", 2),
    ("multi-node-scm", "linear", 1),
]


def test_criterion_6_feasibility_witness():
    worst_mse, worst_pen = 0.0, 0.0
    for latents, mixing_kind, degree in WITNESS_GRID:
        ds = generate_dataset(latents, mixing_kind, d=6, k=5, n_train=400,
                              n_val=100, degree=degree, seed=17,
                              share_s_samples=True)
        oracle = OracleAutoencoder(ds.mixing)
        pen_cfg = PenaltyConfig(kind="minmax+mmd", s_hat=ds.S, top_k=10)
        mses, pens = [], []
        for x in ds.X:
            err = oracle.reconstruct(x) - x
            mses.append(float(np.mean(err * err)))
        zhat = [oracle.encode(x) for x in ds.X]
        pens.append(total_penalty(zhat, pen_cfg))
        worst_mse = max(worst_mse, max(mses))
        worst_pen = max(worst_pen, max(pens))
    ok = worst_mse < 1e-12 and worst_pen < 1e-10
    _report(6, ok, f"worst recon MSE={worst_mse:.2e} (<1e-12), "
                   f"worst penalty={worst_pen:.2e} (<1e-10)")


def test_criterion_7_lemma_coverage():
    t0 = time.perf_counter()
    details = []
    ok = True
    for d in (2, 3, 4, 6):
        t = math.ceil(multinode_t_bound(d, 0.1))
        cov = good_intervention_coverage_mc(d, t, 100000, seed=d)
        details.append(f"|U|={d}: t={t} cov={cov:.4f}")
        ok = ok and cov >= 0.9 - 0.02
    wall = time.perf_counter() - t0
    ok = ok and wall < 60
    _report(7, ok, "; ".join(details) + f"; wall={wall:.1f}s (<60s)")


def _variability_instance(d: int, k: int, seed: int) -> list[SupportBox]:
    """Random boxes with shared S-extremes and a clear variability pair."""
    rng = np.random.default_rng(seed)
    s_size = max(1, d // 2)
    boxes = sample_support_boxes(d, tuple(range(s_size)), k, 0.0, 1.0, seed)
    # force one dominating domain so the certificate holds with margin
    hi = np.ones(d)
    hi[s_size:] = 1.5 + rng.uniform(0.1, 0.5, size=d - s_size)
    boxes[-1] = SupportBox(np.zeros(d), hi)
    return boxes


def test_criterion_8_orthant_oracle():
    t0 = time.perf_counter()
    failures = []
    for i in range(20):
        d = 2 + (i % 2)  # alternate d=2, d=3
        boxes = _variability_instance(d, 4 + (i % 3), seed=100 + i)
        s_size = max(1, d // 2)
        report = positive_orthant_oracle(
            boxes, S=tuple(range(s_size)), U=tuple(range(s_size, d)),
            grid_res=50, tol=1e-6,
        )
        if not report.passed:
            failures.append(i)
    wall = time.perf_counter() - t0
    ok = not failures and wall < 120
    _report(8, ok, f"20 instances, failures={failures}, wall={wall:.1f}s (<120s)")


def test_criterion_9_interval_probabilities():
    n = 100000
    inside = sum(
        1 for s in range(n)
        if (lambda lo_hi: 0.2 <= lo_hi[0] and lo_hi[1] <= 0.7)(sample_interval_minmax(s))
    )
    covers = sum(
        1 for s in range(n)
        if (lambda lo_hi: lo_hi[0] <= 0.1 and lo_hi[1] >= 0.9)(sample_interval_minmax(s))
    )
    p_in = inside / n
    p_cov = covers / n
    ok = abs(p_in - 0.25) < 0.01 and abs(p_cov - 0.02) < 0.005
    _report(9, ok, f"P(subset)={p_in:.4f} (0.25 +/- 0.01), "
                   f"P(superset)={p_cov:.4f} (0.02 +/- 0.005)")


def test_criterion_10_formula_calculators():
    # frozen from an independent 40-digit pre-build evaluation
    t_bound = multinode_t_bound(4, 0.1)
    params = GammaParams(s=1, theta_max=1.0, L=1.0, eta=0.1,
                         epsilon=0.5 - 1e-12, iota=0.5, c1=1.0, c2=1.0,
                         l=2, r=2, delta=0.1)
    g_bound = gamma_domain_bound(params)
    ok_t = abs(t_bound - 27.62555966510968) / 27.62555966510968 < 1e-6
    ok_g = abs(g_bound - 4103.284626866404) / 4103.284626866404 < 1e-6
    _report(10, ok_t and ok_g,
            f"t_bound={t_bound:.6f} (27.6256), gamma_bound={g_bound:.4f} (4103.2846)")


def _max_grad_error(model, X):
    """Relative error of tape gradients vs central differences on a recon loss."""
    def loss_value():
        tape = Tape()
        p = model.bind(tape)
        xb = tape.constant(X)
        out = model.reconstruct_node(tape, xb, p)
        return tape, p, tape.mse(out, xb)

    tape, pnodes, loss = loss_value()
    tape.backward(loss)
    rng = np.random.default_rng(0)
    worst = 0.0
    h = 1e-5
    for name, node in pnodes.items():
        arr = model.params[name]
        flat_idx = rng.choice(arr.size, size=min(12, arr.size), replace=False)
        for fi in flat_idx:
            idx = np.unravel_index(fi, arr.shape)
            orig = arr[idx]
            arr[idx] = orig + h
            _, _, lp = loss_value()
            arr[idx] = orig - h
            _, _, lm = loss_value()
            arr[idx] = orig
            num = (float(lp.value) - float(lm.value)) / (2 * h)
            got = node.grad[idx]
            worst = max(worst, abs(got - num) / max(abs(num), 1e-6))
    return worst


def test_criterion_11_property_suites():
    rng = np.random.default_rng(1)
    # autodiff vs central finite differences across every architecture
    errs = {}
    X10 = rng.normal(size=(8, 10))
    errs["linear_ae"] = _max_grad_error(LinearAutoencoder(10, 4, seed=2), X10)
    errs["poly_ae"] = _max_grad_error(PolynomialAutoencoder(10, 2, 2, seed=3), X10)
    errs["stage2_mlp"] = _max_grad_error(
        Stage2Autoencoder(5, width=16, seed=4), rng.normal(size=(8, 5))
    )
    grad_ok = all(v < 1e-4 for v in errs.values())

    # penalty properties: non-negativity, permutation invariance, closed form
    batches = [rng.normal(size=(20, 3)) + j for j in range(3)]
    cfg = PenaltyConfig(kind="minmax+mmd", s_hat=(0, 1), top_k=4)
    base = total_penalty(batches, cfg)
    shuffled = [b[rng.permutation(len(b))] for b in batches]
    perm_ok = abs(total_penalty(shuffled, cfg) - base) < 1e-10 * max(base, 1.0)
    nonneg_ok = base >= 0.0
    closed = mmd_rbf(np.array([[0.0]]), np.array([[1.0]]), 1.0)
    closed_ok = abs(closed - (2 - 2 * math.exp(-0.5))) < 1e-12

    # bitwise run determinism per seed
    ds = generate_dataset("dscm", "linear", d=4, k=3, n_train=500, n_val=100, seed=5)
    pen = PenaltyConfig(kind="minmax+mmd", s_hat=(0, 1), top_k=5)
    finals = []
    for _ in range(2):
        model = LinearAutoencoder(ds.n_obs, 4, seed=6)
        tc = TrainConfig(batch_size=128, max_steps=80, penalty=pen, seed=7)
        res = train_linear_joint(ds.train_x(), model, tc)
        finals.append((tuple(res.log.recon), tuple(res.log.penalty),
                       model.flat_params().tobytes()))
    det_ok = finals[0] == finals[1]

    ok = grad_ok and perm_ok and nonneg_ok and closed_ok and det_ok
    _report(11, ok,
            f"grad errs={ {k: f'{v:.2e}' for k, v in errs.items()} }, "
            f"perm={perm_ok}, nonneg={nonneg_ok}, closed-form={closed_ok}, "
            f"determinism={det_ok}")
