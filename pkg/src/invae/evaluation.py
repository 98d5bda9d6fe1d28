"""Block-identification metrics and the shrink-search over candidate stable sets.

R^2 scores come from ordinary least squares with an intercept, fit on a
fixed-seed 80/20 split and scored on the held-out part; in-sample fitting
with p close to n would overstate identification.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

__all__ = [
    "EvalReport",
    "linear_r2",
    "block_identification",
    "affine_fit",
    "select_S_hat",
]

SPLIT_SEED = 20240 + 405


def _ols_fit(X: np.ndarray, Y: np.ndarray) -> tuple[np.ndarray, bool]:
    """Least-squares coefficients for [X, 1] -> Y; flags rank deficiency."""
    design = np.hstack([X, np.ones((X.shape[0], 1))])
    coef, _, rank, _ = np.linalg.lstsq(design, Y, rcond=None)
    return coef, rank < design.shape[1]


def _r2_columns(Y: np.ndarray, pred: np.ndarray) -> float:
    sse = np.sum((Y - pred) ** 2, axis=0)
    sst = np.sum((Y - Y.mean(axis=0)) ** 2, axis=0)
    return float(np.mean(1.0 - sse / sst))


def linear_r2(
    features: np.ndarray,
    targets: np.ndarray,
    test_fraction: float | None = 0.2,
    split_seed: int = SPLIT_SEED,
) -> float:
    """Coefficient of determination of an OLS probe, averaged over target columns.

    With ``test_fraction=None`` the probe is fit and scored in-sample
    (used only by small hand-checked cases).
    """
    X = np.asarray(features, dtype=np.float64)
    Y = np.asarray(targets, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    if Y.ndim == 1:
        Y = Y[:, None]
    if X.shape[0] != Y.shape[0]:
        raise ValueError(f"linear_r2: {X.shape[0]} rows vs {Y.shape[0]} targets")
    n, p = X.shape
    if n <= p + 1:
        raise ValueError(f"linear_r2: need n > p+1, got n={n}, p={p}")
    if np.any(Y.std(axis=0) == 0.0):
        raise ValueError("linear_r2: degenerate target column (constant)")
    if test_fraction is None:
        coef, _ = _ols_fit(X, Y)
        pred = np.hstack([X, np.ones((n, 1))]) @ coef
        return _r2_columns(Y, pred)
    rng = np.random.default_rng(split_seed)
    perm = rng.permutation(n)
    n_test = max(1, int(round(n * test_fraction)))
    test, train = perm[:n_test], perm[n_test:]
    coef, _ = _ols_fit(X[train], Y[train])
    pred = np.hstack([X[test], np.ones((len(test), 1))]) @ coef
    return _r2_columns(Y[test], pred)


def block_identification(
    zhat: np.ndarray,
    z: np.ndarray,
    S: tuple[int, ...],
    U: tuple[int, ...],
    s_hat: tuple[int, ...],
) -> tuple[float, float]:
    """(R^2_S, R^2_U): predict the stable / unstable true latents from the
    constrained coordinates of the estimate."""
    zhat = np.asarray(zhat, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    if zhat.shape[0] != z.shape[0]:
        raise ValueError("block_identification: row counts differ")
    feats = zhat[:, list(s_hat)]
    r2_s = linear_r2(feats, z[:, list(S)])
    r2_u = linear_r2(feats, z[:, list(U)])
    return r2_s, r2_u


def affine_fit(
    zhat: np.ndarray, z: np.ndarray
) -> tuple[np.ndarray, np.ndarray, float, float]:
    """Best affine map zhat ~ A z + c on all rows, plus its held-out R^2 and
    the condition number of A."""
    zhat = np.asarray(zhat, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    n, d = z.shape
    if n <= d + 1:
        raise ValueError(f"affine_fit: need n > d+1, got n={n}, d={d}")
    coef, deficient = _ols_fit(z, zhat)
    A = coef[:d].T
    c = coef[d]
    fit_r2 = linear_r2(z, zhat)
    cond = float(np.linalg.cond(A)) if not deficient else float("inf")
    return A, c, fit_r2, cond


def select_S_hat(
    d: int,
    train_fn,
    feasibility_tol: float,
    recon_tol: float,
    start_size: int | None = None,
) -> tuple[tuple[int, ...], bool]:
    """Shrink-search over prefix candidate sets.

    Starting from the first ``start_size`` encoder coordinates (default all
    d), train with each prefix and accept the first size whose final
    reconstruction and penalty both clear their tolerances. Returns
    ``(s_hat, feasible)``; the empty set with ``feasible=False`` means no
    size qualified.
    """
    if feasibility_tol <= 0:
        raise ValueError("select_S_hat: feasibility_tol must be > 0")
    start = d if start_size is None else start_size
    for m in range(start, 0, -1):
        s_hat = tuple(range(m))
        result = train_fn(s_hat)
        if result.final_recon <= recon_tol and result.final_penalty <= feasibility_tol:
            return s_hat, True
    return (), False


@dataclass
class EvalReport:
    """Block-identification scores plus the affine diagnostic for one run."""

    r2_s: float
    r2_u: float
    s_hat: tuple[int, ...]
    affine_fit_r2: float | None = None
    affine_cond: float | None = None
    affine_A: list | None = None
    affine_c: list | None = None
    per_domain_penalty: list[float] = field(default_factory=list)
    context: dict = field(default_factory=dict)

    def to_json(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        payload = {
            "r2_s": self.r2_s,
            "r2_u": self.r2_u,
            "s_hat": list(self.s_hat),
            "affine": {
                "fit_r2": self.affine_fit_r2,
                "cond": self.affine_cond,
                "A": self.affine_A,
                "c": self.affine_c,
            },
            "per_domain_penalty": self.per_domain_penalty,
            "context": self.context,
        }
        path.write_text(json.dumps(payload, indent=2))
        return path

    CSV_HEADER = ["dgp", "penalty", "d", "k", "seed", "r2_s", "r2_u"]

    def csv_row(self) -> list:
        ctx = self.context
        return [
            ctx.get("dgp", ""),
            ctx.get("penalty", ""),
            ctx.get("d", ""),
            ctx.get("k", ""),
            ctx.get("seed", ""),
            f"{self.r2_s:.6f}",
            f"{self.r2_u:.6f}",
        ]
