"""Calculators and brute-force verifiers for the identification guarantees:
intervention-count bounds, coverage Monte Carlo, covering-number domain
bounds, the positive-orthant support oracle, and the polytope rank check.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np

from .latentgen import PolytopeSupport, SupportBox, check_support_variability

__all__ = [
    "multinode_t_bound",
    "good_intervention_coverage_mc",
    "covering_number",
    "GammaParams",
    "gamma_domain_bound",
    "gamma_example_min",
    "orthant_domain_count",
    "AssumptionNotMetError",
    "OrthantReport",
    "positive_orthant_oracle",
    "polytope_diff_rank_check",
]

RANK_RTOL = 1e-9


def multinode_t_bound(d: int, delta: float) -> float:
    """Per-node intervention count sufficient for full good-pairing coverage:
    log(d/delta) / log(1/(1 - 1/(2d)))."""
    if d < 1:
        raise ValueError("multinode_t_bound: d must be >= 1")
    if not 0.0 < delta < 1.0:
        raise ValueError("multinode_t_bound: delta must lie in (0, 1)")
    return math.log(d / delta) / math.log(1.0 / (1.0 - 1.0 / (2.0 * d)))


def good_intervention_coverage_mc(
    U_size: int, t: int, trials: int, seed: int, chunk: int = 200_000
) -> float:
    """Empirical probability that every non-terminal node lands at least one
    good pairing with the designated terminal node.

    Simulates the abstract pairing model: in each of its t rounds a node
    picks a partner uniformly among the other U_size - 1 nodes, and a hit on
    the terminal node is good with probability 1/2.
    """
    if U_size < 2:
        raise ValueError("good_intervention_coverage_mc: U_size must be >= 2")
    if trials < 1:
        raise ValueError("good_intervention_coverage_mc: trials must be >= 1")
    if t == 0:
        return 0.0
    rng = np.random.default_rng(seed)
    nodes = U_size - 1  # all nodes except the terminal one
    good_total = 0
    done = 0
    while done < trials:
        m = min(chunk, trials - done)
        hits = rng.integers(0, U_size - 1, size=(m, nodes, t)) == 0
        coins = rng.random((m, nodes, t)) < 0.5
        ok = (hits & coins).any(axis=2).all(axis=1)
        good_total += int(ok.sum())
        done += m
    return good_total / trials


def covering_number(s: int, theta_max: float, rho: float) -> float:
    """Size of a rho-cover of a radius-theta_max parameter ball in R^s:
    (2 theta_max sqrt(s) / rho) ** s."""
    if s < 1 or theta_max <= 0:
        raise ValueError("covering_number: need s >= 1 and theta_max > 0")
    if rho <= 0:
        raise ValueError("covering_number: rho must be > 0")
    return (2.0 * theta_max * math.sqrt(s) / rho) ** s


@dataclass
class GammaParams:
    """Inputs of the domain-count bound for the excluded function class."""

    s: int
    theta_max: float
    L: float
    eta: float
    epsilon: float
    iota: float
    c1: float
    c2: float
    l: int
    r: int
    delta: float

    def __post_init__(self):
        positive = {
            "s": self.s,
            "theta_max": self.theta_max,
            "L": self.L,
            "eta": self.eta,
            "epsilon": self.epsilon,
            "iota": self.iota,
            "c1": self.c1,
            "c2": self.c2,
            "l": self.l,
            "r": self.r,
        }
        for name, value in positive.items():
            if value <= 0:
                raise ValueError(f"GammaParams: {name} must be positive")
        if not 0.0 < self.delta < 1.0:
            raise ValueError("GammaParams: delta must lie in (0, 1)")
        if self.epsilon >= 0.5:
            raise ValueError("GammaParams: epsilon must be < 1/2")


def gamma_domain_bound(params: GammaParams, d: int = 1) -> float:
    """Domain count N(delta, epsilon, eta, iota) sufficient to exclude the
    whole function class, via a rho-cover with rho = eta / (4 L).

    ``d`` generalizes the two-variable bound: the containment exponent
    becomes epsilon ** (d * r); d = 1 reproduces the base formula.
    """
    rho = params.eta / (4.0 * params.L)
    n_c = covering_number(params.s, params.theta_max, rho)
    term1 = params.c1 * params.iota**params.l
    term2 = params.c2 * params.epsilon ** (d * params.r)
    if term1 >= 1.0:
        raise ValueError(f"gamma_domain_bound: c1 * iota^l = {term1} must be < 1")
    if term2 >= 1.0:
        raise ValueError(f"gamma_domain_bound: c2 * epsilon^(d r) = {term2} must be < 1")
    log_nc = math.log(2.0 * n_c / params.delta)
    return n_c * log_nc * (
        1.0 / math.log(1.0 / (1.0 - term1)) + 1.0 / math.log(1.0 / (1.0 - term2))
    )


def gamma_example_min(theta: float, z2_interval: tuple[float, float]) -> float:
    """Minimum of (z1 - 1/2)^2 + (z2 - theta)^2 over [0,1] x [a,b]:
    the squared clamp distance of theta to [a, b]."""
    a, b = z2_interval
    if not (0.0 <= a <= b <= 1.0):
        raise ValueError("gamma_example_min: need 0 <= a <= b <= 1")
    if not 0.0 <= theta <= 1.0:
        raise ValueError("gamma_example_min: theta must lie in [0, 1]")
    clamp = min(max(theta, a), b)
    return (theta - clamp) ** 2


def orthant_domain_count(d: int) -> int:
    """Total domains needed when every one of the 2^d orthants must come with
    its own variability pair: 2^(d+1)."""
    if d < 1:
        raise ValueError("orthant_domain_count: d must be >= 1")
    return 2 ** (d + 1)


# ---------------------------------------------------------------------------
# Positive-orthant brute-force oracle
# ---------------------------------------------------------------------------


class AssumptionNotMetError(RuntimeError):
    """The oracle's hypotheses fail on the given supports (not a bug signal)."""


@dataclass
class OrthantReport:
    passed: bool
    grid_res: int
    tol: float
    n_feasible: int
    feasible_directions: list[list[float]]
    counterexamples: list[list[float]] = field(default_factory=list)
    certificate_pair: tuple[int, int] | None = None


def _support_vertices(support) -> np.ndarray:
    if isinstance(support, SupportBox):
        return support.corners()
    if isinstance(support, PolytopeSupport):
        return support.vertices
    raise TypeError(f"unsupported support type {type(support).__name__}")


def _simplex_grid(d: int, res: int) -> np.ndarray:
    """All nonnegative directions with entries summing to 1 at step 1/res."""
    pts = [
        np.array(c, dtype=np.float64) / res
        for c in itertools.product(range(res + 1), repeat=d)
        if sum(c) == res
    ]
    return np.array(pts)


def positive_orthant_oracle(
    domain_supports: list,
    S: tuple[int, ...],
    U: tuple[int, ...],
    grid_res: int = 50,
    tol: float = 1e-6,
    sign_vector: np.ndarray | None = None,
) -> OrthantReport:
    """Enumerate unit-l1 nonnegative directions and verify that every
    direction whose per-domain max and min are invariant puts (almost) no
    mass on the unstable coordinates.

    Extrema over each domain are evaluated on its vertices (linear
    objectives attain extrema at vertices). ``sign_vector`` reflects the
    supports coordinate-wise so any single orthant can be checked with the
    same nonnegative grid. Raises ``AssumptionNotMetError`` when the shared
    S-extremes or the variability certificate are missing.
    """
    if len(domain_supports) < 2:
        raise ValueError("positive_orthant_oracle: need at least 2 domains")
    verts = [_support_vertices(s) for s in domain_supports]
    d = verts[0].shape[1]
    if sign_vector is not None:
        sign = np.asarray(sign_vector, dtype=np.float64)
        if sign.shape != (d,) or not np.all(np.abs(sign) == 1.0):
            raise ValueError("sign_vector must be a vector of +-1 of length d")
        verts = [v * sign[None, :] for v in verts]

    # shared S-extremes across domains
    for i in S:
        lows = [v[:, i].min() for v in verts]
        highs = [v[:, i].max() for v in verts]
        if max(lows) - min(lows) > tol or max(highs) - min(highs) > tol:
            raise AssumptionNotMetError(
                f"S-support extremes differ across domains on coordinate {i}"
            )
    # variability certificate on a bounding-box relaxation of each support
    boxes = [
        SupportBox(lo=v.min(axis=0), hi=v.max(axis=0)) for v in verts
    ]
    pair = check_support_variability(boxes, U)
    if pair is None:
        raise AssumptionNotMetError(
            "no domain pair certifies support variability (strictness fails)"
        )

    grid = _simplex_grid(d, grid_res)
    maxima = np.stack([grid @ v.T for v in verts], axis=0).max(axis=2)  # (k, G)
    minima = np.stack([grid @ v.T for v in verts], axis=0).min(axis=2)
    inv_max = maxima.max(axis=0) - maxima.min(axis=0) <= tol
    inv_min = minima.max(axis=0) - minima.min(axis=0) <= tol
    feasible = grid[inv_max & inv_min]
    u_cols = list(U)
    u_mass = np.abs(feasible[:, u_cols]).sum(axis=1) if len(feasible) else np.array([])
    bad = feasible[u_mass > tol] if len(feasible) else feasible
    return OrthantReport(
        passed=len(bad) == 0,
        grid_res=grid_res,
        tol=tol,
        n_feasible=int(len(feasible)),
        feasible_directions=feasible.tolist(),
        counterexamples=bad.tolist(),
        certificate_pair=pair,
    )


# ---------------------------------------------------------------------------
# Polytope difference-matrix rank check
# ---------------------------------------------------------------------------


def _batch_rank_ok(mats: np.ndarray) -> np.ndarray:
    """Per matrix: rank equals the number of nonzero columns.

    A matrix's rank equals the rank of its largest nonzero-column submatrix,
    so the stated condition needs no submatrix extraction. Singular values
    come from a closed form for two columns and batched SVD otherwise.
    """
    n, rows, d = mats.shape
    nnz = (np.abs(mats).max(axis=1) > 1e-12).sum(axis=1)
    if d == 2:
        # eigenvalues of the 2x2 Gram matrix in closed form
        g11 = np.einsum("nr,nr->n", mats[:, :, 0], mats[:, :, 0])
        g22 = np.einsum("nr,nr->n", mats[:, :, 1], mats[:, :, 1])
        g12 = np.einsum("nr,nr->n", mats[:, :, 0], mats[:, :, 1])
        tr = g11 + g22
        disc = np.sqrt(np.maximum((g11 - g22) ** 2 + 4.0 * g12 * g12, 0.0))
        lam_max = 0.5 * (tr + disc)
        lam_min = np.maximum(0.5 * (tr - disc), 0.0)
        sv = np.stack([np.sqrt(lam_max), np.sqrt(lam_min)], axis=1)
    else:
        sv = np.linalg.svd(mats, compute_uv=False)
    smax = sv[:, :1]
    rank = np.where(
        smax[:, 0] > 0, (sv > RANK_RTOL * smax).sum(axis=1), 0
    )
    return rank == nnz


def polytope_diff_rank_check(
    polytopes: list[PolytopeSupport],
    U: tuple[int, ...],
    budget: int = 50000,
    seed: int = 0,
) -> tuple[bool, np.ndarray | None]:
    """Verify the two polytope-diversity conditions.

    (1) Every difference matrix, whose r-th row is (some vertex of domain
    r+1) minus (some vertex of domain 1), has rank equal to its number of
    nonzero columns. The full family is enumerated when its size is within
    ``budget``, otherwise ``budget`` index tuples are sampled.
    (2) For each U component, some domain's vertex values are disjoint from
    domain 1's vertex values on that component.

    Returns (ok, offending_matrix); the offender is None when only
    condition (2) fails.
    """
    if budget < 1:
        raise ValueError("polytope_diff_rank_check: enumeration budget must be >= 1")
    if len(polytopes) < 2:
        raise ValueError("polytope_diff_rank_check: need at least 2 domains")
    d = polytopes[0].d
    if any(p.d != d for p in polytopes):
        raise ValueError("polytope_diff_rank_check: inconsistent dimensions")

    # condition (2): a domain with no repeated vertex value on each U axis
    base = polytopes[0].vertices
    for j in U:
        base_vals = set(base[:, j].tolist())
        if not any(
            base_vals.isdisjoint(set(p.vertices[:, j].tolist()))
            for p in polytopes[1:]
        ):
            return False, None

    # per later domain, the bank of all (vertex - base vertex) differences
    rows = len(polytopes) - 1
    banks = [
        (p.vertices[:, None, :] - base[None, :, :]).reshape(-1, d)
        for p in polytopes[1:]
    ]
    choices = [b.shape[0] for b in banks]
    total = math.prod(choices)
    if total <= budget:
        grid = np.indices(choices).reshape(rows, -1)
    else:
        rng = np.random.default_rng(seed)
        grid = np.stack([rng.integers(c, size=budget) for c in choices])
    mats = np.stack([banks[r][grid[r]] for r in range(rows)], axis=1)
    ok = _batch_rank_ok(mats)
    if ok.all():
        return True, None
    return False, mats[int(np.argmin(ok))]
