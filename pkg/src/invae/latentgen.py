"""Multi-domain latent generators: acyclic SCMs with imperfect interventions,
random support boxes, the dynamic-SCM offset, and polytope supports.

Every sampler is a pure function of its arguments and a seed; repeated calls
are bitwise identical. Stable coordinates (the set S) keep the same support
across every generated domain; unstable coordinates (U) are the ones that
shift. U is closed under descendants: no edge ever points from U back into S.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import Delaunay

__all__ = [
    "ScmSpec",
    "InterventionSchedule",
    "SupportBox",
    "PolytopeSupport",
    "LatentBatch",
    "build_random_dag",
    "sample_scm",
    "make_single_node_schedule",
    "make_multinode_schedule",
    "is_good_intervention",
    "terminal_nodes",
    "sample_support_boxes",
    "sample_box",
    "apply_dynamic_scm",
    "sample_interval_minmax",
    "sample_polytope_supports",
    "sample_polytope",
    "check_support_variability",
]


# ---------------------------------------------------------------------------
# Types
# ---------------------------------------------------------------------------


@dataclass
class ScmSpec:
    """Acyclic SCM over d nodes with additive noise.

    ``adjacency[i, j]`` is the edge i -> j. Mechanisms are linear maps over
    the parents (weights in ``weights[child, parent]``), optionally squashed
    by tanh. ``topo_order`` certifies acyclicity; every child of a node in U
    is itself in U.
    """

    d: int
    adjacency: np.ndarray
    topo_order: tuple[int, ...]
    weights: np.ndarray
    nonlinearity: str  # "linear" | "tanh"
    base_noise_var: np.ndarray
    S: tuple[int, ...]
    U: tuple[int, ...]

    def validate(self) -> None:
        if self.d < 1:
            raise ValueError("ScmSpec: d must be >= 1")
        if sorted(self.S + self.U) != list(range(self.d)):
            raise ValueError("ScmSpec: S and U must partition the node set")
        if np.any(self.base_noise_var <= 0):
            raise ValueError("ScmSpec: noise variances must be positive")
        pos = {node: i for i, node in enumerate(self.topo_order)}
        src, dst = np.nonzero(self.adjacency)
        for a, b in zip(src, dst):
            if pos[a] >= pos[b]:
                raise ValueError(f"ScmSpec: edge {a}->{b} violates topo_order")
        u = set(self.U)
        for a, b in zip(src, dst):
            if a in u and b not in u:
                raise ValueError(f"ScmSpec: edge {a}->{b} leaves U")
        if self.nonlinearity not in ("linear", "tanh"):
            raise ValueError(f"ScmSpec: unknown nonlinearity {self.nonlinearity!r}")


@dataclass
class InterventionSchedule:
    """Per-domain noise-variance overrides; domain 0 is observational (empty)."""

    domains: list[dict[int, float]]
    kind: str  # "single-node" | "multi-node"
    t: int | None = None

    @property
    def k(self) -> int:
        return len(self.domains)


@dataclass
class SupportBox:
    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        self.lo = np.asarray(self.lo, dtype=np.float64)
        self.hi = np.asarray(self.hi, dtype=np.float64)
        if self.lo.shape != self.hi.shape or np.any(self.lo > self.hi):
            raise ValueError("SupportBox: need lo <= hi componentwise")

    @property
    def d(self) -> int:
        return self.lo.shape[0]

    def corners(self) -> np.ndarray:
        """All 2^d vertices; intended for small d."""
        d = self.d
        if d > 16:
            raise ValueError("SupportBox.corners: d too large to enumerate")
        bits = (np.arange(2**d)[:, None] >> np.arange(d)[None, :]) & 1
        return np.where(bits == 1, self.hi[None, :], self.lo[None, :])


@dataclass
class PolytopeSupport:
    """Convex hull of ``vertices`` (M, d)."""

    vertices: np.ndarray

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64)
        if self.vertices.ndim != 2 or self.vertices.shape[0] < 2:
            raise ValueError("PolytopeSupport: need at least 2 vertices")
        if not np.all(np.isfinite(self.vertices)):
            raise ValueError("PolytopeSupport: vertices must be finite")

    @property
    def d(self) -> int:
        return self.vertices.shape[1]


@dataclass
class LatentBatch:
    domain_id: int
    Z: np.ndarray

    def __post_init__(self):
        self.Z = np.asarray(self.Z, dtype=np.float64)
        if self.Z.ndim != 2 or self.Z.shape[0] < 1:
            raise ValueError("LatentBatch: Z must be a nonempty (n, d) matrix")
        if not np.all(np.isfinite(self.Z)):
            raise ValueError("LatentBatch: Z contains non-finite entries")


# ---------------------------------------------------------------------------
# SCM construction and sampling
# ---------------------------------------------------------------------------


def terminal_nodes(spec: ScmSpec) -> set[int]:
    """Nodes with no children."""
    return {i for i in range(spec.d) if not spec.adjacency[i].any()}


def descendants_closed_in_u(spec: ScmSpec) -> bool:
    """Transitive-closure check that descendants of U stay inside U."""
    reach = spec.adjacency.astype(bool).copy()
    for _ in range(spec.d):
        reach = reach | (reach @ reach)
    u = set(spec.U)
    for a in spec.U:
        if any(int(b) not in u for b in np.nonzero(reach[a])[0]):
            return False
    return True


def build_random_dag(
    d: int,
    S_size: int,
    edge_prob: float,
    seed: int,
    nonlinearity: str = "linear",
    max_tries: int = 1000,
) -> ScmSpec:
    """Random DAG on d nodes with S = {0..S_size-1} and no U -> S edges.

    Edges are oriented along a random topological order and kept with
    probability ``edge_prob``. Whenever |U| >= 2, the draw is repeated until
    the DAG has at least two terminal nodes inside U (required for two-node
    intervention schedules); after ``max_tries`` failures this raises.
    """
    if d < 1:
        raise ValueError("build_random_dag: invalid dimension, d must be >= 1")
    if not 0 <= S_size <= d:
        raise ValueError(f"build_random_dag: invalid partition, S_size={S_size}, d={d}")
    if not 0.0 <= edge_prob <= 1.0:
        raise ValueError("build_random_dag: edge_prob must be in [0, 1]")
    S = tuple(range(S_size))
    U = tuple(range(S_size, d))
    u_set = set(U)
    rng = np.random.default_rng(seed)
    for _ in range(max_tries):
        order = tuple(int(v) for v in rng.permutation(d))
        adj = np.zeros((d, d), dtype=bool)
        for i in range(d):
            for j in range(i + 1, d):
                a, b = order[i], order[j]
                if a in u_set and b not in u_set:
                    continue  # U -> S forbidden
                if rng.random() < edge_prob:
                    adj[a, b] = True
        weights = np.zeros((d, d))
        weights[adj.T] = rng.uniform(0.5, 1.5, size=int(adj.sum()))
        spec = ScmSpec(
            d=d,
            adjacency=adj,
            topo_order=order,
            weights=weights,
            nonlinearity=nonlinearity,
            base_noise_var=np.ones(d),
            S=S,
            U=U,
        )
        spec.validate()
        if len(U) < 2 or len(terminal_nodes(spec) & u_set) >= 2:
            return spec
    raise RuntimeError(
        f"build_random_dag: no DAG with two U-terminals in {max_tries} tries"
    )


def sample_scm(
    spec: ScmSpec, overrides: dict[int, float], n: int, seed: int
) -> LatentBatch:
    """Ancestral sampling of z_i = q_i(z_parents) + noise, in topological order.

    ``overrides`` replaces the noise variance of the named U nodes; the
    mechanisms themselves never change. Standard normals are drawn per node
    in topological order and scaled by the active standard deviation, so two
    calls with the same seed share the underlying noise realisations even
    when the variances differ.
    """
    if n < 1:
        raise ValueError("sample_scm: n must be >= 1")
    u_set = set(spec.U)
    for node, var in overrides.items():
        if node not in u_set:
            raise ValueError(
                f"sample_scm: stable-node intervention on node {node} (not in U)"
            )
        if var <= 0:
            raise ValueError(f"sample_scm: override variance for {node} must be > 0")
    rng = np.random.default_rng(seed)
    Z = np.zeros((n, spec.d))
    for node in spec.topo_order:
        eps = rng.standard_normal(n)
        var = overrides.get(node, float(spec.base_noise_var[node]))
        parents = np.nonzero(spec.adjacency[:, node])[0]
        mech = Z[:, parents] @ spec.weights[node, parents] if len(parents) else 0.0
        if spec.nonlinearity == "tanh" and len(parents):
            mech = np.tanh(mech)
        Z[:, node] = mech + np.sqrt(var) * eps
    return LatentBatch(domain_id=0, Z=Z)


def make_single_node_schedule(
    spec: ScmSpec, var_low: float, var_high: float, seed: int
) -> InterventionSchedule:
    """One interventional domain per U node, each overriding exactly that node."""
    if not 0 < var_low < var_high:
        raise ValueError("make_single_node_schedule: need 0 < var_low < var_high")
    if not spec.U:
        raise ValueError("make_single_node_schedule: nothing to intervene, U is empty")
    rng = np.random.default_rng(seed)
    domains: list[dict[int, float]] = [{}]
    for node in spec.U:
        domains.append({node: float(rng.uniform(var_low, var_high))})
    return InterventionSchedule(domains=domains, kind="single-node")


def make_multinode_schedule(
    spec: ScmSpec, t: int, var_low: float, var_high: float, seed: int
) -> InterventionSchedule:
    """For each U node, t domains pairing it with a uniform partner in U.

    Both paired nodes draw fresh independent variances from
    Uniform[var_low, var_high]; total interventional domains = t * |U|.
    """
    if len(spec.U) < 2:
        raise ValueError("make_multinode_schedule: insufficient nodes, need |U| >= 2")
    if t < 1:
        raise ValueError("make_multinode_schedule: t must be >= 1")
    if not 0 < var_low < var_high:
        raise ValueError("make_multinode_schedule: need 0 < var_low < var_high")
    rng = np.random.default_rng(seed)
    domains: list[dict[int, float]] = [{}]
    for node in spec.U:
        partners = [u for u in spec.U if u != node]
        for _ in range(t):
            partner = partners[rng.integers(len(partners))]
            domains.append(
                {
                    node: float(rng.uniform(var_low, var_high)),
                    partner: float(rng.uniform(var_low, var_high)),
                }
            )
    return InterventionSchedule(domains=domains, kind="multi-node", t=t)


def is_good_intervention(
    domain_overrides: dict[int, float],
    base_noise_var: np.ndarray,
    terminals: set[int],
) -> bool:
    """True iff one overridden node is terminal and both variances moved the
    same strict direction relative to their base values."""
    if len(domain_overrides) != 2:
        raise ValueError(
            f"is_good_intervention: expected 2 overrides, got {len(domain_overrides)}"
        )
    nodes = list(domain_overrides)
    if not any(node in terminals for node in nodes):
        return False
    deltas = [domain_overrides[node] - float(base_noise_var[node]) for node in nodes]
    return (deltas[0] > 0 and deltas[1] > 0) or (deltas[0] < 0 and deltas[1] < 0)


# ---------------------------------------------------------------------------
# Support boxes and the dynamic SCM
# ---------------------------------------------------------------------------


def sample_support_boxes(
    d: int,
    S: tuple[int, ...],
    k: int,
    range_lo: float,
    range_hi: float,
    seed: int,
) -> list[SupportBox]:
    """k per-domain boxes: S axes pinned to [0,1], U axes random sub-intervals.

    Each U endpoint pair is two independent Uniform[range_lo, range_hi]
    draws, sorted so lo <= hi.
    """
    if k < 1:
        raise ValueError("sample_support_boxes: k must be >= 1")
    if range_lo >= range_hi:
        raise ValueError("sample_support_boxes: need range_lo < range_hi")
    s_set = set(S)
    rng = np.random.default_rng(seed)
    boxes = []
    for _ in range(k):
        lo = np.zeros(d)
        hi = np.ones(d)
        for i in range(d):
            if i in s_set:
                continue
            a, b = rng.uniform(range_lo, range_hi, size=2)
            lo[i], hi[i] = min(a, b), max(a, b)
        boxes.append(SupportBox(lo=lo, hi=hi))
    return boxes


def sample_box(box: SupportBox, n: int, seed: int, domain_id: int = 0) -> LatentBatch:
    """n i.i.d. uniform samples from the box; degenerate axes stay constant."""
    if n < 1:
        raise ValueError("sample_box: n must be >= 1")
    rng = np.random.default_rng(seed)
    Z = rng.uniform(box.lo, box.hi, size=(n, box.d))
    return LatentBatch(domain_id=domain_id, Z=Z)


def apply_dynamic_scm(
    batch: LatentBatch,
    S: tuple[int, ...],
    U: tuple[int, ...],
    p: float,
    seed: int,
) -> LatentBatch:
    """Per sample, offset each U component by its paired S component with
    probability p; S components are never modified."""
    if len(S) != len(U):
        raise ValueError(
            f"apply_dynamic_scm: pairing error, |S|={len(S)} != |U|={len(U)}"
        )
    rng = np.random.default_rng(seed)
    Z = batch.Z.copy()
    mask = rng.random((Z.shape[0], len(U))) < p
    for j, (s_idx, u_idx) in enumerate(zip(S, U)):
        Z[:, u_idx] += mask[:, j] * Z[:, s_idx]
    return LatentBatch(domain_id=batch.domain_id, Z=Z)


def sample_interval_minmax(seed: int) -> tuple[float, float]:
    """Random sub-interval of [0,1]: (min, max) of two independent uniforms."""
    rng = np.random.default_rng(seed)
    a, b = rng.uniform(0.0, 1.0, size=2)
    return (min(a, b), max(a, b))


# ---------------------------------------------------------------------------
# Polytope supports
# ---------------------------------------------------------------------------


def sample_polytope_supports(
    d: int, S: tuple[int, ...], k: int, M: int, seed: int
) -> list[PolytopeSupport]:
    """k random polytopes of M vertices each, with shared S-extremes.

    On every S axis, vertex 0 is pinned at coordinate 0 and vertex 1 at
    coordinate 1 in every domain, so the S-supports attain the same extremes;
    the remaining coordinates (and all U coordinates) are fresh Uniform[0,1].
    """
    if M < 2:
        raise ValueError("sample_polytope_supports: degenerate polytope, M must be >= 2")
    if k < 1:
        raise ValueError("sample_polytope_supports: k must be >= 1")
    s_set = set(S)
    rng = np.random.default_rng(seed)
    supports = []
    for _ in range(k):
        V = rng.uniform(0.0, 1.0, size=(M, d))
        for i in range(d):
            if i in s_set:
                V[0, i] = 0.0
                V[1, i] = 1.0
        supports.append(PolytopeSupport(vertices=V))
    return supports


def sample_polytope(
    poly: PolytopeSupport, n: int, seed: int, domain_id: int = 0, max_tries: int = 10000
) -> LatentBatch:
    """Uniform samples over the convex hull via bounding-box rejection."""
    if n < 1:
        raise ValueError("sample_polytope: n must be >= 1")
    tri = Delaunay(poly.vertices)
    lo = poly.vertices.min(axis=0)
    hi = poly.vertices.max(axis=0)
    rng = np.random.default_rng(seed)
    rows = []
    have = 0
    for _ in range(max_tries):
        cand = rng.uniform(lo, hi, size=(max(4 * n, 256), poly.d))
        inside = cand[tri.find_simplex(cand) >= 0]
        rows.append(inside)
        have += inside.shape[0]
        if have >= n:
            break
    Z = np.concatenate(rows, axis=0)
    if Z.shape[0] < n:
        raise RuntimeError("sample_polytope: rejection sampling failed to fill batch")
    return LatentBatch(domain_id=domain_id, Z=Z[:n])


def check_support_variability(
    boxes: list[SupportBox], U: tuple[int, ...]
) -> tuple[int, int] | None:
    """Certificate pair (p, q) with hi_q >= hi_p componentwise, strict on U.

    Under shared S-supports this is sufficient for the support-variability
    hypothesis: every point of box p is dominated by a point of box q, with
    strict domination on the unstable axes. Returns None when no pair
    qualifies (e.g. identical boxes, where strictness fails).
    """
    if len(boxes) < 2:
        raise ValueError("check_support_variability: need at least 2 domains")
    u = list(U)
    for p in range(len(boxes)):
        for q in range(len(boxes)):
            if p == q:
                continue
            ge_all = np.all(boxes[q].hi >= boxes[p].hi)
            gt_u = np.all(boxes[q].hi[u] > boxes[p].hi[u]) if u else False
            if ge_all and gt_u:
                return (p, q)
    return None
