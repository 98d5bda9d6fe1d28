"""Polynomial mixing maps over a fixed monomial feature basis.

The basis ordering is frozen across the codebase: degree blocks 0..p, and
within each degree the index multisets (i1 <= ... <= iq) in lexicographic
order. For d=2, p=2 this reads [1, z1, z2, z1^2, z1*z2, z2^2]. The decoder
in ``models`` shares this basis, so coefficient matrices are interchangeable.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from itertools import combinations_with_replacement
from pathlib import Path

import numpy as np

__all__ = [
    "monomial_dim",
    "MonomialBasis",
    "monomial_features",
    "PolynomialMixing",
    "make_random_mixing",
    "linear_mixing_from_matrix",
    "apply_mixing",
    "save_mixing",
    "load_mixing",
]

RANK_RTOL = 1e-9
_BASIS_CACHE: dict[tuple[int, int], "MonomialBasis"] = {}


def monomial_dim(d: int, p: int) -> int:
    """Number of monomials in d variables of total degree <= p, constant included."""
    if d < 1 or p < 1:
        raise ValueError(f"monomial_dim: need d >= 1 and p >= 1, got d={d}, p={p}")
    return math.comb(d + p, p)


class MonomialBasis:
    """Exponent tables for the degree-<=p monomials in d variables.

    ``exponents`` is (D, d) with row m holding the exponent vector of
    monomial m. ``reduced_index[m, i]`` is the basis index of the monomial
    obtained by lowering exponent i by one (0 where exponent i is zero);
    it makes the derivative of the feature map a pure table lookup.
    """

    def __init__(self, d: int, p: int):
        self.d = d
        self.p = p
        multisets: list[tuple[int, ...]] = []
        for q in range(p + 1):
            multisets.extend(combinations_with_replacement(range(d), q))
        self.dim = len(multisets)
        assert self.dim == monomial_dim(d, p)
        exps = np.zeros((self.dim, d), dtype=np.int64)
        for m, ms in enumerate(multisets):
            for i in ms:
                exps[m, i] += 1
        self.exponents = exps
        index = {tuple(row): m for m, row in enumerate(exps.tolist())}
        red = np.zeros((self.dim, d), dtype=np.intp)
        for m in range(self.dim):
            for i in range(d):
                if exps[m, i] > 0:
                    lowered = exps[m].copy()
                    lowered[i] -= 1
                    red[m, i] = index[tuple(lowered.tolist())]
        self.reduced_index = red
        # degree-sorted multisets guarantee the prefix [1, z_1, ..., z_d]
        self._multisets = multisets

    def evaluate(self, z: np.ndarray) -> np.ndarray:
        """Feature matrix (m, D) for latent rows (m, d)."""
        z = np.asarray(z, dtype=np.float64)
        if z.ndim != 2 or z.shape[1] != self.d:
            raise ValueError(f"basis.evaluate: expected (*, {self.d}), got {z.shape}")
        m = z.shape[0]
        feats = np.empty((m, self.dim))
        feats[:, 0] = 1.0
        for col, ms in enumerate(self._multisets[1:], start=1):
            # reuse the lower-degree prefix: ms[:-1] is always an earlier column
            prev = self._index_of(ms[:-1])
            feats[:, col] = feats[:, prev] * z[:, ms[-1]]
        return feats

    def _index_of(self, ms: tuple[int, ...]) -> int:
        if not hasattr(self, "_ms_index"):
            self._ms_index = {m: i for i, m in enumerate(self._multisets)}
        return self._ms_index[ms]


def get_basis(d: int, p: int) -> MonomialBasis:
    key = (d, p)
    if key not in _BASIS_CACHE:
        _BASIS_CACHE[key] = MonomialBasis(d, p)
    return _BASIS_CACHE[key]


def monomial_features(z: np.ndarray, p: int) -> np.ndarray:
    """Monomial features of one vector (d,) -> (D,) or a batch (m, d) -> (m, D)."""
    z = np.asarray(z, dtype=np.float64)
    if not np.all(np.isfinite(z)):
        raise ValueError("monomial_features: non-finite input")
    single = z.ndim == 1
    if single:
        z = z[None, :]
    feats = get_basis(z.shape[1], p).evaluate(z)
    return feats[0] if single else feats


@dataclass
class PolynomialMixing:
    """Degree-p mixing x = G phi(z), G of shape (n, D)."""

    d: int
    n: int
    p: int
    G: np.ndarray
    seed: int | None = None

    @property
    def feature_dim(self) -> int:
        return monomial_dim(self.d, self.p)

    def rank(self, rtol: float = RANK_RTOL) -> int:
        sv = np.linalg.svd(self.G, compute_uv=False)
        return int(np.sum(sv > rtol * sv[0]))


def make_random_mixing(
    d: int, n: int, p: int, seed: int, require_full_column_rank: bool = True
) -> PolynomialMixing:
    """Draw G with i.i.d. Uniform[0,1] entries and certify its numerical rank.

    With ``require_full_column_rank`` (the default), n must be at least the
    feature dimension D and G is resampled (at most 100 times) until its
    numerical rank equals D. With the flag off, only rank min(n, D) is
    required, which admits wide feature bases (n < D) such as the degree-3
    configuration mapping into R^200; n >= d+1 is still enforced so the
    degree-1 block stays injective.
    """
    D = monomial_dim(d, p)
    if require_full_column_rank and n < D:
        raise ValueError(
            f"make_random_mixing: rank impossible, n={n} < feature dim D={D}"
        )
    if n < d + 1:
        raise ValueError(f"make_random_mixing: n={n} < d+1={d + 1}")
    target = D if require_full_column_rank else min(n, D)
    rng = np.random.default_rng(seed)
    for _ in range(100):
        G = rng.uniform(0.0, 1.0, size=(n, D))
        mix = PolynomialMixing(d=d, n=n, p=p, G=G, seed=seed)
        if mix.rank() == target:
            return mix
    raise RuntimeError(
        f"make_random_mixing: failed to reach rank {target} in 100 resamples"
    )


def linear_mixing_from_matrix(A: np.ndarray, seed: int | None = None) -> PolynomialMixing:
    """Wrap a plain linear map x = A z as a degree-1 mixing with zero constant column."""
    A = np.asarray(A, dtype=np.float64)
    n, d = A.shape
    G = np.zeros((n, d + 1))
    G[:, 1:] = A
    return PolynomialMixing(d=d, n=n, p=1, G=G, seed=seed)


def apply_mixing(g: PolynomialMixing, Z: np.ndarray) -> np.ndarray:
    """Row-wise x = G phi(z): (m, d) -> (m, n)."""
    Z = np.asarray(Z, dtype=np.float64)
    if Z.ndim != 2 or Z.shape[1] != g.d:
        raise ValueError(f"apply_mixing: expected (*, {g.d}), got {Z.shape}")
    return get_basis(g.d, g.p).evaluate(Z) @ g.G.T


def save_mixing(g: PolynomialMixing, directory: Path, name: str = "mixing") -> Path:
    """Write <name>.json header plus <name>_G.csv next to it; returns the json path."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    gpath = directory / f"{name}_G.csv"
    np.savetxt(gpath, g.G, delimiter=",", fmt="%.17g")
    header = {"d": g.d, "n": g.n, "p": g.p, "seed": g.seed, "G": gpath.name}
    jpath = directory / f"{name}.json"
    jpath.write_text(json.dumps(header, indent=2))
    return jpath


def load_mixing(json_path: Path) -> PolynomialMixing:
    json_path = Path(json_path)
    header = json.loads(json_path.read_text())
    G = np.loadtxt(json_path.parent / header["G"], delimiter=",", ndmin=2)
    mix = PolynomialMixing(
        d=int(header["d"]),
        n=int(header["n"]),
        p=int(header["p"]),
        G=G,
        seed=header.get("seed"),
    )
    if mix.G.shape != (mix.n, mix.feature_dim):
        raise ValueError(
            f"load_mixing: G shape {mix.G.shape} does not match header "
            f"({mix.n}, {mix.feature_dim})"
        )
    return mix
