"""Multi-domain dataset assembly and directory IO.

A dataset couples per-domain latent matrices with their mixed observations
and the provenance needed to reproduce or invert them: the S/U partition,
the DGP kind, the mixing, and the seed tree. Directories hold a
``manifest.json``, the mixing header + coefficient CSV, and one
``domain_<j>_z.csv`` / ``domain_<j>_x.csv`` pair per domain, all numbers
written with 17 significant digits so regeneration is byte-identical.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import latentgen as lg
from . import mixing as mx

__all__ = [
    "MultiDomainDataset",
    "LATENT_KINDS",
    "MIXING_KINDS",
    "generate_dataset",
    "save_dataset",
    "load_dataset",
]

LATENT_KINDS = ("independent", "dscm", "single-node-scm", "multi-node-scm")
MIXING_KINDS = ("linear", "polynomial")
DEFAULT_POLY_OBS_DIM = 200


@dataclass
class MultiDomainDataset:
    d: int
    S: tuple[int, ...]
    U: tuple[int, ...]
    Z: list[np.ndarray]
    X: list[np.ndarray]
    n_train: int
    n_val: int
    latents: str
    mixing_kind: str
    mixing: mx.PolynomialMixing
    seeds: dict = field(default_factory=dict)
    provenance: dict = field(default_factory=dict)

    @property
    def k(self) -> int:
        return len(self.Z)

    @property
    def n_obs(self) -> int:
        return self.X[0].shape[1]

    def train_x(self) -> list[np.ndarray]:
        return [x[: self.n_train] for x in self.X]

    def val_x(self) -> list[np.ndarray]:
        return [x[self.n_train :] for x in self.X]

    def val_z(self) -> list[np.ndarray]:
        return [z[self.n_train :] for z in self.Z]


def _make_linear_mixing(d: int, n_obs: int, seed: int) -> mx.PolynomialMixing:
    rng = np.random.default_rng(seed)
    for _ in range(100):
        A = rng.uniform(0.0, 1.0, size=(n_obs, d))
        if np.linalg.matrix_rank(A) == d:
            return mx.linear_mixing_from_matrix(A, seed=seed)
    raise RuntimeError("failed to draw a full-rank linear mixing")


def generate_dataset(
    latents: str,
    mixing_kind: str,
    d: int,
    k: int,
    n_train: int,
    n_val: int,
    degree: int = 2,
    n_obs: int | None = None,
    seed: int = 0,
    share_s_samples: bool = False,
    dynamic_p: float = 0.5,
    edge_prob: float = 0.5,
    var_low: float = 0.5,
    var_high: float = 2.0,
    multi_t: int | None = None,
) -> MultiDomainDataset:
    """Draw per-domain latents under one of the four DGP kinds and mix them.

    Box DGPs pin the S coordinates to Uniform[0,1] in every domain and give
    each domain a fresh random sub-interval of [-5, 5] on the U coordinates;
    the dynamic variant then offsets U by its paired S coordinate per sample
    with probability ``dynamic_p``. SCM DGPs sample a random DAG and an
    intervention schedule, which fixes the domain count (|U|+1 domains for
    single-node schedules, t|U|+1 for multi-node ones; ``k`` is treated as
    the requested total and t is derived from it unless given explicitly).

    ``share_s_samples`` reuses one sampling seed for every domain, which
    makes the S columns coincide across domains exactly; this is the
    common-random-numbers form of the feasibility setting where empirical
    invariance penalties vanish identically.
    """
    if latents not in LATENT_KINDS:
        raise ValueError(f"generate_dataset: unknown latents kind {latents!r}")
    if mixing_kind not in MIXING_KINDS:
        raise ValueError(f"generate_dataset: unknown mixing kind {mixing_kind!r}")
    if d < 2 or d % 2 != 0:
        raise ValueError("generate_dataset: d must be even and >= 2")
    if min(n_train, n_val) < 1 or k < 1:
        raise ValueError("generate_dataset: n_train, n_val and k must be >= 1")
    S = tuple(range(d // 2))
    U = tuple(range(d // 2, d))
    n = n_train + n_val
    ss = np.random.SeedSequence(seed)
    mix_seed, struct_seed, *domain_seeds = [
        int(s.generate_state(1)[0]) for s in ss.spawn(2 + 2 * k)
    ]
    if share_s_samples:
        domain_seeds = [domain_seeds[0]] * k + [domain_seeds[k]] * k

    if mixing_kind == "linear":
        n_obs = 2 * d if n_obs is None else n_obs
        mix = _make_linear_mixing(d, n_obs, mix_seed)
    else:
        n_obs = DEFAULT_POLY_OBS_DIM if n_obs is None else n_obs
        D = mx.monomial_dim(d, degree)
        mix = mx.make_random_mixing(
            d, n_obs, degree, mix_seed, require_full_column_rank=n_obs >= D
        )

    provenance: dict = {}
    Z: list[np.ndarray] = []
    if latents in ("independent", "dscm"):
        boxes = lg.sample_support_boxes(d, S, k, -5.0, 5.0, struct_seed)
        for j in range(k):
            batch = lg.sample_box(boxes[j], n, domain_seeds[j], domain_id=j)
            if latents == "dscm":
                batch = lg.apply_dynamic_scm(
                    batch, S, U, dynamic_p, domain_seeds[k + j]
                )
            Z.append(batch.Z)
        provenance["boxes"] = [
            {"lo": b.lo.tolist(), "hi": b.hi.tolist()} for b in boxes
        ]
    else:
        sub = np.random.SeedSequence(struct_seed).spawn(2)
        dag_seed = int(sub[0].generate_state(1)[0])
        sched_seed = int(sub[1].generate_state(1)[0])
        spec = lg.build_random_dag(d, d // 2, edge_prob, dag_seed)
        if latents == "single-node-scm":
            schedule = lg.make_single_node_schedule(spec, var_low, var_high, sched_seed)
        else:
            t = multi_t if multi_t is not None else max(1, (k - 1) // len(spec.U))
            schedule = lg.make_multinode_schedule(
                spec, t, var_low, var_high, sched_seed
            )
        if schedule.k > k:
            raise ValueError(
                f"generate_dataset: schedule needs {schedule.k} domains but k={k}"
            )
        k = schedule.k
        domain_seeds = domain_seeds[:k] if not share_s_samples else [domain_seeds[0]] * k
        for j, overrides in enumerate(schedule.domains):
            Z.append(lg.sample_scm(spec, overrides, n, domain_seeds[j]).Z)
        provenance["schedule"] = {
            "kind": schedule.kind,
            "t": schedule.t,
            "domains": [
                {str(node): var for node, var in dom.items()}
                for dom in schedule.domains
            ],
        }
        provenance["dag"] = {
            "adjacency": spec.adjacency.astype(int).tolist(),
            "topo_order": list(spec.topo_order),
        }

    X = [mx.apply_mixing(mix, z) for z in Z]
    return MultiDomainDataset(
        d=d,
        S=S,
        U=U,
        Z=Z,
        X=X,
        n_train=n_train,
        n_val=n_val,
        latents=latents,
        mixing_kind=mixing_kind,
        mixing=mix,
        seeds={"root": seed, "share_s_samples": share_s_samples},
        provenance=provenance,
    )


def save_dataset(ds: MultiDomainDataset, directory) -> Path:
    """Write manifest, mixing, and per-domain CSVs; returns the directory."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    mx.save_mixing(ds.mixing, directory)
    z_files, x_files = [], []
    for j in range(ds.k):
        zf, xf = f"domain_{j}_z.csv", f"domain_{j}_x.csv"
        np.savetxt(directory / zf, ds.Z[j], delimiter=",", fmt="%.17g")
        np.savetxt(directory / xf, ds.X[j], delimiter=",", fmt="%.17g")
        z_files.append(zf)
        x_files.append(xf)
    manifest = {
        "d": ds.d,
        "k": ds.k,
        "n_per_domain": [int(z.shape[0]) for z in ds.Z],
        "n_train": ds.n_train,
        "n_val": ds.n_val,
        "S": list(ds.S),
        "U": list(ds.U),
        "dgp": {"latents": ds.latents, "mixing": ds.mixing_kind},
        "seeds": ds.seeds,
        "mixing": "mixing.json",
        "files": {"z": z_files, "x": x_files},
        "provenance": ds.provenance,
    }
    (directory / "manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True)
    )
    return directory


def load_dataset(directory) -> MultiDomainDataset:
    directory = Path(directory)
    manifest_path = directory / "manifest.json"
    if not manifest_path.exists():
        raise FileNotFoundError(f"no manifest.json under {directory}")
    manifest = json.loads(manifest_path.read_text())
    mix = mx.load_mixing(directory / manifest["mixing"])
    Z = [
        np.loadtxt(directory / f, delimiter=",", ndmin=2)
        for f in manifest["files"]["z"]
    ]
    X = [
        np.loadtxt(directory / f, delimiter=",", ndmin=2)
        for f in manifest["files"]["x"]
    ]
    return MultiDomainDataset(
        d=int(manifest["d"]),
        S=tuple(manifest["S"]),
        U=tuple(manifest["U"]),
        Z=Z,
        X=X,
        n_train=int(manifest["n_train"]),
        n_val=int(manifest["n_val"]),
        latents=manifest["dgp"]["latents"],
        mixing_kind=manifest["dgp"]["mixing"],
        mixing=mix,
        seeds=manifest.get("seeds", {}),
        provenance=manifest.get("provenance", {}),
    )
