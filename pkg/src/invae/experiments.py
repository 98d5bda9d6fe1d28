"""End-to-end experiment cells and table reproduction.

One cell = (DGP, penalty, seed): generate a dataset, train the matching
pipeline (joint linear autoencoder for linear mixing; stage 1 + stage 2 for
polynomial mixing), and score block identification on the validation split.
Grids aggregate cells into mean +/- standard-error tables.
"""

from __future__ import annotations

import csv
import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import data as data_mod
from .evaluation import EvalReport, affine_fit, block_identification
from .invariance import PENALTY_KINDS, PenaltyConfig, total_penalty
from .models import (
    LinearAutoencoder,
    PolynomialAutoencoder,
    load_checkpoint,
    save_checkpoint,
)
from .trainer import TrainConfig, train_linear_joint, train_stage1, train_stage2

__all__ = [
    "ConfigError",
    "ExperimentConfig",
    "run_cell",
    "generate_and_save",
    "train_run",
    "evaluate_run",
    "reproduce_table",
    "TABLE_IDS",
    "RESULTS_HEADER",
]


class ConfigError(ValueError):
    """An experiment config field is missing or invalid; message names it."""


DESK = {"n_train": 5000, "n_val": 1000, "n_seeds": 3}
FULL = {"n_train": 10000, "n_val": 2000, "n_seeds": 5}
TABLE_IDS = ("linear-main", "poly-main", "domains-sweep")
RESULTS_HEADER = [
    "table",
    "mixing",
    "dgp",
    "penalty",
    "d",
    "k",
    "degree",
    "n_seeds",
    "r2_s_mean",
    "r2_s_stderr",
    "r2_u_mean",
    "r2_u_stderr",
]


@dataclass
class ExperimentConfig:
    latents: str = "dscm"
    mixing: str = "linear"
    d: int = 8
    k: int = 4
    n_train: int = 5000
    n_val: int = 1000
    degree: int = 2
    penalty: str = "minmax+mmd"
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2])
    out: str = "runs"
    max_steps: int = 2000
    batch_size: int = 1024

    def validate(self) -> None:
        checks = [
            (self.latents in data_mod.LATENT_KINDS, "latents"),
            (self.mixing in data_mod.MIXING_KINDS, "mixing"),
            (self.d >= 2 and self.d % 2 == 0, "d"),
            (self.k >= 2, "k"),
            (self.n_train >= 1, "n_train"),
            (self.n_val >= 1, "n_val"),
            (self.degree >= 1, "degree"),
            (self.penalty in PENALTY_KINDS, "penalty"),
            (bool(self.seeds), "seeds"),
            (self.max_steps >= 1, "max_steps"),
            (self.batch_size >= 2, "batch_size"),
        ]
        for ok, name in checks:
            if not ok:
                raise ConfigError(f"invalid config field: {name}")

    @classmethod
    def from_json(cls, path) -> "ExperimentConfig":
        raw = json.loads(Path(path).read_text())
        unknown = set(raw) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"invalid config field: {sorted(unknown)[0]}")
        cfg = cls(**raw)
        cfg.validate()
        return cfg

    def to_json(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(asdict(self), indent=2))
        return path


def _split_seeds(seed: int, count: int) -> list[int]:
    return [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(count)]


def fit_whitener(pooled: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Symmetric (ZCA) whitening transform of the pooled observations.

    Returns (mu, W) with x_white = (x - mu) @ W. Directions whose variance
    is numerically zero are projected out, so W keeps the ambient dimension
    but may be rank-deficient. Whitening equalizes curvature across
    observation directions: without it, reconstruction training all but
    ignores the stable latents, whose share of the raw variance is tiny.
    """
    mu = pooled.mean(axis=0)
    cov = np.cov(pooled - mu, rowvar=False)
    evals, evecs = np.linalg.eigh(cov)
    keep = evals > 1e-10 * evals.max()
    W = (evecs[:, keep] * evals[keep] ** -0.5) @ evecs[:, keep].T
    return mu, W


def _penalty_config(cfg: ExperimentConfig) -> PenaltyConfig:
    """Penalty on the first d/2 encoder coordinates; the MMD bandwidth is the
    median heuristic for linear mixing and fixed 1.0 otherwise."""
    return PenaltyConfig(
        kind=cfg.penalty,
        s_hat=tuple(range(cfg.d // 2)),
        top_k=10,
        bandwidth="median" if cfg.mixing == "linear" else 1.0,
        lam=1.0,
    )


def _per_domain_penalty(zhat_domains, pen: PenaltyConfig) -> list[float]:
    """Residual of each domain against domain 0 (domain 0 reads 0.0)."""
    out = [0.0]
    for j in range(1, len(zhat_domains)):
        out.append(total_penalty([zhat_domains[0], zhat_domains[j]], pen))
    return out


def run_cell(
    cfg: ExperimentConfig, seed: int, out_dir: Path | None = None
) -> EvalReport:
    """Run one (config, seed) cell end to end; optionally persists artifacts."""
    cfg.validate()
    ds_seed, model_seed, train_seed, stage2_seed = _split_seeds(seed, 4)
    ds = data_mod.generate_dataset(
        cfg.latents,
        cfg.mixing,
        cfg.d,
        cfg.k,
        cfg.n_train,
        cfg.n_val,
        degree=cfg.degree,
        seed=ds_seed,
    )
    pen = _penalty_config(cfg)
    tconf = TrainConfig(
        batch_size=cfg.batch_size,
        max_steps=cfg.max_steps,
        penalty=pen,
        seed=train_seed,
    )
    z_val = np.concatenate(ds.val_z(), axis=0)

    if cfg.mixing == "linear":
        model = LinearAutoencoder(ds.n_obs, cfg.d, seed=model_seed)
        result = train_linear_joint(ds.train_x(), model, tconf)
        zhat_domains = [model.encode(x) for x in ds.val_x()]
        affine_src = np.concatenate(zhat_domains, axis=0)
        artifacts = {"joint": (model, result)}
    else:
        wmu, wmat = fit_whitener(np.concatenate(ds.train_x(), axis=0))
        x_white = [(x - wmu) @ wmat for x in ds.train_x()]
        stage1 = PolynomialAutoencoder(ds.n_obs, cfg.d, cfg.degree, seed=model_seed)
        res1 = train_stage1(x_white, stage1, tconf)
        res1.meta["whiten_mean"] = wmu.tolist()
        res1.meta["whiten_matrix"] = wmat.tolist()
        xtilde_train = [stage1.encode(x) for x in x_white]
        res2 = train_stage2(xtilde_train, tconf, model_seed=stage2_seed)
        mu = np.asarray(res2.meta["input_mean"])
        sigma = np.asarray(res2.meta["input_std"])
        xtilde_val = [stage1.encode((x - wmu) @ wmat) for x in ds.val_x()]
        zhat_domains = [res2.model.encode((x - mu) / sigma) for x in xtilde_val]
        affine_src = np.concatenate(xtilde_val, axis=0)
        artifacts = {"stage1": (stage1, res1), "stage2": (res2.model, res2)}

    zhat_val = np.concatenate(zhat_domains, axis=0)
    r2_s, r2_u = block_identification(zhat_val, z_val, ds.S, ds.U, pen.s_hat)
    A, c, fit_r2, cond = affine_fit(affine_src, z_val)
    report = EvalReport(
        r2_s=r2_s,
        r2_u=r2_u,
        s_hat=pen.s_hat,
        affine_fit_r2=fit_r2,
        affine_cond=cond,
        affine_A=A.tolist(),
        affine_c=c.tolist(),
        per_domain_penalty=_per_domain_penalty(
            [z[:, list(pen.s_hat)] for z in zhat_domains], pen
        ),
        context={
            "dgp": cfg.latents,
            "mixing": cfg.mixing,
            "penalty": cfg.penalty,
            "d": cfg.d,
            "k": ds.k,
            "seed": seed,
        },
    )
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        for name, (model, result) in artifacts.items():
            save_checkpoint(model, out_dir / f"{name}.ckpt.json", meta=result.meta)
            result.log.to_csv(out_dir / f"{name}_log.csv")
        report.to_json(out_dir / "report.json")
    return report


# ---------------------------------------------------------------------------
# File-based commands (generate / train / evaluate)
# ---------------------------------------------------------------------------


def generate_and_save(cfg: ExperimentConfig, out: Path) -> list[Path]:
    """One dataset directory per seed; regeneration is byte-identical."""
    cfg.validate()
    out = Path(out)
    dirs = []
    for seed in cfg.seeds:
        ds_seed = _split_seeds(seed, 4)[0]
        ds = data_mod.generate_dataset(
            cfg.latents,
            cfg.mixing,
            cfg.d,
            cfg.k,
            cfg.n_train,
            cfg.n_val,
            degree=cfg.degree,
            seed=ds_seed,
        )
        dirs.append(data_mod.save_dataset(ds, out / f"dataset_seed{seed}"))
    return dirs


def _check_manifest(cfg: ExperimentConfig, ds: data_mod.MultiDomainDataset) -> None:
    if ds.d != cfg.d:
        raise ConfigError(f"invalid config field: d (dataset has d={ds.d})")
    if ds.latents != cfg.latents or ds.mixing_kind != cfg.mixing:
        raise ConfigError("invalid config field: latents/mixing (manifest mismatch)")


def train_run(cfg: ExperimentConfig, dataset_dir: Path, out: Path, seed: int) -> Path:
    """Train on a saved dataset; emits joint.ckpt.json for linear pipelines and
    stage1/stage2 checkpoints for polynomial pipelines."""
    cfg.validate()
    ds = data_mod.load_dataset(dataset_dir)
    _check_manifest(cfg, ds)
    _, model_seed, train_seed, stage2_seed = _split_seeds(seed, 4)
    pen = _penalty_config(cfg)
    tconf = TrainConfig(
        batch_size=cfg.batch_size,
        max_steps=cfg.max_steps,
        penalty=pen,
        seed=train_seed,
    )
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    if cfg.mixing == "linear":
        model = LinearAutoencoder(ds.n_obs, cfg.d, seed=model_seed)
        result = train_linear_joint(ds.train_x(), model, tconf)
        save_checkpoint(model, out / "joint.ckpt.json", meta=result.meta)
        result.log.to_csv(out / "joint_log.csv")
    else:
        wmu, wmat = fit_whitener(np.concatenate(ds.train_x(), axis=0))
        x_white = [(x - wmu) @ wmat for x in ds.train_x()]
        stage1 = PolynomialAutoencoder(ds.n_obs, cfg.d, cfg.degree, seed=model_seed)
        res1 = train_stage1(x_white, stage1, tconf)
        res1.meta["whiten_mean"] = wmu.tolist()
        res1.meta["whiten_matrix"] = wmat.tolist()
        save_checkpoint(stage1, out / "stage1.ckpt.json", meta=res1.meta)
        res1.log.to_csv(out / "stage1_log.csv")
        xtilde = [stage1.encode(x) for x in x_white]
        res2 = train_stage2(xtilde, tconf, model_seed=stage2_seed)
        save_checkpoint(res2.model, out / "stage2.ckpt.json", meta=res2.meta)
        res2.log.to_csv(out / "stage2_log.csv")
    return out


def evaluate_run(run_dir: Path, dataset_dir: Path, results_csv: Path | None = None):
    """Score a trained run directory on its dataset's validation split."""
    run_dir = Path(run_dir)
    ds = data_mod.load_dataset(dataset_dir)
    s_hat = tuple(range(ds.d // 2))
    pen = PenaltyConfig(
        kind="minmax+mmd",
        s_hat=s_hat,
        bandwidth="median" if ds.mixing_kind == "linear" else 1.0,
    )
    z_val = np.concatenate(ds.val_z(), axis=0)
    if (run_dir / "joint.ckpt.json").exists():
        model, meta = load_checkpoint(run_dir / "joint.ckpt.json")
        zhat_domains = [model.encode(x) for x in ds.val_x()]
        affine_src = np.concatenate(zhat_domains, axis=0)
    elif (run_dir / "stage2.ckpt.json").exists():
        stage1, meta1 = load_checkpoint(run_dir / "stage1.ckpt.json")
        stage2, meta = load_checkpoint(run_dir / "stage2.ckpt.json")
        wmu = np.asarray(meta1["whiten_mean"])
        wmat = np.asarray(meta1["whiten_matrix"])
        mu = np.asarray(meta["input_mean"])
        sigma = np.asarray(meta["input_std"])
        xtilde_val = [stage1.encode((x - wmu) @ wmat) for x in ds.val_x()]
        zhat_domains = [stage2.encode((x - mu) / sigma) for x in xtilde_val]
        affine_src = np.concatenate(xtilde_val, axis=0)
    else:
        raise FileNotFoundError(f"no checkpoint found under {run_dir}")
    zhat_val = np.concatenate(zhat_domains, axis=0)
    r2_s, r2_u = block_identification(zhat_val, z_val, ds.S, ds.U, s_hat)
    A, c, fit_r2, cond = affine_fit(affine_src, z_val)
    report = EvalReport(
        r2_s=r2_s,
        r2_u=r2_u,
        s_hat=s_hat,
        affine_fit_r2=fit_r2,
        affine_cond=cond,
        affine_A=A.tolist(),
        affine_c=c.tolist(),
        per_domain_penalty=_per_domain_penalty(
            [z[:, list(s_hat)] for z in zhat_domains], pen
        ),
        context={
            "dgp": ds.latents,
            "mixing": ds.mixing_kind,
            "d": ds.d,
            "k": ds.k,
            "seed": meta.get("seed", ""),
        },
    )
    report.to_json(run_dir / "report.json")
    if results_csv is not None:
        results_csv = Path(results_csv)
        new = not results_csv.exists()
        with results_csv.open("a", newline="") as fh:
            writer = csv.writer(fh)
            if new:
                writer.writerow(EvalReport.CSV_HEADER)
            writer.writerow(report.csv_row())
    return report


# ---------------------------------------------------------------------------
# Table reproduction
# ---------------------------------------------------------------------------


def _table_cells(table_id: str, scale: dict) -> list[ExperimentConfig]:
    if table_id == "linear-main":
        return [
            ExperimentConfig(
                latents=latents, mixing="linear", d=32, k=16, penalty=penalty,
                n_train=scale["n_train"], n_val=scale["n_val"],
            )
            for latents in ("independent", "dscm")
            for penalty in PENALTY_KINDS
        ]
    if table_id == "poly-main":
        d, degree = (6, 2) if scale is DESK else (14, 3)
        return [
            ExperimentConfig(
                latents=latents, mixing="polynomial", d=d, degree=degree, k=16,
                penalty=penalty, n_train=scale["n_train"], n_val=scale["n_val"],
            )
            for latents in ("independent", "dscm")
            for penalty in PENALTY_KINDS
        ]
    if table_id == "domains-sweep":
        mixings = ["linear"] if scale is DESK else ["linear", "polynomial"]
        cells = []
        for mixing in mixings:
            for k in (2, 16):
                cells.append(
                    ExperimentConfig(
                        latents="dscm",
                        mixing=mixing,
                        d=32 if mixing == "linear" else 6,
                        degree=2,
                        k=k,
                        penalty="minmax+mmd",
                        n_train=scale["n_train"],
                        n_val=scale["n_val"],
                    )
                )
        return cells
    raise ConfigError(f"unknown table id {table_id!r}")


def _cell_worker(args):
    cfg_dict, seed = args
    cfg = ExperimentConfig(**cfg_dict)
    report = run_cell(cfg, seed)
    return cfg_dict, seed, report.r2_s, report.r2_u


def reproduce_table(
    table_id: str, scale: str = "desk", out: Path = Path("tables"), jobs: int = 1
) -> Path:
    """Run a table's full grid and write its mean +/- stderr CSV.

    Desk scale uses 5000 training samples and 3 seeds per cell; full scale
    mirrors the reference protocol (10000/2000 split, 5 seeds). Cells are
    independent and may run in parallel worker processes; results are
    aggregated in a fixed order either way.
    """
    if scale not in ("desk", "full"):
        raise ConfigError(f"unknown scale {scale!r}")
    params = DESK if scale == "desk" else FULL
    if os.environ.get("INVAE_DETERMINISTIC") == "1":
        jobs = 1
    cells = _table_cells(table_id, params)
    seeds = list(range(params["n_seeds"]))
    work = [(asdict(cfg), seed) for cfg in cells for seed in seeds]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            outcomes = list(pool.map(_cell_worker, work))
    else:
        outcomes = [_cell_worker(w) for w in work]

    by_cell: dict[str, dict] = {}
    for cfg_dict, seed, r2_s, r2_u in outcomes:
        key = json.dumps(cfg_dict, sort_keys=True)
        slot = by_cell.setdefault(key, {"cfg": cfg_dict, "r2_s": [], "r2_u": []})
        slot["r2_s"].append(r2_s)
        slot["r2_u"].append(r2_u)

    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"{table_id}_{scale}.csv"
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(RESULTS_HEADER)
        for cfg in cells:
            key = json.dumps(asdict(cfg), sort_keys=True)
            slot = by_cell[key]
            r2_s = np.array(slot["r2_s"])
            r2_u = np.array(slot["r2_u"])
            stderr = lambda a: float(a.std(ddof=1) / np.sqrt(len(a))) if len(a) > 1 else 0.0
            writer.writerow(
                [
                    table_id,
                    cfg.mixing,
                    cfg.latents,
                    cfg.penalty,
                    cfg.d,
                    cfg.k,
                    cfg.degree,
                    len(seeds),
                    f"{r2_s.mean():.4f}",
                    f"{stderr(r2_s):.4f}",
                    f"{r2_u.mean():.4f}",
                    f"{stderr(r2_u):.4f}",
                ]
            )
    return path
