"""Command-line interface: help paths, theory reports, the file-based
generate/train/evaluate round trip, and exit codes."""

import hashlib
import json

import numpy as np
import pytest

from invae.cli import main
from invae.experiments import RESULTS_HEADER, reproduce_table


def run_cli(capsys, *argv):
    code = main(list(argv))
    out = capsys.readouterr()
    return code, out.out, out.err


@pytest.mark.parametrize(
    "argv",
    [
        ["--help"],
        ["generate", "--help"],
        ["train", "--help"],
        ["evaluate", "--help"],
        ["reproduce", "--help"],
        ["theory", "--help"],
        ["theory", "t-bound", "--help"],
    ],
)
def test_help_exits_zero(argv, capsys):
    with pytest.raises(SystemExit) as exc:
        main(argv)
    assert exc.value.code == 0
    assert capsys.readouterr().out


class TestTheoryCommands:
    def test_t_bound(self, capsys):
        code, out, _ = run_cli(capsys, "theory", "t-bound", "--d", "4", "--delta", "0.1")
        assert code == 0
        payload = json.loads(out)
        assert payload["bound"] == pytest.approx(27.6256, abs=1e-3)

    def test_gamma_bound_worked_parameters(self, capsys):
        code, out, _ = run_cli(
            capsys, "theory", "gamma-bound",
            "--s", "1", "--theta-max", "1", "--L", "1", "--eta", "0.1",
            "--epsilon", "0.4999999999", "--iota", "0.5",
            "--c1", "1", "--c2", "1", "--l", "2", "--r", "2", "--delta", "0.1",
        )
        assert code == 0
        payload = json.loads(out)
        assert payload["bound"] == pytest.approx(4103.28, abs=0.1)

    def test_lemma_mc_floor(self, capsys):
        code, out, _ = run_cli(
            capsys, "theory", "lemma-mc", "--u", "3", "--t", "5",
            "--trials", "20000", "--seed", "0",
        )
        assert code == 0
        payload = json.loads(out)
        assert payload["coverage"] >= 1 - 2 * (3 / 4) ** 5

    def test_orthant_check_pass(self, capsys):
        code, out, _ = run_cli(
            capsys, "theory", "orthant-check", "--d", "2", "--k", "4",
            "--grid-res", "30", "--seed", "1",
        )
        assert code == 0
        payload = json.loads(out)
        assert payload["status"] in ("pass", "hypothesis-unmet")

    def test_polytope_rank(self, capsys):
        code, out, _ = run_cli(
            capsys, "theory", "polytope-rank", "--d", "2", "--m", "6",
            "--k", "4", "--seed", "3",
        )
        assert code == 0
        assert json.loads(out)["passed"] is True

    def test_orthant_domains(self, capsys):
        code, out, _ = run_cli(capsys, "theory", "orthant-domains", "--d", "3")
        assert code == 0
        assert json.loads(out)["domains"] == 16


def small_config(tmp_path, **over):
    fields = dict(
        latents="dscm", mixing="linear", d=4, k=3, n_train=400, n_val=100,
        degree=2, penalty="minmax", seeds=[0], out=str(tmp_path / "runs"),
        max_steps=60, batch_size=128,
    )
    fields.update(over)
    path = tmp_path / "config.json"
    path.write_text(json.dumps(fields))
    return path


def tree_hash(directory):
    h = hashlib.sha256()
    for path in sorted(directory.rglob("*")):
        if path.is_file():
            h.update(path.name.encode())
            h.update(path.read_bytes())
    return h.hexdigest()


class TestPipelineCommands:
    def test_generate_train_evaluate_round_trip(self, tmp_path, capsys):
        cfg_path = small_config(tmp_path)
        code, out, err = run_cli(capsys, "generate", "--config", str(cfg_path))
        assert code == 0, err
        ds_dir = tmp_path / "runs" / "dataset_seed0"
        assert (ds_dir / "manifest.json").exists()
        # x column count: 2d convention for linear mixing
        x0 = np.loadtxt(ds_dir / "domain_0_x.csv", delimiter=",", ndmin=2)
        assert x0.shape[1] == 8

        code, out, err = run_cli(
            capsys, "train", "--config", str(cfg_path), "--data", str(ds_dir),
            "--out", str(tmp_path / "run0"), "--seed", "0",
        )
        assert code == 0, err
        assert (tmp_path / "run0" / "joint.ckpt.json").exists()
        assert not (tmp_path / "run0" / "stage1.ckpt.json").exists()

        results = tmp_path / "results.csv"
        code, out, err = run_cli(
            capsys, "evaluate", "--run", str(tmp_path / "run0"),
            "--data", str(ds_dir), "--results", str(results),
        )
        assert code == 0, err
        payload = json.loads(out)
        assert "r2_s" in payload and "r2_u" in payload
        header = results.read_text().splitlines()[0]
        assert header == "dgp,penalty,d,k,seed,r2_s,r2_u"

    def test_polynomial_pipeline_emits_two_checkpoints(self, tmp_path, capsys):
        cfg_path = small_config(
            tmp_path, mixing="polynomial", latents="independent", k=2,
            n_train=200, n_val=60, max_steps=30,
        )
        code, _, err = run_cli(capsys, "generate", "--config", str(cfg_path))
        assert code == 0, err
        ds_dir = tmp_path / "runs" / "dataset_seed0"
        x0 = np.loadtxt(ds_dir / "domain_0_x.csv", delimiter=",", ndmin=2)
        assert x0.shape[1] == 200
        code, _, err = run_cli(
            capsys, "train", "--config", str(cfg_path), "--data", str(ds_dir),
            "--out", str(tmp_path / "runP"), "--seed", "0",
        )
        assert code == 0, err
        assert (tmp_path / "runP" / "stage1.ckpt.json").exists()
        assert (tmp_path / "runP" / "stage2.ckpt.json").exists()
        code, _, err = run_cli(
            capsys, "evaluate", "--run", str(tmp_path / "runP"), "--data", str(ds_dir),
        )
        assert code == 0, err

    def test_generate_idempotent_bytes(self, tmp_path, capsys):
        cfg_path = small_config(tmp_path)
        run_cli(capsys, "generate", "--config", str(cfg_path))
        first = tree_hash(tmp_path / "runs" / "dataset_seed0")
        run_cli(capsys, "generate", "--config", str(cfg_path))
        assert tree_hash(tmp_path / "runs" / "dataset_seed0") == first

    def test_bad_config_field_exit_2(self, tmp_path, capsys):
        path = tmp_path / "bad.json"
        path.write_text(json.dumps({"latents": "nope"}))
        code, _, err = run_cli(capsys, "generate", "--config", str(path))
        assert code == 2
        assert "latents" in err

    def test_unknown_config_key_exit_2(self, tmp_path, capsys):
        path = tmp_path / "bad.json"
        path.write_text(json.dumps({"latent_kind": "dscm"}))
        code, _, err = run_cli(capsys, "generate", "--config", str(path))
        assert code == 2

    def test_missing_dataset_exit_4(self, tmp_path, capsys):
        cfg_path = small_config(tmp_path)
        code, _, err = run_cli(
            capsys, "train", "--config", str(cfg_path),
            "--data", str(tmp_path / "nowhere"), "--out", str(tmp_path / "o"),
        )
        assert code == 4

    def test_manifest_mismatch_exit_2(self, tmp_path, capsys):
        cfg_path = small_config(tmp_path)
        run_cli(capsys, "generate", "--config", str(cfg_path))
        ds_dir = tmp_path / "runs" / "dataset_seed0"
        bad_cfg = small_config(tmp_path, d=8)
        code, _, err = run_cli(
            capsys, "train", "--config", str(bad_cfg), "--data", str(ds_dir),
            "--out", str(tmp_path / "o"),
        )
        assert code == 2


class TestReproduce:
    def test_csv_schema_with_stubbed_cells(self, tmp_path, monkeypatch):
        import invae.experiments as exps

        def fake_worker(args):
            cfg_dict, seed = args
            return cfg_dict, seed, 0.9 + 0.01 * seed, 0.1 - 0.01 * seed

        monkeypatch.setattr(exps, "_cell_worker", fake_worker)
        path = exps.reproduce_table("linear-main", "desk", tmp_path, jobs=1)
        lines = path.read_text().splitlines()
        assert lines[0] == ",".join(RESULTS_HEADER)
        assert len(lines) == 1 + 6  # 2 DGPs x 3 penalties
        first = lines[1].split(",")
        assert first[0] == "linear-main"
        assert first[4] == "32" and first[5] == "16"

    def test_aggregation_matches_hand_computation(self, tmp_path, monkeypatch):
        import invae.experiments as exps

        values = {0: (0.91, 0.11), 1: (0.95, 0.07), 2: (0.87, 0.09)}

        def fake_worker(args):
            cfg_dict, seed = args
            r2s, r2u = values[seed]
            return cfg_dict, seed, r2s, r2u

        monkeypatch.setattr(exps, "_cell_worker", fake_worker)
        path = exps.reproduce_table("domains-sweep", "desk", tmp_path, jobs=1)
        row = path.read_text().splitlines()[1].split(",")
        r2s = np.array([v[0] for v in values.values()])
        r2u = np.array([v[1] for v in values.values()])
        assert float(row[8]) == pytest.approx(r2s.mean(), abs=5e-5)
        assert float(row[9]) == pytest.approx(r2s.std(ddof=1) / np.sqrt(3), abs=5e-5)
        assert float(row[10]) == pytest.approx(r2u.mean(), abs=5e-5)
        assert float(row[11]) == pytest.approx(r2u.std(ddof=1) / np.sqrt(3), abs=5e-5)

    def test_domains_sweep_grid(self, tmp_path, monkeypatch):
        import invae.experiments as exps

        seen = []

        def fake_worker(args):
            cfg_dict, seed = args
            seen.append((cfg_dict["k"], seed))
            return cfg_dict, seed, 0.5, 0.5

        monkeypatch.setattr(exps, "_cell_worker", fake_worker)
        exps.reproduce_table("domains-sweep", "desk", tmp_path, jobs=1)
        ks = sorted({k for k, _ in seen})
        assert ks == [2, 16]

    def test_unknown_table(self, tmp_path):
        from invae.experiments import ConfigError

        with pytest.raises(ConfigError):
            reproduce_table("no-such-table", "desk", tmp_path)

    def test_deterministic_env_forces_single_job(self, tmp_path, monkeypatch):
        import invae.experiments as exps

        monkeypatch.setenv("INVAE_DETERMINISTIC", "1")
        calls = {"pool": 0}

        class Boom:
            def __init__(self, *a, **k):
                calls["pool"] += 1

        monkeypatch.setattr(exps, "ProcessPoolExecutor", Boom)
        monkeypatch.setattr(
            exps, "_cell_worker", lambda args: (args[0], args[1], 0.5, 0.5)
        )
        exps.reproduce_table("domains-sweep", "desk", tmp_path, jobs=4)
        assert calls["pool"] == 0
