"""Configuration resolution and the command-line workflows end to end."""

import csv
import json

import numpy as np
import pytest

from scoregap import cli, load_manifest
from scoregap.config import ConfigError, DEFAULTS, load_config, t_values, validate
from scoregap.persist import sha256_file


def _write_cfg(tmp_path, overrides):
    path = tmp_path / "config.json"
    path.write_text(json.dumps(overrides))
    return path


FAST = [
    "schedule.T=20",
    "sampler.steps=10",
    "run.n_chains=6",
    "run.trajectory_chains=2",
    "run.probes_per_step=64",
    "run.omega_grid.resolution=0.01",
    "run.t_values=[2,10,20]",
]


class TestConfig:
    def test_defaults_validate(self):
        validate(DEFAULTS)

    def test_unknown_key_rejected(self, tmp_path):
        with pytest.raises(ConfigError, match="unknown config key"):
            load_config(_write_cfg(tmp_path, {"scheduler": {}}))
        with pytest.raises(ConfigError, match="unknown config key"):
            load_config(None, overrides=["sampler.velocity=3"])

    def test_three_way_precedence(self, tmp_path):
        # defaults say T=100; the file says 80; the command line says 60
        path = _write_cfg(tmp_path, {"schedule": {"T": 80}, "run": {"seed": 5}})
        cfg = load_config(path, overrides=["schedule.T=60"], seed=9)
        assert cfg["schedule"]["T"] == 60
        assert cfg["run"]["seed"] == 9  # --seed beats the file
        cfg2 = load_config(path)
        assert cfg2["schedule"]["T"] == 80
        assert cfg2["run"]["seed"] == 5

    def test_all_violations_reported_at_once(self, tmp_path):
        path = _write_cfg(tmp_path, {
            "schedule": {"T": 1, "beta_start": 0.9, "beta_end": 0.1},
            "sampler": {"kind": "warp", "steps": 0},
            "refine": {"eta": -1.0},
        })
        with pytest.raises(ConfigError) as err:
            load_config(path)
        assert len(err.value.problems) >= 5

    def test_json_values_in_overrides(self):
        cfg = load_config(None, overrides=["refine.enabled=true", "guidance.omega=2.5",
                                           "family.preset=\"ring8-2d\""])
        assert cfg["refine"]["enabled"] is True
        assert cfg["guidance"]["omega"] == 2.5
        assert cfg["family"]["preset"] == "ring8-2d"

    def test_t_values_default_subset(self):
        cfg = load_config(None, overrides=["schedule.T=100", "sampler.steps=50"])
        ts = t_values(cfg)
        assert ts[0] == 1 and ts[-1] == 100
        cfg2 = load_config(None, overrides=["run.t_values=[3,7]"])
        assert t_values(cfg2) == [3, 7]
        cfg3 = load_config(None, overrides=["run.t_values=[0]"])
        with pytest.raises(ConfigError):
            t_values(cfg3)


def _run(args):
    return cli.main([str(a) for a in args])


def _csv_rows(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


class TestCliCommands:
    def test_sample_writes_expected_artifacts(self, tmp_path):
        out = tmp_path / "run1"
        rc = _run(["sample", "--out", out, "--seed", "3", *sum([["--set", o] for o in FAST], [])])
        assert rc == 0
        for name in ("manifest.json", "samples.csv", "trajectories.csv",
                     "summary.json", "samples.svg"):
            assert (out / name).exists(), name
        manifest = load_manifest(out / "manifest.json")  # hashes verify
        assert manifest.master_seed == 3
        rows = _csv_rows(out / "samples.csv")
        assert len(rows) == 6
        trows = _csv_rows(out / "trajectories.csv")
        assert {r["chain"] for r in trows} == {"0", "1"}

    def test_sample_determinism_and_manifest_rerun(self, tmp_path):
        args = ["sample", "--seed", "11", *sum([["--set", o] for o in FAST], [])]
        a, b, c = tmp_path / "a", tmp_path / "b", tmp_path / "c"
        assert _run(args + ["--out", a]) == 0
        assert _run(args + ["--out", b]) == 0
        for name in ("samples.csv", "trajectories.csv"):
            assert sha256_file(a / name) == sha256_file(b / name)
        # the manifest alone reproduces the run
        assert _run(["sample", "--config", a / "manifest.json", "--out", c]) == 0
        for name in ("samples.csv", "trajectories.csv"):
            assert sha256_file(a / name) == sha256_file(c / name)

    def test_sweep_omega_oracle_is_one(self, tmp_path):
        out = tmp_path / "sweep"
        rc = _run(["sweep-omega", "--out", out, "--seed", "1",
                   *sum([["--set", o] for o in FAST], []),
                   "--set", "field.kind=perturbed", "--set", "field.perturbation.scale=0.0"])
        assert rc == 0
        stars = _csv_rows(out / "omega_star.csv")
        assert len(stars) == 9  # 3 t values x 3 estimators
        for row in stars:
            assert abs(float(row["omega_star"]) - 1.0) < 1e-6
        assert (out / "sweep.csv").exists()
        assert (out / "sweep.svg").exists()

    def test_sweep_omega_perturbed_grid_agrees(self, tmp_path):
        out = tmp_path / "sweep2"
        rc = _run(["sweep-omega", "--out", out, "--seed", "2",
                   *sum([["--set", o] for o in FAST], []),
                   "--set", "field.kind=perturbed", "--set", "field.perturbation.scale=0.5",
                   "--set", "run.probes_per_step=512"])
        assert rc == 0
        by_key = {}
        for row in _csv_rows(out / "omega_star.csv"):
            by_key[(row["t"], row["estimator"])] = float(row["omega_star"])
        for t in ("2", "10", "20"):
            assert by_key[(t, "least_squares")] == pytest.approx(
                by_key[(t, "grid")], abs=2 * 0.01
            )

    def test_gap_report(self, tmp_path):
        out = tmp_path / "gap"
        rc = _run(["gap-report", "--out", out, "--seed", "4",
                   *sum([["--set", o] for o in FAST], []),
                   "--set", "field.kind=perturbed", "--set", "field.perturbation.scale=0.5"])
        assert rc == 0
        rows = _csv_rows(out / "gap_report.csv")
        assert len(rows) == 10  # sampler.steps
        summary = json.loads((out / "gap_report.json").read_text())
        assert summary["n_chains"] == 6
        assert summary["accumulated_gap"] == pytest.approx(
            sum(float(r["gap"]) for r in rows), rel=1e-9
        )
        # constant perturbation: mean realized gap at omega=1 is scale^2 per step
        assert summary["accumulated_gap"] == pytest.approx(10 * 0.25, rel=1e-9)

    def test_train_writes_checkpoint_and_mlp_field_loads(self, tmp_path):
        out = tmp_path / "train"
        rc = _run(["train", "--out", out, "--seed", "5",
                   "--set", "schedule.T=20", "--set", "sampler.steps=10",
                   "--set", "train.steps=40",
                   "--set", "train.batch=16", "--set", "train.hidden=[8]"])
        assert rc == 0
        assert (out / "checkpoint.txt").exists()
        assert len(_csv_rows(out / "train_loss.csv")) == 40
        # the checkpoint drives a sampling run
        out2 = tmp_path / "mlp-sample"
        rc2 = _run(["sample", "--out", out2, "--seed", "6",
                    *sum([["--set", o] for o in FAST], []),
                    "--set", "field.kind=mlp",
                    "--set", f'field.checkpoint="{out / "checkpoint.txt"}"'])
        assert rc2 == 0

    def test_refine_compare_null_comparison(self, tmp_path):
        out = tmp_path / "rc"
        rc = _run(["refine-compare", "--out", out, "--seed", "7",
                   *sum([["--set", o] for o in FAST], []),
                   "--set", "field.kind=perturbed", "--set", "field.perturbation.scale=0.5",
                   "--set", "run.n_seeds=3", "--set", "run.chains_per_seed=2",
                   "--set", "run.pilot_chains=8",
                   "--set", "refine.enabled=false"])
        assert rc == 0
        rows = _csv_rows(out / "arms.csv")
        # refine disabled: the refined arm must match the omega1 arm exactly
        gaps = {}
        for row in rows:
            gaps.setdefault(row["seed_index"], {})[row["arm"]] = row["accumulated_gap"]
        for seed_gaps in gaps.values():
            assert seed_gaps["refined"] == seed_gaps["omega1"]
        summary = json.loads((out / "summary.json").read_text())
        assert summary["refine_enabled"] is False

    def test_refine_compare_with_refinement(self, tmp_path):
        out = tmp_path / "rc2"
        rc = _run(["refine-compare", "--out", out, "--seed", "8",
                   *sum([["--set", o] for o in FAST], []),
                   "--set", "field.kind=perturbed", "--set", "field.perturbation.scale=0.5",
                   "--set", "run.n_seeds=2", "--set", "run.chains_per_seed=2",
                   "--set", "run.pilot_chains=8",
                   "--set", "refine.enabled=true", "--set", "refine.eps_mode=\"fixed_draw\""])
        assert rc == 0
        traces = _csv_rows(out / "refine_traces.csv")
        assert traces, "refined arm must emit trace rows"
        for row in traces:
            assert float(row["L_final"]) < float(row["L_initial"])
        summary = json.loads((out / "summary.json").read_text())
        assert summary["refined_every_step_improved"] is True

    def test_config_error_exit_code(self, tmp_path, capsys):
        rc = _run(["sample", "--out", tmp_path / "x", "--set", "schedule.T=0"])
        assert rc == 2
        err = capsys.readouterr().err
        assert json.loads(err)["error"] == "config"

    def test_runtime_error_exit_code(self, tmp_path, capsys):
        rc = _run(["sample", "--out", tmp_path / "y",
                   "--set", "field.kind=mlp", "--set", 'field.checkpoint="/nope/ckpt.txt"'])
        assert rc == 3
        assert json.loads(capsys.readouterr().err)["error"] == "runtime"

    def test_manifest_written_before_computation(self, tmp_path, capsys, monkeypatch):
        out = tmp_path / "crash"
        # a condition index outside the family makes _Run raise after the
        # manifest exists
        rc = _run(["sample", "--out", out, "--set", "run.condition=99"])
        assert rc == 2
        assert (out / "manifest.json").exists()

    def test_env_var_out_root(self, tmp_path, monkeypatch):
        monkeypatch.setenv("SCOREGAP_OUT", str(tmp_path / "envroot"))
        rc = _run(["sample", "--seed", "1", *sum([["--set", o] for o in FAST], [])])
        assert rc == 0
        assert (tmp_path / "envroot" / "sample" / "samples.csv").exists()

    def test_family_from_file(self, tmp_path):
        from scoregap import preset_family
        from scoregap.mixture import family_to_dict

        fam_path = tmp_path / "fam.json"
        fam_path.write_text(json.dumps(family_to_dict(preset_family("bimodal-1d"))))
        out = tmp_path / "famrun"
        rc = _run(["sample", "--out", out, "--seed", "2",
                   *sum([["--set", o] for o in FAST], []),
                   "--set", f'family.path="{fam_path}"'])
        assert rc == 0
