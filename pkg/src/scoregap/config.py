"""Experiment configuration: defaults, file loading, overrides, validation.

Configs are nested dicts mirroring the manifest's config block. Precedence
is command line (--set / --seed) over config file over built-in defaults;
the fully resolved dict is echoed into the manifest before any
computation. Validation collects every violated constraint at once.
"""

from __future__ import annotations

import copy
import json
from pathlib import Path

from . import fields, guidance, refine as refine_mod, sampler as sampler_mod
from .mixture import load_family, preset_family
from .schedule import NoiseSchedule

DEFAULTS: dict = {
    "schedule": {"kind": "linear", "T": 100, "beta_start": 1e-4, "beta_end": 0.02},
    "family": {"preset": "bimodal-1d", "path": None},
    "field": {
        "kind": "oracle",  # oracle | perturbed | mlp
        "perturbation": {"kind": "constant_vector", "scale": 0.0, "seed": 7},
        "checkpoint": None,
    },
    "guidance": {"mode": "cfg", "omega": 1.0},
    "sampler": {"kind": "ddim", "steps": 50, "corrector_iters": 1, "snr_target": 0.16},
    "refine": {
        "enabled": False,
        "eta": 5e-2,
        "threshold": 1e-3,
        "max_iters": 50,
        "sign": "descent",
        "eps_mode": "resample_each_iter",
        "convergence_rule": "loss_delta",
    },
    "train": {
        "hidden": [64, 64],
        "steps": 2000,
        "batch": 128,
        "lr": 1e-2,
        "p_uncond": 0.1,
        "n_freq": 16,
    },
    "run": {
        "seed": 0,
        "condition": 0,
        "n_chains": 64,
        "trajectory_chains": 4,
        "n_seeds": 20,
        "chains_per_seed": 8,
        "pilot_chains": 48,
        "probes_per_step": 2048,
        "t_values": [],  # empty = an evenly spaced subset of {1..T}
        "omega_grid": {"lo": -2.0, "hi": 6.0, "resolution": 1e-3},
        "sw_projections": 64,
    },
}


class ConfigError(ValueError):
    """Invalid configuration; .problems lists every violated constraint."""

    def __init__(self, problems: list[str]):
        super().__init__("invalid configuration:\n" + "\n".join(f"  - {p}" for p in problems))
        self.problems = problems


def _deep_merge(base: dict, overlay: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, val in overlay.items():
        here = f"{path}.{key}" if path else key
        if key not in out:
            raise ConfigError([f"unknown config key {here!r}"])
        if isinstance(out[key], dict) and isinstance(val, dict):
            out[key] = _deep_merge(out[key], val, here)
        else:
            out[key] = copy.deepcopy(val)
    return out


def _parse_value(raw: str):
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def apply_overrides(cfg: dict, overrides: list[str]) -> dict:
    """Apply repeatable 'dotted.key=value' settings; values parse as JSON when possible."""
    cfg = copy.deepcopy(cfg)
    problems = []
    for item in overrides:
        if "=" not in item:
            problems.append(f"override {item!r} is not of the form key=value")
            continue
        dotted, raw = item.split("=", 1)
        node = cfg
        keys = dotted.split(".")
        try:
            for k in keys[:-1]:
                node = node[k]
            if keys[-1] not in node:
                raise KeyError(keys[-1])
        except (KeyError, TypeError):
            problems.append(f"override targets unknown config key {dotted!r}")
            continue
        node[keys[-1]] = _parse_value(raw)
    if problems:
        raise ConfigError(problems)
    return cfg


def load_config(path=None, overrides: list[str] | None = None, seed: int | None = None) -> dict:
    """Resolve defaults <- config file <- --set overrides <- --seed."""
    cfg = copy.deepcopy(DEFAULTS)
    if path is not None:
        try:
            file_cfg = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError([f"cannot read config file {path}: {exc}"]) from exc
        if not isinstance(file_cfg, dict):
            raise ConfigError([f"config file {path} must hold a JSON object"])
        if "format_version" in file_cfg and "config" in file_cfg:
            # a saved manifest works directly as the config for a re-run
            file_cfg = file_cfg["config"]
        cfg = _deep_merge(cfg, file_cfg)
    if overrides:
        cfg = apply_overrides(cfg, overrides)
    if seed is not None:
        cfg["run"]["seed"] = int(seed)
    validate(cfg)
    return cfg


def validate(cfg: dict) -> None:
    """Check every constraint, raising ConfigError with the full list."""
    problems: list[str] = []
    sch = cfg["schedule"]
    if sch["kind"] != "linear":
        problems.append(f"schedule.kind must be 'linear', got {sch['kind']!r}")
    if not isinstance(sch["T"], int) or sch["T"] < 2:
        problems.append(f"schedule.T must be an integer >= 2, got {sch['T']!r}")
    if not (0 < sch["beta_start"] <= sch["beta_end"] < 1):
        problems.append(
            f"schedule betas must satisfy 0 < beta_start <= beta_end < 1, "
            f"got ({sch['beta_start']}, {sch['beta_end']})"
        )

    fam = cfg["family"]
    if fam["path"] is None and fam["preset"] is None:
        problems.append("family needs either a preset name or a file path")

    fld = cfg["field"]
    if fld["kind"] not in ("oracle", "perturbed", "mlp"):
        problems.append(f"field.kind must be oracle|perturbed|mlp, got {fld['kind']!r}")
    pert = fld["perturbation"]
    if pert["kind"] not in fields.PerturbationSpec._KINDS:
        problems.append(f"field.perturbation.kind {pert['kind']!r} unknown")
    if pert["scale"] < 0:
        problems.append("field.perturbation.scale must be >= 0")
    if fld["kind"] == "mlp" and not fld["checkpoint"]:
        problems.append("field.kind=mlp requires field.checkpoint")

    gd = cfg["guidance"]
    if gd["mode"] not in ("none", "cfg", "cg"):
        problems.append(f"guidance.mode must be none|cfg|cg, got {gd['mode']!r}")

    sp = cfg["sampler"]
    if sp["kind"] not in sampler_mod.SAMPLER_KINDS:
        problems.append(f"sampler.kind must be one of {sampler_mod.SAMPLER_KINDS}, got {sp['kind']!r}")
    if not isinstance(sp["steps"], int) or sp["steps"] < 1:
        problems.append(f"sampler.steps must be an integer >= 1, got {sp['steps']!r}")
    elif isinstance(sch["T"], int) and sp["steps"] > sch["T"]:
        problems.append(f"sampler.steps ({sp['steps']}) cannot exceed schedule.T ({sch['T']})")
    if sp["kind"] == "pc_langevin" and sp["corrector_iters"] < 1:
        problems.append("sampler.kind=pc_langevin requires corrector_iters >= 1")
    if sp["snr_target"] < 0:
        problems.append("sampler.snr_target must be >= 0")

    rf = cfg["refine"]
    if rf["eta"] <= 0:
        problems.append("refine.eta must be positive")
    if rf["threshold"] <= 0:
        problems.append("refine.threshold must be positive")
    if rf["max_iters"] < 0:
        problems.append("refine.max_iters must be >= 0")
    if rf["sign"] not in refine_mod.SIGNS:
        problems.append(f"refine.sign must be one of {refine_mod.SIGNS}")
    if rf["eps_mode"] not in refine_mod.EPS_MODES:
        problems.append(f"refine.eps_mode must be one of {refine_mod.EPS_MODES}")
    if rf["convergence_rule"] not in refine_mod.CONVERGENCE_RULES:
        problems.append(f"refine.convergence_rule must be one of {refine_mod.CONVERGENCE_RULES}")

    tr = cfg["train"]
    if tr["steps"] < 1 or tr["batch"] < 1:
        problems.append("train.steps and train.batch must be >= 1")
    if tr["lr"] <= 0:
        problems.append("train.lr must be positive")
    if not 0 <= tr["p_uncond"] < 1:
        problems.append("train.p_uncond must lie in [0, 1)")

    run = cfg["run"]
    if run["n_chains"] < 1:
        problems.append("run.n_chains must be >= 1")
    if run["n_seeds"] < 1:
        problems.append("run.n_seeds must be >= 1")
    if run["pilot_chains"] < 1:
        problems.append("run.pilot_chains must be >= 1")
    if run["probes_per_step"] < 1:
        problems.append("run.probes_per_step must be >= 1")
    og = run["omega_grid"]
    if not (og["hi"] > og["lo"] and og["resolution"] > 0):
        problems.append(f"run.omega_grid must have hi > lo and resolution > 0, got {og}")

    if problems:
        raise ConfigError(problems)


# --- builders -----------------------------------------------------------


def build_schedule(cfg: dict) -> NoiseSchedule:
    return NoiseSchedule.from_config(cfg["schedule"])


def build_family(cfg: dict):
    fam = cfg["family"]
    if fam.get("path"):
        return load_family(fam["path"])
    return preset_family(fam["preset"])


def build_field(cfg: dict, family, schedule) -> fields.ScoreField:
    """The deployed (possibly imperfect) field the experiment exercises."""
    fld = cfg["field"]
    if fld["kind"] == "oracle":
        return fields.oracle_field(family, schedule)
    if fld["kind"] == "perturbed":
        spec = fields.PerturbationSpec(**fld["perturbation"])
        return fields.perturbed_field(fields.oracle_field(family, schedule), spec)
    from .persist import load_checkpoint

    model = load_checkpoint(fld["checkpoint"])
    return fields.MlpScoreField(model, schedule)


def build_guidance(cfg: dict) -> guidance.GuidanceSpec:
    return guidance.GuidanceSpec(mode=cfg["guidance"]["mode"], omega=float(cfg["guidance"]["omega"]))


def build_sampler(cfg: dict) -> sampler_mod.SamplerConfig:
    sp = cfg["sampler"]
    return sampler_mod.SamplerConfig(kind=sp["kind"], steps=sp["steps"],
                                     corrector_iters=sp["corrector_iters"],
                                     snr_target=sp["snr_target"])


def build_refine(cfg: dict) -> refine_mod.RefineConfig | None:
    rf = cfg["refine"]
    if not rf["enabled"]:
        return None
    return refine_mod.RefineConfig(eta=rf["eta"], threshold=rf["threshold"],
                                   max_iters=rf["max_iters"], sign=rf["sign"],
                                   eps_mode=rf["eps_mode"],
                                   convergence_rule=rf["convergence_rule"])


def t_values(cfg: dict, max_points: int = 8) -> list[int]:
    """The step indices a sweep evaluates; default is an even subset with endpoints."""
    import numpy as np

    run_ts = cfg["run"]["t_values"]
    T = cfg["schedule"]["T"]
    if run_ts:
        bad = [t for t in run_ts if not (1 <= int(t) <= T)]
        if bad:
            raise ConfigError([f"run.t_values entries outside [1, {T}]: {bad}"])
        return [int(t) for t in run_ts]
    n = min(max_points, T)
    return sorted({int(t) for t in np.round(np.linspace(1, T, n))})
