"""Experiment runner: every workflow as a subcommand.

Subcommands: train, sample, sweep-omega, gap-report, refine-compare.
Global flags: --config PATH, --seed N, --out DIR, --set key=value
(repeatable). SCOREGAP_OUT sets the default output root. Exit codes:
0 success, 2 config error, 3 runtime error.

Each command resolves its configuration (command line > config file >
defaults), writes the manifest before any heavy computation, derives all
randomness from the single master seed, and finishes by rewriting the
manifest with the hashed output inventory. CSV files are the canonical
numeric outputs; SVG figures are derived views.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import config as cfgmod
from . import gap as gapmod
from . import guidance as gmod
from . import svg
from .config import ConfigError
from .fields import oracle_field, train_mlp
from .mixture import sample as sample_mixture
from .persist import RunManifest, save_checkpoint, save_manifest
from .refine import RefineConfig
from .sampler import sample_batch, sample_chain
from .schedule import forward_marginal


def _write_csv(path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)
    return Path(path)


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return f"{v:.17g}"
    return v


class _Run:
    """Shared command scaffolding: out dir, manifest, seed streams."""

    def __init__(self, cfg: dict, out: Path):
        self.cfg = cfg
        self.out = out
        self.out.mkdir(parents=True, exist_ok=True)
        self.master_seed = int(cfg["run"]["seed"])
        self.manifest = RunManifest(config=cfg, master_seed=self.master_seed)
        # written up front so a crash still leaves a diagnosable record
        save_manifest(self.manifest, self.out / "manifest.json")
        self._files: list[Path] = []

        self.schedule = cfgmod.build_schedule(cfg)
        self.family = cfgmod.build_family(cfg)
        self.condition = int(cfg["run"]["condition"])
        if not 0 <= self.condition < self.family.n_classes:
            raise ConfigError(
                [f"run.condition {self.condition} outside [0, {self.family.n_classes})"]
            )
        self.oracle = oracle_field(self.family, self.schedule)
        self.field = cfgmod.build_field(cfg, self.family, self.schedule)

    def seed_for(self, label: str) -> int:
        # label hashed with sha256, not hash(): runs must agree across processes
        tag = int.from_bytes(hashlib.sha256(label.encode()).digest()[:4], "little")
        return int(np.random.SeedSequence([self.master_seed, tag]).generate_state(1)[0])

    def seed_stream(self, label: str, n: int) -> list[int]:
        rng = np.random.default_rng(self.seed_for(label))
        return [int(s) for s in rng.integers(0, 2**62, size=n)]

    def add(self, path: Path) -> Path:
        self._files.append(Path(path))
        return Path(path)

    def finish(self) -> None:
        for p in self._files:
            self.manifest.record_output(p, self.out)
        save_manifest(self.manifest, self.out / "manifest.json")
        print(f"wrote {len(self._files)} artifacts to {self.out}")


def _marginal_probes(run: _Run, t: int, n: int, seed: int) -> np.ndarray:
    """Draws from the conditional step-t marginal via the forward closed form."""
    rng = np.random.default_rng(seed)
    x0 = sample_mixture(run.family.mixture_for(run.condition), rng, n)
    return forward_marginal(run.schedule, x0, t, rng.standard_normal(x0.shape))


# --- commands -------------------------------------------------------------


def cmd_train(run: _Run) -> None:
    tr = run.cfg["train"]
    model, losses = train_mlp(
        run.family, run.schedule,
        steps=int(tr["steps"]), batch=int(tr["batch"]), lr=float(tr["lr"]),
        hidden=tuple(tr["hidden"]), n_freq=int(tr["n_freq"]),
        seed=run.seed_for("train"), p_uncond=float(tr["p_uncond"]),
    )
    run.add(save_checkpoint(model, run.out / "checkpoint.txt"))
    run.add(_write_csv(run.out / "train_loss.csv", ["step", "loss"],
                       [(i, _fmt(l)) for i, l in enumerate(losses)]))
    window = max(1, len(losses) // 50)
    smooth = [float(np.mean(losses[max(0, i - window):i + 1])) for i in range(len(losses))]
    svg.line_plot(np.arange(len(losses)), [losses, smooth], ["loss", "smoothed"],
                  title="training loss", xlabel="step", ylabel="loss",
                  path=run.out / "train_loss.svg")
    run.add(run.out / "train_loss.svg")


def _chain_rows(chain_idx, traj):
    rows = []
    for i, rec in enumerate(traj.records):
        rows.append([chain_idx, rec.t, *[_fmt(v) for v in traj.states[i]],
                     _fmt(rec.gap_used), _fmt(rec.l_at_1), _fmt(rec.l_at_omega),
                     _fmt(rec.omega_used)])
    rows.append([chain_idx, 0, *[_fmt(v) for v in traj.states[-1]], "", "", "", ""])
    return rows


def cmd_sample(run: _Run) -> None:
    cfg = run.cfg
    guide = cfgmod.build_guidance(cfg)
    samp = cfgmod.build_sampler(cfg)
    refine = cfgmod.build_refine(cfg)
    n = int(cfg["run"]["n_chains"])
    d = run.family.dim

    n_traj = min(int(cfg["run"]["trajectory_chains"]), n)
    chain_seeds = run.seed_stream("chains", n)
    trajs = [
        sample_chain(run.schedule, run.field, guide, samp, run.condition, chain_seeds[i],
                     refine=refine, oracle=run.oracle)
        for i in range(n_traj)
    ]
    if refine is None and n > n_traj:
        finals = sample_batch(run.schedule, run.field, guide, samp, run.condition, n,
                              run.seed_for("batch"))
    else:
        rest = [
            sample_chain(run.schedule, run.field, guide, samp, run.condition, chain_seeds[i],
                         refine=refine)
            for i in range(n_traj, n)
        ]
        finals = np.stack([t.final for t in trajs + rest])

    run.add(_write_csv(run.out / "samples.csv", ["chain", *[f"x{j}" for j in range(d)]],
                       [[i, *[_fmt(v) for v in row]] for i, row in enumerate(np.atleast_2d(finals))]))
    header = ["chain", "t", *[f"x{j}" for j in range(d)], "gap", "l_at_1", "l_at_omega", "omega"]
    rows = []
    for i, traj in enumerate(trajs):
        rows.extend(_chain_rows(i, traj))
    run.add(_write_csv(run.out / "trajectories.csv", header, rows))

    if refine is not None:
        rrows = []
        for i, traj in enumerate(trajs):
            for rec in traj.records:
                if rec.refine_trace is None:
                    continue
                for k, L in enumerate(rec.refine_trace.losses):
                    rrows.append([i, rec.t, k + 1, _fmt(L), rec.refine_trace.terminated_by])
        run.add(_write_csv(run.out / "refine_traces.csv",
                           ["chain", "t", "iter", "L", "terminated_by"], rrows))

    # quick-look sample quality against fresh data draws
    rng = np.random.default_rng(run.seed_for("metrics"))
    fresh = sample_mixture(run.family.mixture_for(run.condition), rng, min(n, 4096))
    gen = np.atleast_2d(finals)[: fresh.shape[0]]
    summary = {
        "n_chains": n,
        "mean": np.mean(finals, axis=0).tolist(),
        "variance": np.var(finals, axis=0).tolist(),
        "sliced_wasserstein_to_data": gapmod.sliced_wasserstein(
            gen, fresh, int(cfg["run"]["sw_projections"]), np.random.default_rng(run.seed_for("sw"))
        ),
    }
    (run.out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n", encoding="utf-8")
    run.add(run.out / "summary.json")

    if d == 1:
        svg.histogram(np.atleast_2d(finals)[:, 0], reference=fresh[:, 0],
                      labels=["generated", "data"], title="generated vs data",
                      xlabel="x", path=run.out / "samples.svg")
    else:
        svg.scatter_plot([np.atleast_2d(finals)[:, :2], fresh[:, :2]],
                         labels=["generated", "data"], title="generated vs data",
                         xlabel="x0", ylabel="x1", path=run.out / "samples.svg")
    run.add(run.out / "samples.svg")


def cmd_sweep_omega(run: _Run) -> None:
    cfg = run.cfg
    og = cfg["run"]["omega_grid"]
    omegas = gmod.grid_points(float(og["lo"]), float(og["hi"]), float(og["resolution"]))
    ts = cfgmod.t_values(cfg)
    n_probes = int(cfg["run"]["probes_per_step"])
    probe_seeds = run.seed_stream("probes", len(ts))

    curve_rows, star_rows, star_by_t = [], [], {}
    curves = {}
    for t, ps in zip(ts, probe_seeds):
        probes = _marginal_probes(run, t, n_probes, ps)
        ev = gmod.evaluate_probes(probes, run.field, run.oracle, run.condition, t)
        l_vals = gmod.l_curve(ev, omegas)
        curves[t] = l_vals
        curve_rows.extend(
            [t, _fmt(float(w)), _fmt(float(l)), "grid", n_probes, run.master_seed]
            for w, l in zip(omegas, l_vals)
        )
        for est in gmod.ESTIMATORS:
            res = gmod.omega_star_from_eval(
                ev, t, estimator=est,
                grid_range=(float(og["lo"]), float(og["hi"])),
                grid_resolution=float(og["resolution"]),
            )
            star_rows.append([t, est, _fmt(res.value), _fmt(gmod.l_from_eval(ev, res.value)),
                              n_probes, run.master_seed,
                              _fmt(res.grid_resolution)])
            if est == "least_squares":
                star_by_t[t] = res.value

    run.add(_write_csv(run.out / "sweep.csv",
                       ["t", "omega", "L", "estimator", "n_probes", "seed"], curve_rows))
    run.add(_write_csv(run.out / "omega_star.csv",
                       ["t", "estimator", "omega_star", "L_at_omega_star", "n_probes",
                        "seed", "grid_resolution"], star_rows))

    show = ts[:: max(1, len(ts) // 4)][:4]
    svg.line_plot(omegas, [curves[t] for t in show], [f"t={t}" for t in show],
                  title="per-step deviation vs guidance weight", xlabel="omega", ylabel="L",
                  path=run.out / "sweep.svg")
    run.add(run.out / "sweep.svg")
    svg.line_plot(ts, [[star_by_t[t] for t in ts]], ["least_squares"],
                  title="estimated optimal weight by step", xlabel="t", ylabel="omega*",
                  path=run.out / "omega_star.svg")
    run.add(run.out / "omega_star.svg")


def cmd_gap_report(run: _Run) -> None:
    cfg = run.cfg
    guide = cfgmod.build_guidance(cfg)
    samp = cfgmod.build_sampler(cfg)
    refine = cfgmod.build_refine(cfg)
    n = int(cfg["run"]["n_chains"])
    seeds = run.seed_stream("chains", n)
    trajs = [
        sample_chain(run.schedule, run.field, guide, samp, run.condition, s,
                     refine=refine, oracle=run.oracle)
        for s in seeds
    ]
    report = gapmod.aggregate_reports([gapmod.accumulated_gap(tr, run.oracle) for tr in trajs])
    stars = gapmod.omega_star_by_t(trajs, run.field, run.oracle, run.condition)

    rows = [
        [st.t, _fmt(st.gap), _fmt(st.l_at_1), _fmt(st.l_at_omega),
         _fmt(stars[st.t].value if st.t in stars else None)]
        for st in report.steps
    ]
    run.add(_write_csv(run.out / "gap_report.csv",
                       ["t", "gap", "L1", "Lw", "omega_star"], rows))
    summary = {
        "accumulated_gap": report.accumulated_gap,
        "n_chains": report.n_chains,
        "seeds": report.seeds,
    }
    (run.out / "gap_report.json").write_text(json.dumps(summary, indent=2) + "\n", encoding="utf-8")
    run.add(run.out / "gap_report.json")

    ts = [st.t for st in report.steps]
    l1s = [st.l_at_1 if st.l_at_1 is not None else float("nan") for st in report.steps]
    svg.line_plot(ts, [[st.gap for st in report.steps], l1s],
                  ["gap (used)", "L(1)"], title="per-step score gap along chains",
                  xlabel="t", ylabel="squared error", path=run.out / "gap.svg")
    run.add(run.out / "gap.svg")


def cmd_refine_compare(run: _Run) -> None:
    cfg = run.cfg
    samp = cfgmod.build_sampler(cfg)
    refine = cfgmod.build_refine(cfg)  # None when refine.enabled is false
    n_seeds = int(cfg["run"]["n_seeds"])
    per_seed = int(cfg["run"]["chains_per_seed"])
    n_pilot = int(cfg["run"]["pilot_chains"])

    # stage 1: per-step optimal weights, calibrated on the states that
    # weight-1 chains of this field actually visit (the field biases its
    # own path, so true-marginal probes would calibrate the wrong regime)
    pilot_seeds = run.seed_stream("pilot", n_pilot)
    pilots = [
        sample_chain(run.schedule, run.field, gmod.GuidanceSpec("cfg", 1.0), samp,
                     run.condition, s)
        for s in pilot_seeds
    ]
    omega_table = {
        t: est.value
        for t, est in gapmod.omega_star_by_t(pilots, run.field, run.oracle, run.condition).items()
    }
    run.add(_write_csv(run.out / "omega_table.csv", ["t", "omega_star", "n_probes"],
                       [[t, _fmt(w), n_pilot] for t, w in sorted(omega_table.items())]))

    arms = {
        "omega1": dict(guidance=gmod.GuidanceSpec("cfg", 1.0), refine=None, omega_by_t=None),
        "omega_star": dict(guidance=gmod.GuidanceSpec("cfg", 1.0), refine=None,
                           omega_by_t=omega_table),
        "refined": dict(guidance=gmod.GuidanceSpec("cfg", 1.0), refine=refine, omega_by_t=None),
    }
    seed_grid = [run.seed_stream(f"seed{i}", per_seed) for i in range(n_seeds)]

    arm_rows, trace_rows = [], []
    acc = {name: [] for name in arms}
    refined_steps_improved = True
    for i in range(n_seeds):
        for name, spec in arms.items():
            gaps = []
            for j, chain_seed in enumerate(seed_grid[i]):
                traj = sample_chain(run.schedule, run.field, spec["guidance"], samp,
                                    run.condition, chain_seed, refine=spec["refine"],
                                    oracle=run.oracle, omega_by_t=spec["omega_by_t"])
                gaps.append(gapmod.accumulated_gap(traj, run.oracle).accumulated_gap)
                if name == "refined" and spec["refine"] is not None:
                    for rec in traj.records:
                        tr = rec.refine_trace
                        if tr is None or tr.initial_loss is None:
                            continue
                        if tr.losses[-1] >= tr.initial_loss:
                            refined_steps_improved = False
                        trace_rows.append([i, j, rec.t, tr.iterations,
                                           _fmt(tr.initial_loss), _fmt(tr.losses[-1]),
                                           tr.terminated_by])
            mean_gap = float(np.mean(gaps))
            acc[name].append(mean_gap)
            arm_rows.append([i, name, _fmt(mean_gap), per_seed])

    run.add(_write_csv(run.out / "arms.csv",
                       ["seed_index", "arm", "accumulated_gap", "n_chains"], arm_rows))
    run.add(_write_csv(run.out / "refine_traces.csv",
                       ["seed_index", "chain", "t", "iters", "L_initial", "L_final",
                        "terminated_by"], trace_rows))

    wins = sum(1 for a, b in zip(acc["omega_star"], acc["omega1"]) if a < b)
    summary = {
        "n_seeds": n_seeds,
        "chains_per_seed": per_seed,
        "mean_accumulated_gap": {k: float(np.mean(v)) for k, v in acc.items()},
        "omega_star_wins_vs_omega1": wins,
        "refined_every_step_improved": bool(refined_steps_improved and refine is not None),
        "refine_enabled": refine is not None,
    }
    (run.out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n", encoding="utf-8")
    run.add(run.out / "summary.json")

    svg.line_plot(np.arange(n_seeds), [acc["omega1"], acc["omega_star"], acc["refined"]],
                  ["omega=1", "omega*(t)", "refined"],
                  title="accumulated gap per seed", xlabel="seed index",
                  ylabel="accumulated gap", path=run.out / "compare.svg")
    run.add(run.out / "compare.svg")


COMMANDS = {
    "train": cmd_train,
    "sample": cmd_sample,
    "sweep-omega": cmd_sweep_omega,
    "gap-report": cmd_gap_report,
    "refine-compare": cmd_refine_compare,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="scoregap", description=__doc__,
                                formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", type=Path, default=None,
                        help="JSON config file (a manifest.json also works)")
        sp.add_argument("--seed", type=int, default=None, help="master seed override")
        sp.add_argument("--out", type=Path, default=None,
                        help="output directory (default: $SCOREGAP_OUT/<command> or ./runs/<command>)")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="dotted-key config override, repeatable")
    return p


def _resolve_out(args) -> Path:
    if args.out is not None:
        return Path(args.out)
    root = os.environ.get("SCOREGAP_OUT", "runs")
    return Path(root) / args.command


def _error_report(kind: str, exc: Exception) -> None:
    doc = {"error": kind, "detail": str(exc)}
    if isinstance(exc, ConfigError):
        doc["problems"] = exc.problems
    print(json.dumps(doc, indent=2), file=sys.stderr)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = cfgmod.load_config(args.config, overrides=args.set, seed=args.seed)
    except ConfigError as exc:
        _error_report("config", exc)
        return 2
    try:
        run = _Run(cfg, _resolve_out(args))
        COMMANDS[args.command](run)
        run.finish()
    except ConfigError as exc:
        _error_report("config", exc)
        return 2
    except Exception as exc:  # runtime failure: structured report, exit 3
        _error_report("runtime", exc)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
