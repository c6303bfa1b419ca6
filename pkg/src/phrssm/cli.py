"""Command-line entry point: data generation, training, evaluation, ablations, plots.

Exit codes: 0 success, 1 other failure, 2 configuration / version error,
3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from . import __version__, envsim
from .config import ExperimentConfig, apply_override, dump_config, from_dict, load_config
from .diffnet import derive_seed
from .errors import ConfigError, NumericalError, PHRSSMError, VersionError
from .latentproj import volume_reduction
from .pipeline import AC_COLUMNS, EP_COLUMNS, WM_COLUMNS, Agent
from .plotting import plot_csv

log = logging.getLogger("phrssm")

ENERGY_COLUMNS = ["epoch", "energy", "next", "momentum", "total"]
CSV_FILES = {"wm": ("wm_loss.csv", WM_COLUMNS), "ac": ("ac_updates.csv", AC_COLUMNS),
             "episodes": ("episodes.csv", EP_COLUMNS), "energy": ("energy_loss.csv", ENERGY_COLUMNS)}


# ------------------------------------------------------------------ helpers


def write_csv(path: Path, header: list[str], rows) -> Path:
    """CSV with ``repr`` floats so reruns can be compared byte for byte."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([repr(float(v)) if isinstance(v, float) else v for v in row])
    return path


def ensure_dir(path) -> Path:
    p = Path(path)
    try:
        p.mkdir(parents=True, exist_ok=True)
        probe = p / ".write-test"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise OSError(f"output directory {p} is not writable: {exc}") from exc
    return p


def write_json(path: Path, obj) -> Path:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
    return path


def resolve_config(args) -> ExperimentConfig:
    cfg = load_config(args.config, args.override)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.out is not None:
        cfg.out_dir = args.out
    return cfg


def manifest(cfg: ExperimentConfig, **extra) -> dict:
    return {"config_hash": cfg.hash(), "code_version": __version__, "env": cfg.env, "seed": cfg.seed, **extra}


def write_run_csvs(agent: Agent, out: Path) -> dict:
    paths = {}
    for key, (name, header) in CSV_FILES.items():
        paths[key] = str(write_csv(out / name, header, agent.rows[key]))
    return paths


# ----------------------------------------------------------------- commands


def generate_data(cfg: ExperimentConfig, out: Path) -> dict:
    """Roll out the configured scripted policy; one JSON-lines file per episode."""
    out = ensure_dir(out)
    spec = envsim.make_env(cfg.env, **cfg.env_overrides)
    rng = np.random.default_rng(derive_seed(cfg.seed, f"data/{cfg.env}"))
    files = []
    for i in range(cfg.data.episodes):
        if cfg.data.policy == "random":
            policy = envsim.random_policy(spec, rng, cfg.data.smoothing)
        elif cfg.data.policy == "zero":
            policy = lambda obs, state: np.zeros(spec.d_a)
        else:
            raise ConfigError(f"data.policy: unknown policy {cfg.data.policy!r}")
        tr = envsim.run_episode(spec, policy, rng, cfg.data.steps)
        name = f"episode_{i:04d}.jsonl"
        with open(out / name, "w") as fh:
            for rec in tr.records():
                fh.write(json.dumps(rec) + "\n")
        files.append(name)
    man = manifest(cfg, kind="dataset", episodes=files, steps=cfg.data.steps, dt=spec.dt,
                   actuator_map=list(spec.actuator_map))
    write_json(out / "manifest.json", man)
    return man


def load_dataset(path, cfg: ExperimentConfig) -> list[envsim.Trajectory]:
    path = Path(path)
    man = json.loads((path / "manifest.json").read_text())
    if man.get("env") != cfg.env:
        raise VersionError(f"dataset {path} is for env {man.get('env')!r}, config says {cfg.env!r}")
    trajs = []
    for name in man["episodes"]:
        rows = [json.loads(line) for line in (path / name).read_text().splitlines() if line.strip()]
        trajs.append(envsim.Trajectory.from_records(rows, man["dt"], tuple(man["actuator_map"])))
    return trajs


def train(cfg: ExperimentConfig, out: Path, stage: str = "all", resume: bool = False,
          checkpoint: str | None = None, data: str | None = None) -> dict:
    out = ensure_dir(out)
    dump_config(cfg, out / "config.yaml")
    h = cfg.hash()
    agent = Agent(cfg)
    latest = out / "latest.ckpt.json"
    if resume and latest.exists():
        meta = agent.load(latest)
        if meta.get("config_hash") != h:
            raise VersionError(f"{latest} was written with config {meta.get('config_hash')}, current is {h}")
        log.info("resumed from %s (progress %s)", latest, agent.progress)
    elif stage == "2":
        src = Path(checkpoint) if checkpoint else out / "stage1.ckpt.json"
        agent.load(src)
        if agent.progress["stage"] < 2:
            raise VersionError(f"{src} does not hold a finished stage-1 run")
    elif data is not None:
        for tr in load_dataset(data, cfg):
            agent.trajectories.append(tr)
            agent.replay.add(agent.episode_to_replay(tr))
            agent.log_episode(tr, 0)
        agent.wm.rssm.set_obs_stats(*agent.replay.obs_stats())
        agent.progress["prefilled"] = True

    ckpts = {}

    def periodic(a: Agent):
        a.save(latest, h)

    try:
        if stage in ("1", "all") and agent.progress["stage"] == 1:
            agent.run_stage1(periodic)
            agent.save(out / "stage1.ckpt.json", h)
            agent.save(latest, h)
        if (out / "stage1.ckpt.json").exists():
            ckpts["stage1"] = str(out / "stage1.ckpt.json")
        if stage in ("2", "all") and agent.progress["stage"] == 2:
            agent.run_stage2(periodic)
            agent.save(out / "stage2.ckpt.json", h)
            agent.save(latest, h)
        if (out / "stage2.ckpt.json").exists():
            ckpts["stage2"] = str(out / "stage2.ckpt.json")
    except NumericalError as exc:
        agent.save(out / "diagnostics.ckpt.json", h)
        write_json(out / "diagnostics.json", {"error": str(exc), "diagnostics": exc.diagnostics,
                                              "progress": agent.progress})
        write_run_csvs(agent, out)
        raise
    man = manifest(cfg, kind="run", checkpoints=ckpts, csv=write_run_csvs(agent, out),
                   progress=agent.progress)
    write_json(out / "manifest.json", man)
    return man


def evaluate(cfg: ExperimentConfig, checkpoint, out: Path, episodes: int | None = None) -> dict:
    out = ensure_dir(out)
    agent = Agent(cfg)
    meta = agent.load(checkpoint)
    if meta.get("config_hash") != cfg.hash():
        raise VersionError(f"checkpoint {checkpoint} was written with config {meta.get('config_hash')}, "
                           f"current config hashes to {cfg.hash()}")
    report = agent.evaluate(episodes, seed=derive_seed(cfg.seed, "eval"))
    trace = report.pop("_energy_trace", None)
    report["checkpoint"] = str(checkpoint)
    report["config_hash"] = cfg.hash()
    if trace is not None:
        rows = [list(r) for r in zip(trace["t"], trace["E_true"], trace["H_t"], trace["H_next"])]
        csv_path = write_csv(out / "energy_trace.csv", ["t", "E_true", "H_pred", "H_next_pred"], rows)
        plot_csv(csv_path, out / "energy_trace.svg", "t", ["E_true", "H_pred"], "true vs learned energy")
        report["energy_trace_csv"] = str(csv_path)
    write_json(out / "report.json", report)
    return report


ABLATIONS = {
    "full": [],
    "no-implicit": ["model.lambda_max=0.0"],
    "no-explicit": ["stages.constrained=false"],
}
STAGE2_ONLY = {"no-explicit"}


def ablate(cfg: ExperimentConfig, out: Path, variants=None, seeds=None) -> dict:
    """Run each ablation variant for every seed; write per-run reports and a summary CSV."""
    out = ensure_dir(out)
    variants = variants or list(ABLATIONS)
    seeds = seeds if seeds is not None else list(cfg.seeds)
    base = cfg.to_dict()
    rows, reports = [], {}
    for variant in variants:
        if variant not in ABLATIONS:
            raise ConfigError(f"unknown ablation variant {variant!r}; choose from {sorted(ABLATIONS)}")
        for seed in seeds:
            data = json.loads(json.dumps(base))
            data["seed"] = seed
            vdir = out / variant / f"seed{seed}"
            data["out_dir"] = str(vdir)
            for item in ABLATIONS[variant]:
                apply_override(data, item)
            vcfg = from_dict(data)
            shared = out / "full" / f"seed{seed}" / "stage1.ckpt.json"
            if variant in STAGE2_ONLY and shared.exists():
                # stage 1 is identical to the full run; only the fine-tuning differs
                train(vcfg, vdir, stage="2", checkpoint=str(shared))
            else:
                train(vcfg, vdir)
            rep = evaluate(vcfg, vdir / "stage2.ckpt.json", vdir)
            reports[(variant, seed)] = rep
            rows.append([variant, seed, rep["return_mean"], rep["tec"], rep["msj"],
                         rep.get("log_phase_volume", float("nan")), rep.get("energy_corr", float("nan"))])
    write_csv(out / "ablation.csv", ["variant", "seed", "return", "tec", "msj", "log_phase_volume",
                                     "energy_corr"], rows)
    summary = {}
    if "full" in variants:
        for variant in variants:
            if variant == "full":
                continue
            rel = {}
            for key in ("return_mean", "tec", "msj"):
                vals = [envsim.relative_change(reports[(variant, s)][key], reports[("full", s)][key])
                        for s in seeds if reports[(variant, s)][key] != 0]
                rel[key] = float(np.mean(vals)) if vals else float("nan")
            summary[variant] = rel
    write_json(out / "ablation_summary.json", {"alpha": cfg.eval.alpha, "beta": cfg.eval.beta,
                                               "relative_change_full_vs_variant_pct": summary})
    return summary


def phase_volume(cfg: ExperimentConfig, checkpoint, baseline=None, episodes: int | None = None,
                 out: Path | None = None) -> dict:
    agent = Agent(cfg)
    agent.load(checkpoint)
    rep = agent.evaluate(episodes, seed=derive_seed(cfg.seed, "eval"))
    if "log_phase_volume" not in rep:
        raise ConfigError("phase volume needs model.ph_enabled=true (the projection lives in the PH branch)")
    result = {"log_phase_volume": rep["log_phase_volume"], "n_components": rep["n_components"]}
    if baseline is not None:
        b = Agent(cfg)
        b.load(baseline)
        brep = b.evaluate(episodes, seed=derive_seed(cfg.seed, "eval"))
        result["baseline_log_phase_volume"] = brep["log_phase_volume"]
        result["reduction_pct"] = volume_reduction(brep["log_phase_volume"], rep["log_phase_volume"])
    if out is not None:
        rows = [[cfg.env, str(checkpoint), result["log_phase_volume"], result.get("reduction_pct", float("nan"))]]
        if baseline is not None:
            rows.append([cfg.env, str(baseline), result["baseline_log_phase_volume"], 0.0])
        write_csv(ensure_dir(out) / "phase_volume.csv", ["task", "checkpoint", "log_volume", "reduction_pct"], rows)
    return result


def plot(paths, x=None, columns=None) -> list[str]:
    made = []
    for p in paths:
        p = Path(p)
        targets = sorted(p.glob("*.csv")) if p.is_dir() else [p]
        for f in targets:
            made.append(str(plot_csv(f, None, x, columns)))
    return made


# --------------------------------------------------------------------- main


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML config file")
    common.add_argument("--seed", type=int)
    common.add_argument("--override", action="append", default=[], metavar="KEY=VALUE",
                        help="dotted config override, e.g. model.lambda_max=0.5 (repeatable)")
    common.add_argument("--out", help="output directory (default: config out_dir)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="phrssm", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("generate-data", parents=[common], help="roll out scripted policies to JSON-lines")

    p = sub.add_parser("train", parents=[common], help="two-stage training")
    p.add_argument("--stage", choices=["1", "2", "all"], default="all")
    p.add_argument("--resume", action="store_true", help="continue from OUT/latest.ckpt.json")
    p.add_argument("--checkpoint", help="stage-1 checkpoint for --stage 2")
    p.add_argument("--data", help="dataset directory used instead of random prefill episodes")

    p = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--episodes", type=int)

    p = sub.add_parser("ablate", parents=[common], help="run ablation variants over seeds")
    p.add_argument("--variants", nargs="+", default=None, choices=sorted(ABLATIONS))

    p = sub.add_parser("plot", parents=[common], help="render CSV files (or directories of them) as SVG")
    p.add_argument("paths", nargs="+")
    p.add_argument("--x")
    p.add_argument("--columns", nargs="+")

    p = sub.add_parser("phase-volume", parents=[common], help="sum of log PCA eigenvalues of latent phase points")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--baseline", help="checkpoint to compare against (reports reduction in percent)")
    p.add_argument("--episodes", type=int)
    return parser


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    torch.set_num_threads(1)
    try:
        cfg = resolve_config(args)
        out = Path(cfg.out_dir)
        if args.command == "generate-data":
            result = generate_data(cfg, out)
        elif args.command == "train":
            result = train(cfg, out, args.stage, args.resume, args.checkpoint, args.data)
        elif args.command == "eval":
            result = evaluate(cfg, args.checkpoint, out, args.episodes)
        elif args.command == "ablate":
            result = ablate(cfg, out, args.variants)
        elif args.command == "plot":
            result = plot(args.paths, args.x, args.columns)
        else:
            result = phase_volume(cfg, args.checkpoint, args.baseline, args.episodes, out)
    except (ConfigError, VersionError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (NumericalError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3
    except (PHRSSMError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    print(json.dumps(result, indent=2, sort_keys=True, default=str))
    return 0


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
