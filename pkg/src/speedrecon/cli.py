"""Command-line interface: ``speedrecon synth|reconstruct|train|sweep``.

Exit codes: 0 success, 2 usage error, 3 validation error, 4 numerical failure.
Every command writes a JSON manifest with seeds, configuration and sha256
digests of its inputs and outputs.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import logging
import math
import sys
import time
from pathlib import Path

from . import __version__, baselines, flatconf, synth
from .errors import NumericalError, ValidationError
from .grid import GridSpec, TraceSet, read_trajectories_csv, write_field, write_trajectories_csv

log = logging.getLogger("speedrecon")

EXIT_USAGE, EXIT_VALIDATION, EXIT_NUMERICAL = 2, 3, 4
SCENARIO_FILE = "scenario.conf"
TRACES_FILE = "traces.csv"
TRUTH_FILE = "ground_truth.tsf"
NEURAL = ("tranet", "cnn6")
METHODS = ("iso", "asm", "psm") + NEURAL


class UsageError(Exception):
    pass


def sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_manifest(path, command: str, config: dict, seeds: dict, inputs, outputs, t_start: float):
    manifest = {
        "command": command,
        "config": config,
        "seeds": seeds,
        "inputs": {str(p): sha256(p) for p in inputs},
        "outputs": {str(p): sha256(p) for p in outputs},
        "version": __version__,
        "wall_time_s": round(time.perf_counter() - t_start, 3),
    }
    Path(path).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return manifest


def _floats(text: str, n: int, what: str) -> list[float]:
    try:
        vals = [float(s) for s in text.split(",")]
    except ValueError:
        raise UsageError(f"{what}: expected {n} comma-separated numbers, got {text!r}") from None
    if len(vals) != n:
        raise UsageError(f"{what}: expected {n} comma-separated numbers, got {text!r}")
    return vals


def parse_p_list(text: str) -> list[float]:
    """``0.1:0.9:0.1`` (inclusive range) or ``0.2,0.5,0.8``."""
    if ":" in text:
        try:
            lo, hi, step = (float(s) for s in text.split(":"))
        except ValueError:
            raise UsageError(f"--p: bad range {text!r}") from None
        if step <= 0 or hi < lo:
            raise UsageError(f"--p: bad range {text!r}")
        n = int(math.floor((hi - lo) / step + 1e-9)) + 1
        return [round(lo + k * step, 10) for k in range(n)]
    try:
        return [float(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise UsageError(f"--p: bad list {text!r}") from None


def _params(cls, path):
    if path is None:
        return cls()
    conf = flatconf.load(path)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(conf) - names
    if unknown:
        raise ValidationError(f"{path}: unknown parameters {sorted(unknown)}")
    return cls(**{k: flatconf.get_float(conf, k) for k in conf})


def load_scenario_dir(path) -> tuple[synth.Scenario, TraceSet]:
    path = Path(path)
    scn, _ = synth.load_scenario(path / SCENARIO_FILE)
    trajs = read_trajectories_csv(path / TRACES_FILE)
    return scn, TraceSet.from_trajectories(trajs, scn.spec, scn.name)


def scenario_dirs(root) -> list[Path]:
    root = Path(root)
    if not root.is_dir():
        raise ValidationError(f"{root}: not a directory")
    return sorted(p for p in root.iterdir() if (p / SCENARIO_FILE).is_file())


def load_checkpoint(path):
    from .neuralnet import load_checkpoint as _load
    return _load(path)


def make_method(name: str, args):
    """Callable SparseSpeedField -> SpeedField for a method name."""
    if name == "iso":
        p = _params(baselines.IsoParams, args.params)
        return lambda f: baselines.isotropic(f, p)
    if name == "asm":
        p = _params(baselines.AsmParams, args.params)
        return lambda f: baselines.asm(f, p)
    if name == "psm":
        p = _params(baselines.PsmParams, args.params)
        return lambda f: baselines.psm_lite(f, p)
    if name in NEURAL:
        from .neuralnet import infer_field
        ckpt = getattr(args, f"{name}_checkpoint", None) or getattr(args, "checkpoint", None)
        if ckpt is None:
            raise UsageError(f"method {name} needs a checkpoint")
        model, _ = load_checkpoint(ckpt)
        kind = type(model).__name__.lower()
        if kind != name:
            raise ValidationError(f"{ckpt} holds a {kind} model, not {name}")
        return lambda f: infer_field(model, f)
    raise UsageError(f"unknown method {name!r}; choose from {', '.join(METHODS)}")


# --------------------------------------------------------------------------- commands

def cmd_synth(args) -> int:
    t_start = time.perf_counter()
    out = Path(args.out)
    if args.scenario is not None:
        scn, probes = synth.load_scenario(args.scenario)
        items = [(scn, probes or synth.default_probes(scn, args.rate))]
        inputs = [args.scenario]
    else:
        lib = synth.scenario_library(args.library, args.seed)
        items = [(s, synth.default_probes(s, args.rate)) for s in lib]
        inputs = []
    out.mkdir(parents=True, exist_ok=True)
    outputs, seeds = [], {"library": args.seed if args.scenario is None else None}
    for scn, probes in items:
        d = out / scn.name
        d.mkdir(exist_ok=True)
        truth = synth.render_ground_truth(scn)
        trajs = synth.sample_probes(truth, probes)
        synth.save_scenario(d / SCENARIO_FILE, scn, probes)
        write_trajectories_csv(d / TRACES_FILE, trajs)
        write_field(d / TRUTH_FILE, truth)
        outputs += [d / SCENARIO_FILE, d / TRACES_FILE, d / TRUTH_FILE]
        seeds[scn.name] = {"scenario": scn.rng_seed, "probes": probes.rng_seed}
        log.info("%s: %d traces", scn.name, len(trajs))
    if args.scenario is None:
        stats = synth.library_stats([s for s, _ in items])
        log.info("library mix: %s", ", ".join(f"{k} {v:.0%}" for k, v in stats.items()))
    config = {"library": args.library, "rate": args.rate,
              "scenario": str(args.scenario) if args.scenario else None}
    write_manifest(out / "manifest.json", "synth", config, seeds, inputs, outputs, t_start)
    return 0


def _domain(args, trajs) -> GridSpec:
    dt, dx = _floats(args.grid, 2, "--grid")
    if args.scenario is not None:
        scn, _ = synth.load_scenario(args.scenario)
        s = scn.spec
        return GridSpec(s.t0, s.duration, s.x0, s.length, dt, dx)
    if args.domain is not None:
        t0, dur, x0, length = _floats(args.domain, 4, "--domain")
        return GridSpec(t0, dur, x0, length, dt, dx)
    if not trajs:
        raise ValidationError("no trajectories and no --domain/--scenario to define the grid")
    t_lo = min(float(tr.t[0]) for tr in trajs)
    t_hi = max(float(tr.t[-1]) for tr in trajs)
    x_lo = min(float(tr.x[0]) for tr in trajs)
    x_hi = max(float(tr.x[-1]) for tr in trajs)
    t0, x0 = math.floor(t_lo / dt) * dt, math.floor(x_lo / dx) * dx
    return GridSpec(t0, max(t_hi - t0, dt), x0, max(x_hi - x0, dx), dt, dx)


def cmd_reconstruct(args) -> int:
    t_start = time.perf_counter()
    if args.method in NEURAL and args.checkpoint is None:
        raise UsageError(f"--method {args.method} requires --checkpoint")
    trajs = read_trajectories_csv(args.traces)
    spec = _domain(args, trajs)
    field_in = TraceSet.from_trajectories(trajs, spec).field()
    if len(field_in) == 0:
        if args.method in NEURAL:
            log.warning("no measurement inside the domain; output is the network prior")
        else:
            raise ValidationError("no measurement inside the domain")
    est = make_method(args.method, args)(field_in)
    out = Path(args.out)
    write_field(out, est)
    outputs = [out]
    if args.render:
        from .plotting import save_heatmap
        save_heatmap(args.render, est, title=f"{args.method} reconstruction")
        outputs.append(Path(args.render))
    inputs = [p for p in (args.traces, args.params, args.checkpoint, args.scenario) if p]
    config = {"method": args.method, "grid": dataclasses.asdict(spec),
              "params": str(args.params) if args.params else None}
    manifest = args.manifest or str(out) + ".manifest.json"
    write_manifest(manifest, "reconstruct", config, {}, inputs, outputs, t_start)
    return 0


def cmd_train(args) -> int:
    from .neuralnet import (TrainConfig, augment, build, n_params, save_checkpoint, train)
    from .patches import PatchLayout

    t_start = time.perf_counter()
    dirs = scenario_dirs(args.scenarios)
    if len(dirs) < 2:
        raise ValidationError(f"{args.scenarios}: need at least 2 scenarios, found {len(dirs)}")
    holdout = [h for h in (args.holdout or "").split(",") if h]
    loaded = [load_scenario_dir(d) for d in dirs]
    names = [scn.name for scn, _ in loaded]
    unknown = set(holdout) - set(names)
    if unknown:
        log.warning("holdout names not found among scenarios: %s", sorted(unknown))
    sets = [ts for scn, ts in loaded if scn.name not in holdout]
    trained_on = [scn.name for scn, _ in loaded if scn.name not in holdout]
    if not sets:
        raise ValidationError("--holdout covers every scenario; nothing left to train on")

    cfg = TrainConfig(epochs=args.epochs, batch_size=args.batch_size, lr=args.lr,
                      n_samples=args.samples, val_fraction=args.val_fraction, rng_seed=args.seed)
    layout = PatchLayout()
    samples = augment(sets, cfg.n_samples, layout, (cfg.p_min, cfg.p_max), seed=cfg.rng_seed)
    model = build(args.net, args.preset, layout)
    log.info("%s/%s: %d parameters, %d samples", args.net, args.preset, n_params(model), len(samples))
    result = train(model, samples, cfg,
                   progress=lambda r: log.info("epoch %d: train %.6f val %.6f (%.0f s)", r["epoch"],
                                               r["train_loss"], r["val_loss"], r["seconds"]))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    history = [{k: v for k, v in rec.items() if k != "seconds"} for rec in result.history]
    meta = {"holdout": holdout, "trained_on": trained_on, "train_config": cfg.to_dict(),
            "net": args.net, "preset": args.preset, "history": history,
            "best_epoch": result.best_epoch, "best_loss": result.best_loss}
    save_checkpoint(out, model, meta)
    hist_path = Path(args.history) if args.history else out.with_suffix(".history.csv")
    with open(hist_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "train_loss", "val_loss"])
        for rec in history:
            w.writerow([rec["epoch"], f"{rec['train_loss']:.9g}", f"{rec['val_loss']:.9g}"])
    inputs = [d / f for d in dirs for f in (SCENARIO_FILE, TRACES_FILE)]
    config = {"net": args.net, "preset": args.preset, "train": cfg.to_dict(), "holdout": holdout,
              "trained_on": trained_on}
    manifest = args.manifest or str(out) + ".manifest.json"
    write_manifest(manifest, "train", config, {"train": cfg.rng_seed}, inputs, [out, hist_path],
                   t_start)
    return 0


def check_holdout(meta: dict, scenario: str, ckpt) -> None:
    """Refuse checkpoints whose training set may contain ``scenario``."""
    if scenario not in meta.get("holdout", []) or scenario in meta.get("trained_on", []):
        raise ValidationError(f"{ckpt} was not trained with scenario {scenario!r} held out; "
                              "refusing to evaluate on it")


def cmd_sweep(args) -> int:
    from .evaluation import density_sweep, write_runs_csv, write_summary_csv

    t_start = time.perf_counter()
    methods = [m for m in args.methods.split(",") if m]
    if not methods:
        raise UsageError("--methods is empty")
    for m in methods:
        if m not in METHODS:
            raise UsageError(f"unknown method {m!r}; choose from {', '.join(METHODS)}")
    scn, traces = load_scenario_dir(args.scenario)
    inputs = [Path(args.scenario) / SCENARIO_FILE, Path(args.scenario) / TRACES_FILE]
    for m in methods:
        if m in NEURAL:
            ckpt = getattr(args, f"{m}_checkpoint")
            if ckpt is None:
                raise UsageError(f"method {m} needs --{m}-checkpoint")
            _, meta = load_checkpoint(ckpt)
            check_holdout(meta, scn.name, ckpt)
            inputs.append(ckpt)
    funcs = {m: make_method(m, args) for m in methods}
    p_list = parse_p_list(args.p)
    result = density_sweep(traces, funcs, p_list, args.iterations, args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    runs, summary = out / "runs.csv", out / "summary.csv"
    write_runs_csv(runs, result)
    write_summary_csv(summary, result)
    outputs = [runs, summary]
    if args.plot:
        from .plotting import save_sweep_plot
        save_sweep_plot(out / "sweep.png", result.summary())
        outputs.append(out / "sweep.png")
    config = {"methods": methods, "p": p_list, "iterations": args.iterations,
              "scenario": scn.name, "params": str(args.params) if args.params else None}
    write_manifest(out / "manifest.json", "sweep", config, {"sweep": args.seed}, inputs, outputs,
                   t_start)
    return 0


# --------------------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="speedrecon", description=__doc__.split("\n")[0])
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    ap.add_argument("-v", "--verbose", action="store_true", help="progress messages on stderr")
    sub = ap.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="render scenarios and sample probe trajectories")
    src = s.add_mutually_exclusive_group(required=True)
    src.add_argument("--scenario", help="scenario description file")
    src.add_argument("--library", type=int, help="generate a random library of N scenarios")
    s.add_argument("--seed", type=int, default=0, help="library seed (default 0)")
    s.add_argument("--rate", type=float, default=15.0,
                   help="probe entry rate in vehicles/hour, unless the file sets one (default 15)")
    s.add_argument("--out", required=True, help="output directory, one subdirectory per scenario")
    s.set_defaults(func=cmd_synth)

    r = sub.add_parser("reconstruct", help="estimate a full speed field from trajectories")
    r.add_argument("traces", help="trajectory CSV (trace_id,t_s,x_m)")
    r.add_argument("--method", required=True, choices=METHODS)
    r.add_argument("--params", help="parameter file for iso/asm/psm")
    r.add_argument("--checkpoint", help="model checkpoint for tranet/cnn6")
    r.add_argument("--grid", default="60,100", help="cell size dt,dx in s,m (default 60,100)")
    r.add_argument("--scenario", help="take the domain from this scenario file")
    r.add_argument("--domain", help="t0,duration,x0,length (default: trajectory bounds)")
    r.add_argument("--out", required=True, help="field file (.tsf binary or .csv)")
    r.add_argument("--render", help="also write a heatmap image here")
    r.add_argument("--manifest", help="manifest path (default <out>.manifest.json)")
    r.set_defaults(func=cmd_reconstruct)

    t = sub.add_parser("train", help="train TraNet or CNN6 on a scenario directory")
    t.add_argument("scenarios", help="directory written by 'synth'")
    t.add_argument("--net", choices=NEURAL, default="tranet")
    t.add_argument("--preset", choices=("toy", "paper"), default="toy")
    t.add_argument("--holdout", default="", help="comma-separated scenario names to exclude")
    t.add_argument("--epochs", type=int, default=50)
    t.add_argument("--batch-size", type=int, default=32)
    t.add_argument("--lr", type=float, default=1e-3)
    t.add_argument("--samples", type=int, default=10000, help="number of generated patches")
    t.add_argument("--val-fraction", type=float, default=0.1)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--out", required=True, help="checkpoint file")
    t.add_argument("--history", help="per-epoch loss CSV (default <out>.history.csv)")
    t.add_argument("--manifest", help="manifest path (default <out>.manifest.json)")
    t.set_defaults(func=cmd_train)

    w = sub.add_parser("sweep", help="IMAE versus train ratio on one held-out scenario")
    w.add_argument("scenario", help="scenario directory (scenario.conf + traces.csv)")
    w.add_argument("--methods", default="iso,asm,psm", help="comma-separated, from " + ",".join(METHODS))
    w.add_argument("--p", default="0.1:0.9:0.1", help="lo:hi:step or a comma list")
    w.add_argument("--iterations", type=int, default=20)
    w.add_argument("--seed", type=int, default=0)
    w.add_argument("--params", help="parameter file for the kernel methods")
    w.add_argument("--tranet-checkpoint")
    w.add_argument("--cnn6-checkpoint")
    w.add_argument("--plot", action="store_true", help="write sweep.png")
    w.add_argument("--out", required=True, help="output directory")
    w.set_defaults(func=cmd_sweep)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except UsageError as exc:
        ap.print_usage(sys.stderr)
        print(f"speedrecon: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ValidationError, OSError) as exc:
        print(f"speedrecon: invalid input: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (NumericalError, FloatingPointError) as exc:
        print(f"speedrecon: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
