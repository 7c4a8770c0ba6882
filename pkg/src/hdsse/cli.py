"""Command-line front end: simulate, train, estimate, bench, sweep, topology.

Every command works on a synthetic stream generated from the feeder model
and a scenario config, so accuracy is always measured against the
power-flow truth.  Artifacts other than timing files are deterministic for a
fixed seed and config.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__
from .actor_critic import (AcModule, circuit_dataset, load_module, make_modules, pretrain, save_module,
                           write_training_log)
from .bench import (BenchReport, accuracy, mean_and_se, per_step_mape, run_monolithic, summarize, time_calls,
                    trend_holds, write_mape_csv, write_timing_csv)
from .coordinator import (HierarchyConfig, apply_topology_change, estimate_stream, infer_module,
                          load_switch_ops, run_offline_update, write_results_jsonl)
from .grid import FeederModel, bundled_feeder_path, load_feeder, save_feeder
from .neural import GaussianPolicy, Mlp
from .powerflow import unpack_currents
from .scenario import (ScenarioConfig, generate_profiles, generate_truth, load_scenario_config,
                       synthesize_measurements, with_meters, write_measurements_csv, write_profiles_csv,
                       write_truth_csv)

log = logging.getLogger("hdsse")

MANIFEST = "manifest.json"
TRAINING_LOG = "training_log.csv"
MANIFEST_VERSION = 1
DEFAULT_PENETRATION = 0.1
DEFAULT_LEVELS = "0.1,0.25,0.5,0.75,1.0"


class CliError(Exception):
    pass


# ---------------------------------------------------------------------------
# shared setup


def _feeder(args) -> tuple[FeederModel, str]:
    path = Path(args.feeder) if args.feeder else bundled_feeder_path()
    if not path.is_file():
        raise CliError(f"feeder file not found: {path}")
    text = path.read_bytes()
    return load_feeder(path), hashlib.sha256(text).hexdigest()


def _scenario(args, base: ScenarioConfig | None = None, **fixed) -> ScenarioConfig:
    over = {"seed": args.seed, "timesteps": args.timesteps, "meter_penetration": args.meter_penetration,
            "pv_penetration": args.pv_penetration}
    over = {k: v for k, v in over.items() if v is not None}
    if args.scenario:
        if not Path(args.scenario).is_file():
            raise CliError(f"scenario file not found: {args.scenario}")
        cfg = load_scenario_config(args.scenario, base, **over)
    else:
        cfg = (base or ScenarioConfig()).replace(**over)
    return cfg.replace(**fixed) if fixed else cfg


def _metered(model: FeederModel, cfg: ScenarioConfig) -> FeederModel:
    return with_meters(model, cfg.meter_penetration, cfg.seed) if cfg.meter_penetration is not None else model


def _simulate(model: FeederModel, cfg: ScenarioConfig):
    profiles = generate_profiles(model, cfg)
    truth = generate_truth(model, profiles)
    return profiles, truth, synthesize_measurements(model, truth, cfg)


def _hierarchy(args) -> HierarchyConfig:
    return HierarchyConfig(max_iter=args.max_iter, eps_v=args.eps_v, workers=args.workers)


def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# checkpoints


def _save_checkpoints(ckpt: Path, modules, manifest: dict) -> None:
    ckpt.mkdir(parents=True, exist_ok=True)
    for sid, mod in sorted(modules.items()):
        save_module(mod, ckpt / f"module_{sid}.json")
    _write_json(ckpt / MANIFEST, manifest)


def _zero_modules(model: FeederModel, seed: int) -> dict[int, AcModule]:
    """Untrained modules that report zero currents (no prior knowledge)."""
    mods = make_modules(model, seed=seed)
    for m in mods.values():
        sizes = (m.n_in, *[len(b) for b in m.policy.mean_net.biases[:-1]], m.dim)
        m.policy = GaussianPolicy(Mlp(sizes), Mlp(sizes))
    return mods


def _load_trained(args, model: FeederModel, digest: str):
    """Modules, manifest and the training scenario from ``--checkpoints``."""
    ckpt = Path(args.checkpoints)
    path = ckpt / MANIFEST
    if not path.is_file():
        raise CliError(f"no {MANIFEST} in checkpoint directory {ckpt}")
    manifest = json.loads(path.read_text())
    if manifest.get("format_version") != MANIFEST_VERSION:
        raise CliError(f"unsupported checkpoint manifest version {manifest.get('format_version')}")
    if manifest["feeder_sha256"] != digest:
        raise CliError("checkpoints were trained on a different feeder file")
    train_cfg = ScenarioConfig(**manifest["scenario"])
    metered = _metered(model, train_cfg)
    modules = {}
    for s in metered.secondaries:
        f = ckpt / f"module_{s.id}.json"
        if not f.is_file():
            raise CliError(f"missing checkpoint {f}")
        modules[s.id] = load_module(f, s, metered.circuits[s.id])
    return metered, modules, manifest, train_cfg


def _test_setup(args, model: FeederModel, digest: str, default_steps: int):
    """Metered model, modules and held-out scenario for estimate/bench/topology."""
    if args.checkpoints:
        metered, modules, manifest, train_cfg = _load_trained(args, model, digest)
        cfg = _scenario(args, train_cfg.replace(offset=manifest["train_end"], timesteps=default_steps))
        if cfg.meter_penetration != train_cfg.meter_penetration or cfg.seed != train_cfg.seed:
            raise CliError(f"checkpoints were trained with meter penetration {train_cfg.meter_penetration} "
                           f"and seed {train_cfg.seed}")
    else:
        log.warning("no --checkpoints given; using untrained modules that report zero currents")
        cfg = _scenario(args, ScenarioConfig(timesteps=default_steps, meter_penetration=DEFAULT_PENETRATION))
        metered = _metered(model, cfg)
        modules = _zero_modules(metered, cfg.seed)
    return metered, modules, cfg


def _stack(results, model: FeederModel):
    V = np.array([r.voltages for r in results]).reshape(len(results), model.n_nodes)
    I = np.array([r.currents for r in results]).reshape(len(results), model.n_branches)
    return V, I


def _write_iterations(path: Path, results) -> None:
    with open(path, "w") as fh:
        fh.write("t,iterations,status\n")
        for r in results:
            fh.write(f"{r.t},{r.iterations},{r.status}\n")


# ---------------------------------------------------------------------------
# commands


def cmd_simulate(args) -> int:
    model, _ = _feeder(args)
    cfg = _scenario(args, ScenarioConfig(meter_penetration=DEFAULT_PENETRATION))
    model = _metered(model, cfg)
    profiles, truth, msets = _simulate(model, cfg)
    out = _out(args)
    write_profiles_csv(out / "profiles.csv", profiles)
    write_truth_csv(out / "truth.csv", truth)
    write_measurements_csv(out / "measurements.csv", msets)
    print(f"{cfg.timesteps} timesteps written to {out}")
    return 0


def train_modules(model: FeederModel, cfg: ScenarioConfig, epochs: int, online_steps: int, hcfg: HierarchyConfig,
                  seed: int, checkpoint=None, checkpoint_every: int = 0):
    """Pretrain (if ``epochs``) and then run Stage B over the training window.

    Returns the modules, per-module pretraining summaries and training-log rows.
    """
    _, truth, msets = _simulate(model, cfg)
    modules = make_modules(model, seed=seed)
    summary = {}
    if epochs > 0:
        for sid, mod in modules.items():
            rep = pretrain(mod, circuit_dataset(model, mod, truth, msets), epochs=epochs, seed=seed)
            summary[str(sid)] = {"mean_loss": rep.mean_loss[-1], "logvar_loss": rep.logvar_loss[-1],
                                 "critic_loss": rep.critic_loss[-1] if rep.critic_loss else None,
                                 "samples": rep.n_samples}
    else:
        # no labels: standardize inputs from a first pass of the untrained hierarchy
        warm = list(estimate_stream(model, msets[:min(len(msets), 200)], modules, hcfg))
        for sid, mod in modules.items():
            mod.fit_input_scaler([r.inputs[sid] for r in warm])
    steps = min(online_steps, len(msets))
    reports = run_offline_update(modules, estimate_stream(model, msets[:steps], modules, hcfg),
                                 checkpoint=checkpoint, checkpoint_every=checkpoint_every)
    rows = [(sid, k, rep.residual, rep.predicted, rep.delta)
            for k, step in enumerate(reports) for sid, rep in sorted(step.items())]
    return modules, summary, rows


def cmd_train(args) -> int:
    model, digest = _feeder(args)
    cfg = _scenario(args, ScenarioConfig(timesteps=2000, meter_penetration=DEFAULT_PENETRATION), offset=0)
    model = _metered(model, cfg)
    ckpt = Path(args.checkpoints)
    online = cfg.timesteps if args.online_steps is None else args.online_steps
    manifest = {
        "format_version": MANIFEST_VERSION,
        "hdsse_version": __version__,
        "feeder_sha256": digest,
        "scenario": dataclasses.asdict(cfg),
        "train_end": cfg.offset + cfg.timesteps,
        "epochs": args.epochs,
        "online_steps": min(online, cfg.timesteps),
        "modules": [s.id for s in model.secondaries],
    }

    def checkpoint(mods, n):
        _save_checkpoints(ckpt, mods, {**manifest, "steps_done": n})

    modules, summary, rows = train_modules(model, cfg, args.epochs, online, _hierarchy(args), cfg.seed,
                                           checkpoint, args.checkpoint_every)
    manifest["pretrain"] = summary
    manifest["steps_done"] = manifest["online_steps"]
    _save_checkpoints(ckpt, modules, manifest)
    write_training_log(ckpt / TRAINING_LOG, rows)
    print(f"trained {len(modules)} modules ({args.epochs} pretraining epochs, "
          f"{manifest['online_steps']} online steps); checkpoints in {ckpt}")
    return 0


def cmd_estimate(args) -> int:
    model, digest = _feeder(args)
    model, modules, cfg = _test_setup(args, model, digest, default_steps=96)
    _, truth, msets = _simulate(model, cfg)
    results = list(estimate_stream(model, msets, modules, _hierarchy(args)))
    out = _out(args)
    write_results_jsonl(out / "states.jsonl", results)
    _write_iterations(out / "iterations.csv", results)
    V, I = _stack(results, model)
    acc = accuracy(V, I, truth, root=model.root)
    rep = BenchReport(acc, None, {}, [r.iterations for r in results], {})
    write_mape_csv(out / "mape.csv", rep.mape_rows())
    settled = sum(r.converged for r in results)
    print(f"{len(results)} timesteps, {settled} settled; |V| MAPE {acc.v_mag_mape:.3f}%, "
          f"angle error {acc.angle_mae_rad:.5f} rad")
    return 0


def _bench(model, modules, cfg, args, out: Path):
    _, truth, msets = _simulate(model, cfg)
    hcfg = _hierarchy(args)
    results = list(estimate_stream(model, msets, modules, hcfg))
    V, I = _stack(results, model)
    acc = accuracy(V, I, truth, root=model.root)

    n_base = min(args.baseline_steps, len(msets))
    mono_t, sols, x0 = [], [], None
    for ms in msets[:n_base]:
        t0 = time.perf_counter()
        sol = run_monolithic(model, ms, x0=x0)
        mono_t.append(time.perf_counter() - t0)
        sols.append(sol)
        x0 = sol.state
    base_acc = None
    if sols:
        Vm = np.array([s.voltages for s in sols])
        Im = np.array([unpack_currents(s.state) for s in sols])
        base_acc = accuracy(Vm, Im, truth, rows=slice(0, n_base), root=model.root)

    # isolated per-module inference, cycling over modules and timesteps
    mods = list(modules.values())
    k = {"i": 0}

    def one():
        i = k["i"]
        k["i"] += 1
        r = results[i % len(results)]
        m = mods[i % len(mods)]
        infer_module(m, msets[i % len(results)], r.v_n[m.id], model.base.s_base_va)

    timings = {
        "pipeline": [r.timings["total"] for r in results],
        "layer1": [r.timings["layer1"] for r in results],
        "layer2": [r.timings["layer2"] for r in results],
        "module_inference": time_calls(one, args.repeats) if mods and results else [],
        "monolithic": mono_t,
    }
    statuses = {}
    for r in results:
        statuses[r.status] = statuses.get(r.status, 0) + 1
    report = BenchReport(acc, base_acc, timings, [r.iterations for r in results], statuses)
    write_results_jsonl(out / "states.jsonl", results)
    _write_iterations(out / "iterations.csv", results)
    write_mape_csv(out / "mape.csv", report.mape_rows())
    write_timing_csv(out / "timing.csv", timings)
    summary = {name: summarize(v) for name, v in timings.items()}
    summary["speedup"] = report.speedup
    summary["threads"] = args.threads
    _write_json(out / "timing_summary.json", summary)
    return report, results


def cmd_bench(args) -> int:
    model, digest = _feeder(args)
    model, modules, cfg = _test_setup(args, model, digest, default_steps=200)
    report, results = _bench(model, modules, cfg, args, _out(args))
    its = np.array(report.iterations)
    fast = int(np.sum([r.converged and r.iterations <= 10 for r in results]))
    t = {k: summarize(v)["median"] for k, v in report.timings.items()}
    line = f"|V| MAPE {report.accuracy.v_mag_mape:.3f}%"
    if report.baseline_accuracy is not None:
        line += f" (monolithic {report.baseline_accuracy.v_mag_mape:.3f}%)"
    print(line)
    print(f"settled within 10 iterations: {fast}/{len(results)}; mean iterations {its.mean():.2f}")
    print(f"median seconds: pipeline {t['pipeline']:.4f}, monolithic {t['monolithic']:.4f}, "
          f"module inference {t['module_inference']:.6f}; speedup {report.speedup:.2f}x")
    return 0


def cmd_sweep(args) -> int:
    model, _ = _feeder(args)
    levels = [float(x) for x in args.levels.split(",")]
    if any(not 0 <= p <= 1 for p in levels) or not levels:
        raise CliError("--levels must be comma-separated fractions in [0, 1]")
    train_cfg = _scenario(args, ScenarioConfig(timesteps=2000), offset=0)
    test_cfg = train_cfg.replace(offset=train_cfg.offset + train_cfg.timesteps, timesteps=args.test_timesteps)
    hcfg = _hierarchy(args)
    rows = []
    for p in levels:
        metered = with_meters(model, p, train_cfg.seed)
        modules, _, _ = train_modules(metered, train_cfg.replace(meter_penetration=p), args.epochs,
                                      args.online_steps or 0, hcfg, train_cfg.seed)
        _, truth, msets = _simulate(metered, test_cfg.replace(meter_penetration=p))
        results = list(estimate_stream(metered, msets, modules, hcfg))
        V, I = _stack(results, metered)
        acc = accuracy(V, I, truth, root=metered.root)
        m, se = mean_and_se(per_step_mape(V, truth.voltages))
        n_met = sum(c.has_meter for c in metered.customers)
        settled = float(np.mean([r.converged and r.iterations <= 10 for r in results]))
        rows.append((p, n_met, m, se, acc.angle_mae_rad, acc.current_mape, settled))
        log.info("penetration %.2f: |V| MAPE %.4f%% +- %.4f", p, m, se)
    out = _out(args)
    with open(out / "sweep.csv", "w") as fh:
        fh.write("meter_penetration,metered,v_mag_pct,v_mag_se,angle_mae_rad,current_pct,settled_frac\n")
        for p, n, m, se, ang, cur, st in rows:
            fh.write(f"{p!r},{n},{m!r},{se!r},{ang!r},{cur!r},{st!r}\n")
    order = sorted(rows)
    strict, steps = trend_holds([r[2] for r in order], [r[3] for r in order])
    for p, n, m, se, *_ in order:
        print(f"penetration {p:.2f} ({n} meters): |V| MAPE {m:.4f}% +- {se:.4f}")
    print(f"highest penetration beats lowest: {'yes' if strict else 'no'}; "
          f"non-increasing within pooled SE: {'yes' if steps else 'no'}")
    return 0


def cmd_topology(args) -> int:
    model, digest = _feeder(args)
    if not Path(args.switches).is_file():
        raise CliError(f"switch file not found: {args.switches}")
    ops = load_switch_ops(args.switches)
    model, modules, cfg = _test_setup(args, model, digest, default_steps=200)
    changed = apply_topology_change(model, ops)
    hcfg = _hierarchy(args)
    profiles = generate_profiles(model, cfg)
    out = _out(args)
    summary, rows = {}, []
    for name, m in (("before", model), ("after", changed)):
        truth = generate_truth(m, profiles)
        msets = synthesize_measurements(m, truth, cfg)
        results = list(estimate_stream(m, msets, modules, hcfg))
        V, I = _stack(results, m)
        acc = accuracy(V, I, truth, root=m.root)
        rows += [(name, "v_mag_pct", acc.v_mag_mape), (name, "angle_mae_rad", acc.angle_mae_rad),
                 (name, "current_pct", acc.current_mape)]
        summary[name] = {"v_mag_pct": acc.v_mag_mape,
                         "settled_frac": float(np.mean([r.converged and r.iterations <= 10 for r in results]))}
        if name == "after":
            write_results_jsonl(out / "states.jsonl", results)
    summary["v_mag_ratio"] = summary["after"]["v_mag_pct"] / summary["before"]["v_mag_pct"]
    summary["switches"] = [dataclasses.asdict(op) for op in ops]
    write_mape_csv(out / "mape.csv", rows)
    _write_json(out / "topology.json", summary)
    save_feeder(changed, out / "feeder_after.model")
    print(f"|V| MAPE before {summary['before']['v_mag_pct']:.4f}%, after {summary['after']['v_mag_pct']:.4f}% "
          f"(ratio {summary['v_mag_ratio']:.3f}); settled before {summary['before']['settled_frac']:.3f}, "
          f"after {summary['after']['settled_frac']:.3f}")
    return 0


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--feeder", help="feeder model file (default: bundled 60-node feeder)")
    common.add_argument("--scenario", help="scenario INI file with a [scenario] section")
    common.add_argument("--seed", type=int, help="scenario and training seed")
    common.add_argument("--timesteps", type=int, help="number of timesteps in the stream")
    common.add_argument("--meter-penetration", type=float, help="fraction of customers with smart meters")
    common.add_argument("--pv-penetration", type=float, help="PV peak as a fraction of the load peak")
    common.add_argument("--threads", type=int, help="cap on BLAS/LAPACK threads")
    common.add_argument("--workers", type=int, default=1, help="threads for parallel module inference")
    common.add_argument("--max-iter", type=int, default=20, help="Stage A iteration cap")
    common.add_argument("--eps-v", type=float, default=1e-4, help="boundary voltage tolerance (p.u.)")
    common.add_argument("--out", default="out", help="output directory")
    common.add_argument("-v", "--verbose", action="count", default=0)

    p = argparse.ArgumentParser(prog="hdsse", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", parents=[common], help="write profiles, truth and measurements as CSV")
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("train", parents=[common], help="pretrain and train the secondary modules")
    s.add_argument("--checkpoints", required=True, help="checkpoint directory to write")
    s.add_argument("--epochs", type=int, default=150, help="supervised pretraining epochs (0 skips pretraining)")
    s.add_argument("--online-steps", type=int, help="Stage B steps after pretraining (default: whole stream)")
    s.add_argument("--checkpoint-every", type=int, default=0, help="also checkpoint every N online steps")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("estimate", parents=[common], help="run the hierarchy over a held-out stream")
    s.add_argument("--checkpoints", help="trained checkpoint directory")
    s.set_defaults(func=cmd_estimate)

    s = sub.add_parser("bench", parents=[common], help="accuracy and timing against the monolithic WLS")
    s.add_argument("--checkpoints", help="trained checkpoint directory")
    s.add_argument("--baseline-steps", type=int, default=50, help="timesteps solved by the monolithic WLS")
    s.add_argument("--repeats", type=int, default=3500, help="isolated module inference calls to time")
    s.set_defaults(func=cmd_bench)

    s = sub.add_parser("sweep", parents=[common], help="accuracy across smart-meter penetrations")
    s.add_argument("--levels", default=DEFAULT_LEVELS, help="comma-separated meter penetrations")
    s.add_argument("--epochs", type=int, default=150)
    s.add_argument("--online-steps", type=int, default=0, help="Stage B steps after pretraining per level")
    s.add_argument("--test-timesteps", type=int, default=300)
    s.set_defaults(func=cmd_sweep)

    s = sub.add_parser("topology", parents=[common], help="re-estimate after primary switching, no retraining")
    s.add_argument("--checkpoints", help="trained checkpoint directory")
    s.add_argument("--switches", required=True, help="switch file: 'open <branch>' / 'close <a> <b> <r> <x>'")
    s.set_defaults(func=cmd_topology)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.threads is not None:
            if args.threads < 1:
                raise CliError("--threads must be >= 1")
            with threadpool_limits(limits=args.threads):
                return args.func(args)
        return args.func(args)
    except (CliError, ValueError, KeyError, OSError) as exc:
        print(f"hdsse {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
