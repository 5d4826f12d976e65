"""Command-line entry point: ``kinprior <subcommand> [options]``.

Subcommands: ``generate``, ``train``, ``eval``, ``validate``, ``fit-cfm``.
Options come from built-in defaults, then an optional INI file
(``--config``, one section per subcommand), then flags; flags win. Every run
writes its resolved configuration next to its main output.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical
failure, 5 validation failure.
"""

from __future__ import annotations

import argparse
import configparser
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import cfm, oracle
from .core import Formulation, Trajectory, read_trajectories, write_trajectories
from .errors import ConfigError, DataError, KinpriorError, NumericalError, ValidationFailure

log = logging.getLogger("kinprior")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERICAL, EXIT_VALIDATION = 0, 2, 3, 4, 5
REPORT_SCHEMA = 1

# per-purpose children of the root seed
SEED_PURPOSES = {"data": 0, "init": 1, "mc": 2, "cases": 3}


def derive_seed(root: int, purpose: str) -> int:
    """Independent 63-bit seed for one purpose of a root seed."""
    ss = np.random.SeedSequence(int(root), spawn_key=(SEED_PURPOSES[purpose],))
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))


# name -> (type, default) per subcommand; None means "required unless set in config"
OPTIONS = {
    "generate": {
        "scenes": (int, 100), "agents": (int, 3), "history": (int, 10), "horizon": (int, 20), "dt": (float, 0.1),
        "noise": (float, 0.0), "curvature_max": (float, 0.02), "substeps": (int, 10), "seed": (int, 0),
        "out": (str, "dataset.jsonl"),
    },
    "train": {
        "data": (str, None), "eval_data": (str, ""), "out": (str, "model.npz"), "formulation": (str, "none"),
        "K": (int, 3), "hidden": (str, "64"), "lr": (float, 0.1), "epochs": (int, 50), "batch_size": (int, 32),
        "seed": (int, 0), "gamma": (float, 0.0), "data_fraction": (float, 1.0), "blend": (bool, False),
        "printed_cfm_loss": (bool, False), "clip_norm": (float, 1.0), "sigma_floor": (float, 0.05),
        "miss_threshold": (float, 2.0),
    },
    "eval": {
        "data": (str, None), "checkpoint": (str, None), "report": (str, "eval_report.json"),
        "miss_threshold": (float, 0.0), "workers": (int, 1),
    },
    "validate": {
        "formulation": (str, "f1"), "n_samples": (int, 1_000_000), "seed": (int, 0), "steps": (int, 20),
        "cases": (int, 1), "dt": (float, 0.1), "sigma_mode": (str, "quadrature"), "workers": (int, 1),
        "report": (str, "validate_report.json"),
    },
    "fit-cfm": {
        "data": (str, ""), "platoon": (str, ""), "iters": (int, 200), "lr": (float, 1.0),
        "report": (str, "fit_report.json"),
    },
}


def _parse_bool(text) -> bool:
    if isinstance(text, bool):
        return text
    low = str(text).strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {text!r}")


def _convert(name, typ, raw):
    try:
        return _parse_bool(raw) if typ is bool else typ(raw)
    except (TypeError, ValueError):
        raise ConfigError(f"option {name}: cannot read {raw!r} as {typ.__name__}") from None


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="kinprior", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)
    for cmd, opts in OPTIONS.items():
        p = sub.add_parser(cmd)
        p.add_argument("--config", help="INI file; section [%s] (and [run]) supplies defaults" % cmd)
        for name, (typ, _) in opts.items():
            flag = "--" + name.replace("_", "-")
            if typ is bool:
                p.add_argument(flag, dest=name, nargs="?", const="true", default=None)
            else:
                p.add_argument(flag, dest=name, default=None)
    return parser


def resolve(args: argparse.Namespace) -> dict:
    """Merge defaults, config file and flags for the chosen subcommand."""
    opts = OPTIONS[args.command]
    resolved = {name: default for name, (_, default) in opts.items()}
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        ini = configparser.ConfigParser()
        try:
            ini.read(path, encoding="utf-8")
        except configparser.Error as exc:
            raise ConfigError(f"{path}: {exc}") from None
        for section in ("run", args.command):
            if ini.has_section(section):
                for key, raw in ini.items(section):
                    key = key.replace("-", "_")
                    match = next((n for n in opts if n.lower() == key.lower()), None)
                    if match is None:
                        if section == "run":
                            continue
                        raise ConfigError(f"{path}: unknown option {key!r} in [{section}]")
                    resolved[match] = _convert(match, opts[match][0], raw)
    for name, (typ, _) in opts.items():
        raw = getattr(args, name, None)
        if raw is not None:
            resolved[name] = _convert(name, typ, raw)
    missing = [n for n, v in resolved.items() if v is None]
    if missing:
        raise ConfigError(f"{args.command}: missing required options {missing}")
    return resolved


def write_resolved(output: Path, command: str, resolved: dict) -> Path:
    """Write ``<output>.config.ini`` holding the options actually used."""
    ini = configparser.ConfigParser()
    ini.optionxform = str
    ini[command] = {k: str(v).lower() if isinstance(v, bool) else str(v) for k, v in resolved.items()}
    path = output.with_name(output.name + ".config.ini")
    with open(path, "w", encoding="utf-8") as fh:
        ini.write(fh)
    return path


def _write_json(path: Path, doc: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")


# ---------------------------------------------------------------- subcommands

def cmd_generate(o: dict) -> int:
    from .forecast.synth import SynthConfig, synth_generate

    try:
        scfg = SynthConfig(n_agents=o["agents"], history=o["history"], horizon=o["horizon"], dt=o["dt"],
                           noise=o["noise"], curvature_max=o["curvature_max"], substeps=o["substeps"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    if o["scenes"] < 1:
        raise ConfigError("scenes must be >= 1")
    scenes = synth_generate(o["scenes"], scfg, seed=derive_seed(o["seed"], "data"))
    out = Path(o["out"])
    out.parent.mkdir(parents=True, exist_ok=True)
    write_trajectories(out, scenes)
    write_resolved(out, "generate", o)
    log.info("wrote %d scenes to %s", len(scenes), out)
    return EXIT_OK


def _train_config(o: dict):
    from .forecast.model import TrainConfig

    try:
        hidden = tuple(int(h) for h in str(o["hidden"]).replace(",", " ").split())
        return TrainConfig(formulation=o["formulation"], K=o["K"], hidden=hidden, lr=o["lr"], epochs=o["epochs"],
                           batch_size=o["batch_size"], seed=derive_seed(o["seed"], "init"), gamma=o["gamma"],
                           data_fraction=o["data_fraction"], blend=o["blend"],
                           printed_cfm_loss=o["printed_cfm_loss"], clip_norm=o["clip_norm"],
                           sigma_floor=o["sigma_floor"], miss_threshold=o["miss_threshold"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def _scene_geometry(scenes, cfg):
    steps = {s.n_steps for s in scenes}
    if not scenes or min(steps) < 2:
        raise DataError("dataset has no usable scenes")
    dts = {round(s.dt, 12) for s in scenes}
    if len(dts) != 1:
        raise DataError(f"dataset mixes time steps {sorted(dts)}")
    return min(steps), dts.pop()


def cmd_train(o: dict) -> int:
    from dataclasses import replace

    from .forecast.model import build_batch, save_checkpoint
    from .forecast.train import subsample_scenes, train

    cfg = _train_config(o)
    scenes = read_trajectories(o["data"])
    n_steps, dt = _scene_geometry(scenes, cfg)
    if n_steps <= cfg.history:
        raise DataError(f"scenes have {n_steps} steps; need more than the {cfg.history}-step history")
    cfg = replace(cfg, dt=dt, horizon=n_steps - cfg.history)
    scenes = subsample_scenes(scenes, cfg.data_fraction, cfg.seed)
    eval_batch = build_batch(read_trajectories(o["eval_data"]), cfg) if o["eval_data"] else None
    result = train(build_batch(scenes, cfg), cfg, eval_batch)
    out = Path(o["out"])
    out.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(out, result.params, cfg, {"loss_curve": result.loss_curve, "ade_curve": result.ade_curve})
    write_resolved(out, "train", o)
    log.info("final training loss %.4f; checkpoint %s", result.loss_curve[-1] if result.loss_curve else float("nan"), out)
    return EXIT_OK


def cmd_eval(o: dict) -> int:
    from dataclasses import replace

    from .forecast.model import build_batch, load_checkpoint
    from .forecast.train import evaluate

    params, cfg, meta = load_checkpoint(o["checkpoint"])
    if o["miss_threshold"] > 0:
        cfg = replace(cfg, miss_threshold=o["miss_threshold"])
    scenes = read_trajectories(o["data"])
    n_steps, dt = _scene_geometry(scenes, cfg)
    if n_steps < cfg.history + cfg.horizon or abs(dt - cfg.dt) > 1e-12:
        raise DataError("evaluation scenes do not match the checkpoint's history/horizon/dt")
    report = evaluate(params, build_batch(scenes, cfg), cfg,
                      loss_curve=meta.get("loss_curve", ()), ade_curve=meta.get("ade_curve", ()),
                      workers=max(1, o["workers"]))
    doc = report.to_dict()
    doc["formulation"] = cfg.formulation
    out = Path(o["report"])
    _write_json(out, doc)
    write_resolved(out, "eval", o)
    log.info("minADE %.4f minFDE %.4f miss %.3f", report.min_ade, report.min_fde, report.miss_rate)
    return EXIT_OK


def cmd_validate(o: dict) -> int:
    form = Formulation.parse(o["formulation"]) if o["formulation"] else None
    if form is None or form is Formulation.NONE:
        raise ConfigError("validate needs --formulation f1|f2|f3|f4")
    if o["n_samples"] < 2 or o["steps"] < 1 or o["cases"] < 1:
        raise ConfigError("n_samples must be >= 2 and steps, cases >= 1")
    case_seed, mc_seed = derive_seed(o["seed"], "cases"), derive_seed(o["seed"], "mc")
    cases, ok = [], True
    for c in range(o["cases"]):
        initial, controls, profile = oracle.random_case(form, case_seed + c, o["steps"], o["dt"])
        checks = oracle.compare_with_mc(initial, controls, profile, o["steps"], o["n_samples"], mc_seed + c,
                                        sigma_mode=o["sigma_mode"], workers=o["workers"])
        rows = [dict(step=s.step, analytic_mean=list(s.analytic_mean), analytic_sigma=list(s.analytic_sigma),
                     mc_mean=list(s.mc_mean), mc_sigma=list(s.mc_sigma), tol_mean=list(s.tol_mean),
                     tol_sigma=list(s.tol_sigma), passed=s.passed) for s in checks]
        passed = all(r["passed"] for r in rows)
        ok &= passed
        cases.append({"case": c, "passed": passed, "steps": rows})
    doc = {"schema_version": REPORT_SCHEMA, "formulation": form.value, "n_samples": o["n_samples"],
           "se_multiplier": oracle.SE_MULTIPLIER, "passed": ok, "cases": cases}
    out = Path(o["report"])
    _write_json(out, doc)
    write_resolved(out, "validate", o)
    if not ok:
        raise ValidationFailure(f"analytical rollout disagrees with Monte Carlo; see {out}")
    log.info("validation passed (%d case(s))", len(cases))
    return EXIT_OK


def cmd_fit_cfm(o: dict) -> int:
    if bool(o["data"]) == bool(o["platoon"]):
        raise ConfigError("fit-cfm needs exactly one of --data or --platoon")
    fits = []
    if o["platoon"]:
        pl = cfm.load_platoon(o["platoon"])
        xs, vs = cfm.simulate(pl.state, pl.params, pl.steps, pl.lead_profile)
        dt = pl.state.dt
        ids = pl.ids or list(range(pl.state.n))
        trajs = [Trajectory(ids[i], np.stack([xs[:, i], np.zeros_like(xs[:, i]), np.zeros_like(xs[:, i]), vs[:, i]], 1),
                            dt, pl.state.lengths[i]) for i in range(pl.state.n)]
        pairs = [(trajs[i], trajs[j], pl.params[i]) for i, j in enumerate(pl.state.leaders) if j >= 0]
    else:
        pairs = []
        for scene in read_trajectories(o["data"]):
            for ag in scene.agents:
                if ag.leader_id is not None:
                    try:
                        pairs.append((ag, scene.agent(ag.leader_id), None))
                    except KeyError:
                        raise DataError(f"scene {scene.scene_id}: agent {ag.agent_id} has unknown leader") from None
    for follower, leader, truth in pairs:
        entry = {"agent_id": follower.agent_id, "leader_id": leader.agent_id}
        try:
            res = cfm.estimate_params(follower, leader, iters=o["iters"], lr=o["lr"], return_result=True)
            entry.update(status="ok", loss=res.loss, iterations=res.iterations,
                         params=dict(zip(cfm.PARAM_NAMES, res.params.as_array().tolist())))
        except cfm.FitDiverged as exc:
            entry.update(status="diverged", loss=exc.loss,
                         params=dict(zip(cfm.PARAM_NAMES, exc.best.as_array().tolist())))
        if truth is not None:
            entry["true_params"] = dict(zip(cfm.PARAM_NAMES, truth.as_array().tolist()))
        fits.append(entry)
    out = Path(o["report"])
    _write_json(out, {"schema_version": REPORT_SCHEMA, "fits": fits})
    write_resolved(out, "fit-cfm", o)
    log.info("fitted %d follower(s)", len(fits))
    return EXIT_OK


COMMANDS = {"generate": cmd_generate, "train": cmd_train, "eval": cmd_eval, "validate": cmd_validate,
            "fit-cfm": cmd_fit_cfm}


def run(argv=None) -> int:
    """Run one subcommand; returns the process exit code."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0) and EXIT_CONFIG
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](resolve(args))
    except KinpriorError as exc:
        code, kind = classify(exc)
        print(f"kinprior: {kind}: {exc}", file=sys.stderr)
        return code


def classify(exc: KinpriorError) -> tuple[int, str]:
    """Exit code and label for an error raised by a subcommand."""
    for cls, code, kind in ((ConfigError, EXIT_CONFIG, "config error"), (DataError, EXIT_DATA, "data error"),
                            (ValidationFailure, EXIT_VALIDATION, "validation failure"),
                            (NumericalError, EXIT_NUMERICAL, "numerical failure")):
        if isinstance(exc, cls):
            return code, kind
    return EXIT_NUMERICAL, "error"


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
