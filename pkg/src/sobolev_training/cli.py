"""Command-line entry point.

Subcommands: ``regress``, ``distill``, ``sg``, ``witness``, ``check-grad`` and
``replay``.  Settings come from built-in defaults, then an optional config
file (``--config``), then explicit flags; later sources win.

Config file grammar (one setting per line)::

    # comment
    key = value          # keys are flag names, '-' or '_' both accepted
    function = beale, booth
    standardize = true

List-valued settings are comma separated.  Unknown keys are a usage error.

Exit codes: 0 success, 1 usage or configuration error, 2 numerical failure
(divergence / NaN in any run), 3 invariant violation (check-grad, witness).
The output directory is ``--out``, else ``$SOBOLEV_OUTPUT_DIR``, else
``runs/<subcommand>-<timestamp>``.  ``manifest.json`` is written there
before any run starts and finalised when the command ends.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from . import benchmarks as bm
from . import distill, gradcheck, regression, results, syngrad, witness

log = logging.getLogger("sobolev_training")

OUTPUT_ENV = "SOBOLEV_OUTPUT_DIR"
EXIT_OK, EXIT_USAGE, EXIT_NUMERIC, EXIT_INVARIANT = 0, 1, 2, 3


class UsageError(Exception):
    pass


# -- value parsers ----------------------------------------------------------------

def parse_bool(text) -> bool:
    if isinstance(text, bool):
        return text
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


def list_of(conv, choices=None):
    def parse(text):
        if isinstance(text, (list, tuple)):
            items = list(text)
        else:
            items = [p.strip() for p in str(text).split(",") if p.strip()]
        if not items:
            raise argparse.ArgumentTypeError("expected a non-empty comma-separated list")
        try:
            out = [conv(p) for p in items]
        except ValueError as exc:
            raise argparse.ArgumentTypeError(str(exc)) from None
        if choices is not None:
            bad = [v for v in out if v not in choices]
            if bad:
                raise argparse.ArgumentTypeError(f"invalid choice(s) {bad}; choose from {', '.join(choices)}")
        return out
    parse.__name__ = f"list[{getattr(conv, '__name__', 'value')}]"
    return parse


def one_of(choices):
    def parse(text):
        if text not in choices:
            raise argparse.ArgumentTypeError(f"invalid choice {text!r}; choose from {', '.join(choices)}")
        return text
    parse.__name__ = "choice"
    return parse


INTS = list_of(int)

# Per-subcommand settings: name -> (parser, default, help).
COMMON = {
    "seed": (INTS, [0], "run seeds (comma list); child seeds are derived from each"),
    "workers": (int, os.cpu_count() or 1, "worker processes for independent runs"),
}

SETTINGS = {
    "regress": {
        "function": (list_of(str, bm.NAMES), ["styblinski_tang"], "benchmark function(s)"),
        "n": (INTS, [100], "training set size(s)"),
        "mode": (list_of(str, regression.MODES), list(regression.MODES), "regular and/or sobolev"),
        "steps": (int, 50_000, "optimizer steps per run"),
        "lr": (float, 3e-5, "learning rate"),
        "hidden": (INTS, [256, 256], "hidden layer widths"),
        "activation": (one_of(("relu", "leaky_relu", "tanh", "sigmoid")), "relu", "hidden activation"),
        "optimizer": (one_of(("adam", "sgd_momentum")), "adam", "optimizer"),
        "batch_size": (int, 0, "minibatch size (0: full batch up to 100 points, else 100)"),
        "standardize": (parse_bool, False, "fit standardized targets"),
        "test_size": (int, 10_000, "held-out points"),
        "eval_every": (int, 5_000, "steps between logged test evaluations"),
        "dump_surface": (parse_bool, False, "write a 50x50 lattice of model values and gradients"),
    },
    "distill": {
        "mode": (list_of(str, distill.MODES), list(distill.MODES), "regular and/or sobolev"),
        "alpha": (float, 1.0, "weight of the projected gradient term"),
        "data_fraction": (float, 0.1, "fraction of the state stream used for training"),
        "projections": (int, 1, "random projections per example"),
        "steps": (int, 3000, "optimizer steps"),
        "lr": (float, 1e-4, "learning rate"),
        "batch_size": (int, 200, "minibatch size"),
        "num_states": (int, 2000, "size of the generated state stream"),
        "state_dim": (int, 16, "state dimension"),
        "actions": (int, 6, "number of actions"),
        "student_hidden": (INTS, [32], "student hidden widths"),
        "teacher_hidden": (INTS, [64, 64], "teacher hidden widths"),
        "temperature": (float, 0.5, "teacher logit temperature"),
        "derivative_loss": (one_of(("l2", "l1")), "l2", "penalty on the projected gradient mismatch"),
    },
    "sg": {
        "variant": (list_of(str, (*syngrad.VARIANTS, "backprop")), list(syngrad.VARIANTS), "SG estimator(s)"),
        "splits": (int, 3, "number of split boundaries"),
        "steps": (int, 4000, "optimizer steps"),
        "batch_size": (int, 64, "minibatch size"),
        "hidden": (INTS, [64, 64, 64], "main network hidden widths"),
        "sg_hidden": (INTS, [128], "loss-model hidden widths"),
        "direct_sg_hidden": (INTS, [128, 128], "direct SG hidden widths"),
        "main_lr": (float, 1e-3, "main network Adam learning rate"),
        "sg_lr": (float, 1e-4, "SG module Adam learning rate"),
        "value_loss": (one_of(syngrad.LOSS_KINDS), "l1", "loss-value penalty"),
        "grad_loss": (one_of(syngrad.LOSS_KINDS), "l1", "gradient penalty"),
        "n_train": (int, 4096, "training examples"),
        "n_test": (int, 2048, "test examples"),
    },
    "witness": {
        "cases": (int, 1000, "random Gaussian round-trip cases"),
    },
    "check-grad": {
        "target": (list_of(str, gradcheck.TARGETS), list(gradcheck.TARGETS), "what to verify"),
        "activation": (one_of(("tanh", "sigmoid", "relu", "leaky_relu")), "tanh", "activation for network checks"),
        "points": (int, 1000, "random points per benchmark function"),
    },
}


@dataclass
class RunManifest:
    subcommand: str
    config_path: str | None
    seeds: list
    output_dir: str
    version: str = __version__
    started: str = ""
    finished: str | None = None
    status: str = "running"
    exit_code: int | None = None
    settings: dict = field(default_factory=dict)
    outputs: list = field(default_factory=list)

    def write(self) -> Path:
        return results.write_json(Path(self.output_dir) / "manifest.json", asdict(self))


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


# -- parsing ----------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _flag(name: str) -> str:
    return "--" + name.replace("_", "-")


COMMAND_HELP = {
    "regress": "fit MLPs to benchmark functions with and without derivative supervision",
    "distill": "distill a synthetic teacher policy into a smaller student",
    "sg": "train a split classifier with synthetic gradient modules",
    "witness": "run the constructive zero-loss and Gaussian identification checks",
    "check-grad": "compare autodiff gradients against finite differences",
}


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="sobolev-train", description="Sobolev Training experiments and checks.")
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for command, table in SETTINGS.items():
        p = sub.add_parser(command, help=COMMAND_HELP.get(command), argument_default=argparse.SUPPRESS)
        p.add_argument("--config", help="flat key=value config file")
        p.add_argument("--out", help=f"output directory (default ${OUTPUT_ENV} or runs/<command>-<time>)")
        for name, (conv, default, help_text) in {**COMMON, **table}.items():
            p.add_argument(_flag(name), dest=name, type=conv, help=f"{help_text} (default: {default})",
                           **({"nargs": "?", "const": True} if conv is parse_bool else {}))
    rp = sub.add_parser("replay", help="re-run the settings recorded in a manifest")
    rp.add_argument("manifest", help="path to manifest.json")
    rp.add_argument("--out", default=None, help="output directory for the re-run")
    rp.add_argument("--workers", type=int, default=None)
    return parser


def read_config_file(path, command: str) -> dict:
    """Parse a flat ``key = value`` file against ``command``'s settings."""
    path = Path(path)
    if not path.is_file():
        raise UsageError(f"config file {path} not found")
    table = {**COMMON, **SETTINGS[command]}
    out = {}
    for lineno, raw in enumerate(path.read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (t.strip() for t in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in table:
            raise UsageError(f"{path}:{lineno}: unknown key {key!r} for '{command}'")
        try:
            out[key] = table[key][0](value)
        except (argparse.ArgumentTypeError, ValueError) as exc:
            raise UsageError(f"{path}:{lineno}: bad value for {key!r}: {exc}") from None
    return out


def resolve_settings(command: str, config: dict, flags: dict) -> dict:
    table = {**COMMON, **SETTINGS[command]}
    settings = {name: default for name, (_, default, _) in table.items()}
    settings.update(config)
    settings.update({k: v for k, v in flags.items() if k in table})
    return settings


def parse_cli(argv) -> tuple[RunManifest, dict]:
    """Parse ``argv`` into a manifest and the resolved settings (not yet validated)."""
    ns = build_parser().parse_args(argv)
    if ns.command == "replay":
        path = Path(ns.manifest)
        if not path.is_file():
            raise UsageError(f"manifest {path} not found")
        recorded = json.loads(path.read_text())
        command = recorded["subcommand"]
        settings = resolve_settings(command, {}, recorded["settings"])
        if ns.workers is not None:
            settings["workers"] = ns.workers
        if recorded.get("version") != __version__:
            log.warning("manifest was written by version %s, replaying with %s", recorded.get("version"), __version__)
        out = ns.out or _default_out(command)
        return RunManifest(command, str(path), settings["seed"], str(out), settings=settings), settings
    flags = vars(ns).copy()
    command = flags.pop("command")
    config_path = flags.pop("config", None)
    out = flags.pop("out", None)
    config = read_config_file(config_path, command) if config_path else {}
    settings = resolve_settings(command, config, flags)
    out = out or os.environ.get(OUTPUT_ENV) or _default_out(command)
    return RunManifest(command, config_path, settings["seed"], str(out), settings=settings), settings


def _default_out(command: str) -> Path:
    return Path("runs") / f"{command}-{datetime.now().strftime('%Y%m%d-%H%M%S')}"


# -- typed configs ------------------------------------------------------------------

def regression_configs(s: dict) -> list[regression.RegressionConfig]:
    base = regression.RegressionConfig(
        steps=s["steps"], hidden=tuple(s["hidden"]), activation=s["activation"], optimizer=s["optimizer"],
        learning_rate=s["lr"], batch_size=s["batch_size"] or None, standardize=s["standardize"],
        test_size=s["test_size"], eval_every=s["eval_every"],
    )
    return regression.sweep_configs(s["function"], s["n"], s["mode"], s["seed"], base)


def distill_configs(s: dict) -> list[tuple[str, distill.DistillConfig]]:
    return [
        (mode, distill.DistillConfig(
            student_hidden=tuple(s["student_hidden"]), alpha=s["alpha"], data_fraction=s["data_fraction"],
            num_projections=s["projections"], steps=s["steps"], seed=seed, learning_rate=s["lr"],
            batch_size=s["batch_size"], num_states=s["num_states"], state_dim=s["state_dim"],
            actions=s["actions"], teacher_hidden=tuple(s["teacher_hidden"]), temperature=s["temperature"],
            derivative_loss=s["derivative_loss"],
        ))
        for mode in s["mode"] for seed in s["seed"]
    ]


def sg_configs(s: dict) -> list[syngrad.SgTrainConfig]:
    return [
        syngrad.SgTrainConfig(
            variant=v, splits=s["splits"], seed=seed, steps=s["steps"], batch_size=s["batch_size"],
            hidden=tuple(s["hidden"]), sg_hidden=tuple(s["sg_hidden"]),
            direct_sg_hidden=tuple(s["direct_sg_hidden"]), main_lr=s["main_lr"], sg_lr=s["sg_lr"],
            value_loss=s["value_loss"], grad_loss=s["grad_loss"], n_train=s["n_train"], n_test=s["n_test"],
        )
        for v in s["variant"] for seed in s["seed"]
    ]


# -- jobs (top level so worker processes can import them) -----------------------------

def _regress_job(config: regression.RegressionConfig, surface_dir):
    try:
        rec, model = regression.train_regression(config)
    except Exception as exc:  # reported as a failed row, the sweep goes on
        rec = getattr(exc, "record", None)
        if rec is None:
            nan = float("nan")
            rec = regression.ResultRecord(config, nan, nan, nan, 0.0, status="failed",
                                          error=f"{type(exc).__name__}: {exc}")
        rec.model = None
        return rec, None
    path = None
    if surface_dir is not None:
        header, rows = regression.dump_surface(model, config.function)
        name = f"surface_{config.function_name}_{config.mode}_n{config.train_size}_s{config.seed}.csv"
        path = str(results.write_table(Path(surface_dir) / name, header, rows))
    rec.model = None
    return rec, path


def _distill_job(item):
    mode, config = item
    try:
        return distill.run_distillation(config, mode).row()
    except (FloatingPointError, ArithmeticError) as exc:
        return {"mode": mode, "seed": config.seed, "steps": config.steps, "data_fraction": config.data_fraction,
                "alpha": config.alpha, "kl_test": float("nan"), "top1_err": float("nan"), "wall_ms": 0.0,
                "status": "diverged", "error": str(exc)}


def _sg_job(config: syngrad.SgTrainConfig):
    try:
        return syngrad.run_sg_experiment(config).row()
    except (FloatingPointError, ArithmeticError) as exc:
        return {"variant": config.variant, "splits": config.splits, "seed": config.seed,
                "test_acc": float("nan"), "steps": config.steps, "wall_ms": 0.0,
                "status": "diverged", "error": str(exc)}


def _map_jobs(fn, items, workers: int, on_result):
    """Results reach ``on_result`` in submission order, so sinks are deterministic."""
    if workers <= 1 or len(items) <= 1:
        for item in items:
            on_result(fn(item))
        return
    with ProcessPoolExecutor(max_workers=min(workers, len(items))) as pool:
        for res in pool.map(fn, items):
            on_result(res)


class _SurfaceJob:
    def __init__(self, surface_dir):
        self.surface_dir = surface_dir

    def __call__(self, config):
        return _regress_job(config, self.surface_dir)


# -- commands -----------------------------------------------------------------------

def cmd_regress(s: dict, manifest: RunManifest) -> int:
    configs = regression_configs(s)
    out = Path(manifest.output_dir)
    surface_dir = str(out / "surfaces") if s["dump_surface"] else None
    failures = 0
    with results.ResultSink(out, "regression", results.REGRESSION_FIELDS) as sink:
        manifest.outputs += [str(sink.csv_path), str(sink.jsonl_path)]

        def done(res):
            nonlocal failures
            rec, path = res
            sink.write(rec)
            if path:
                manifest.outputs.append(path)
            failures += rec.status != "ok"
            print(f"{rec.config.function_name:16s} {rec.config.mode:8s} n={rec.config.train_size:<6d} "
                  f"seed={rec.config.seed:<3d} test_mse={rec.test_mse:.4g} grad_mse={rec.test_grad_mse:.4g} "
                  f"[{rec.status}]", flush=True)

        _map_jobs(_SurfaceJob(surface_dir), configs, s["workers"], done)
    return EXIT_NUMERIC if failures else EXIT_OK


def cmd_distill(s: dict, manifest: RunManifest) -> int:
    items = distill_configs(s)
    rows = []
    with results.ResultSink(manifest.output_dir, "distill", results.DISTILL_FIELDS) as sink:
        manifest.outputs += [str(sink.csv_path), str(sink.jsonl_path)]

        def done(row):
            rows.append(row)
            sink.write(row)
            print(f"{row['mode']:8s} seed={row['seed']:<3d} kl_test={row['kl_test']:.4g} "
                  f"top1_err={row['top1_err']:.4g}", flush=True)

        _map_jobs(_distill_job, items, s["workers"], done)
    summary = {}
    for mode in s["mode"]:
        sel = [r for r in rows if r["mode"] == mode]
        summary[mode] = {"median_kl_test": float(np.median([r["kl_test"] for r in sel])),
                         "median_top1_err": float(np.median([r["top1_err"] for r in sel]))}
    manifest.outputs.append(str(results.write_json(Path(manifest.output_dir) / "distill_summary.json", summary)))
    return EXIT_NUMERIC if any(r.get("status", "ok") != "ok" for r in rows) else EXIT_OK


def cmd_sg(s: dict, manifest: RunManifest) -> int:
    configs = sg_configs(s)
    rows = []
    with results.ResultSink(manifest.output_dir, "sg", results.SG_FIELDS) as sink:
        manifest.outputs += [str(sink.csv_path), str(sink.jsonl_path)]

        def done(row):
            rows.append(row)
            sink.write(row)
            print(f"{row['variant']:9s} splits={row['splits']} seed={row['seed']:<3d} "
                  f"test_acc={row['test_acc']:.4f}", flush=True)

        _map_jobs(_sg_job, configs, s["workers"], done)
    summary = {}
    for v in s["variant"]:
        accs = [r["test_acc"] for r in rows if r["variant"] == v]
        summary[v] = {"mean": float(np.mean(accs)), "std": float(np.std(accs)), "n": len(accs)}
        print(f"{v:9s} mean={summary[v]['mean']:.4f} std={summary[v]['std']:.4f}")
    manifest.outputs.append(str(results.write_json(Path(manifest.output_dir) / "sg_summary.json", summary)))
    return EXIT_NUMERIC if any(r.get("status", "ok") != "ok" for r in rows) else EXIT_OK


def cmd_witness(s: dict, manifest: RunManifest) -> int:
    report = []
    for seed in s["seed"]:
        for item in witness.witness_report(s["cases"], seed):
            item["seed"] = seed
            report.append(item)
            flag = "ok  " if item["passed"] else "FAIL"
            print(f"{flag} seed={seed} {item['check']:52s} max_error={item['max_error']:.3e} tol={item['tol']:.0e}")
    out = Path(manifest.output_dir)
    manifest.outputs.append(str(results.write_json(out / "witness.json", report)))
    for seed in s["seed"]:
        for name, (header, rows) in witness.dense_grids(seed).items():
            manifest.outputs.append(str(results.write_table(out / f"witness_{name}_seed{seed}.csv", header, rows)))
    return EXIT_OK if all(r["passed"] for r in report) else EXIT_INVARIANT


def cmd_check_grad(s: dict, manifest: RunManifest) -> int:
    report, failed = [], []
    for seed in s["seed"]:
        for target in s["target"]:
            for res in gradcheck.run_check(target, s["activation"], seed, s["points"]):
                print(res.line(), flush=True)
                row = {"target": res.target, "case": res.case, "seed": seed, "max_rel": res.max_rel,
                       "tol": res.tol, "passed": res.passed, "worst": res.worst}
                report.append(row)
                if not res.passed:
                    failed.append(row)
    manifest.outputs.append(str(results.write_json(Path(manifest.output_dir) / "check_grad.json", report)))
    for row in failed:
        print("violation: " + json.dumps(results._json_safe(row)), file=sys.stderr)
    return EXIT_INVARIANT if failed else EXIT_OK


COMMANDS = {
    "regress": cmd_regress,
    "distill": cmd_distill,
    "sg": cmd_sg,
    "witness": cmd_witness,
    "check-grad": cmd_check_grad,
}


def validate(command: str, settings: dict) -> None:
    """Build every typed config once so bad values fail before any output is written."""
    if settings["workers"] < 1:
        raise ValueError("workers must be >= 1")
    if command == "regress":
        regression_configs(settings)
    elif command == "distill":
        distill_configs(settings)
    elif command == "sg":
        sg_configs(settings)
    elif command == "witness" and settings["cases"] < 1:
        raise ValueError("cases must be >= 1")
    elif command == "check-grad" and settings["points"] < 1:
        raise ValueError("points must be >= 1")


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    logging.basicConfig(level=logging.DEBUG if ("-v" in argv or "--verbose" in argv) else logging.INFO,
                        format="%(levelname)s %(message)s")
    try:
        manifest, settings = parse_cli(argv)
        validate(manifest.subcommand, settings)
        results.ensure_writable(manifest.output_dir)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ValueError, KeyError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE

    manifest.started = _now()
    manifest.write()
    t0 = time.perf_counter()
    try:
        code = COMMANDS[manifest.subcommand](settings, manifest)
        manifest.status = {EXIT_OK: "ok", EXIT_NUMERIC: "numerical failure", EXIT_INVARIANT: "invariant violation"}[code]
    except (FloatingPointError, ArithmeticError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        code, manifest.status = EXIT_NUMERIC, "numerical failure"
    except KeyboardInterrupt:
        code, manifest.status = 130, "interrupted"
    manifest.exit_code = code
    manifest.finished = _now()
    manifest.write()
    log.info("%s finished in %.1fs; outputs in %s", manifest.subcommand, time.perf_counter() - t0, manifest.output_dir)
    return code


if __name__ == "__main__":
    sys.exit(main())
