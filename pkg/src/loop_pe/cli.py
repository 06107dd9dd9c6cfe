"""Command line: ``loop-pe {gen-data,train,eval,bench,verify}``.

Exit codes: 0 success, 1 usage or validation error, 2 runtime failure.
Settings resolve as flag > ``--config`` file (JSON object) > default, and
every command that writes a run directory stores the resolved settings as
``config.json`` there. Run directories are write-once.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .errors import CheckpointError, ContractError, LoopPEError, TrainingDivergence
from .evaluation import EQUIV_TOL, FEAS_TOL, bench, evaluate, export_spectrum, relative_deviation, scenario_suite, write_report
from .gauge import apply, gauge_context, gauge_map, interior_point, scaling_factor
from .net import ModelConfig, init_model
from .problem import Permutation, build_vpp_constraints, check_feasibility, features
from .training import (
    DatasetSpec,
    TrainConfig,
    generate_dataset,
    load_checkpoint,
    random_instance,
    read_dataset,
    save_checkpoint,
    train,
    write_dataset,
)

log = logging.getLogger("loop_pe")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    """Bad flags, bad config file, missing inputs or an occupied output directory."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _bool(text) -> bool:
    if isinstance(text, bool):
        return text
    low = str(text).lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


# name -> (type, default, help); None default with required=True means mandatory
_GEN = {
    "agents": (int, 20, "size of the agent pool"),
    "samples": (int, 400, "total number of samples"),
    "test": (int, 100, "samples held out for testing"),
    "seed": (int, 0, "random seed"),
    "subset_min": (int, 10, "smallest active subset"),
    "subset_max": (int, 20, "largest active subset"),
    "capacity_min": (float, 10.0, "capacity range lower end [kW]"),
    "capacity_max": (float, 25.0, "capacity range upper end [kW]"),
    "demand_min": (float, 5.0, "demand range lower end [kW]"),
    "demand_max": (float, 20.0, "demand range upper end [kW]"),
    "p_omax": (float, 100.0, "net-output limit [kW]"),
    "fluctuation": (float, 0.10, "relative per-sample perturbation"),
}
_TRAIN = {
    "data": (str, None, "dataset directory (uses train.jsonl) or dataset file"),
    "loss_mode": (str, "objective", "objective or imitation"),
    "epochs": (int, 500, "passes over the training set"),
    "lr": (float, 1e-3, "Adam learning rate"),
    "batch_size": (int, 32, "samples per update"),
    "beta1": (float, 0.9, "Adam first-moment decay"),
    "beta2": (float, 0.999, "Adam second-moment decay"),
    "epsilon": (float, 1e-8, "Adam denominator offset"),
    "seed": (int, 0, "seed for initialization and shuffling"),
    "d_e": (int, 64, "embedding width"),
    "d_k": (int, 64, "query/key width"),
    "d_v_attn": (int, 64, "attention value width"),
    "embed_depth": (int, 2, "embedding layers"),
    "head_depth": (int, 2, "head layers"),
    "activation": (str, "relu", "relu or tanh"),
    "attn_layers": (int, 1, "stacked attention layers"),
    "head_residual": (_bool, True, "feed the embedding row into the head"),
}
_EVAL = {
    "model": (str, None, "checkpoint file"),
    "data": (str, None, "dataset directory (uses test.jsonl) or dataset file"),
    "timing": (_bool, True, "also time both methods (timing.csv, timing_summary.json)"),
}
_BENCH = {
    "model": (str, None, "checkpoint file"),
    "data": (str, None, "dataset directory (uses test.jsonl) or dataset file"),
}
_VERIFY = {
    "model": (str, "", "checkpoint file (default: untrained default model)"),
    "data": (str, "", "dataset directory or file (default: synthetic instances only)"),
    "permutations": (int, 100, "random (instance, permutation) pairs"),
    "stress": (int, 1000, "random (instance, v) gauge-map stress pairs"),
    "max_agents": (int, 30, "largest synthetic instance"),
    "seed": (int, 0, "random seed"),
}

COMMANDS = {
    "gen-data": (_GEN, True, "generate labelled train/test datasets"),
    "train": (_TRAIN, True, "train a model and write a checkpoint"),
    "eval": (_EVAL, True, "gap/feasibility report, timings and spectrum"),
    "bench": (_BENCH, False, "timing table for the network and the exact solver"),
    "verify": (_VERIFY, False, "equivariance, feasibility and scenario checks"),
}
_REQUIRED = {"train": ("data",), "eval": ("model", "data"), "bench": ("model", "data")}


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="loop-pe", description="Permutation-equivariant neural dispatch with a gauge feasibility layer.")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    for name, (params, needs_out, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.add_argument("--config", help="JSON file of settings (flags take precedence)")
        p.add_argument("--out", required=needs_out, help="output directory (must be new or empty)")
        p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
        p.add_argument("--threads", type=int, help="worker threads (default: LOOP_PE_THREADS or CPU count)")
        for key, (typ, default, h) in params.items():
            flag = "--" + key.replace("_", "-")
            p.add_argument(flag, dest=key, type=typ, default=None, help=f"{h} (default: {default})")
    return parser


def resolve(command: str, args: argparse.Namespace) -> dict:
    """Merge flags over the config file over defaults; type-check file values."""
    params = COMMANDS[command][0]
    from_file = {}
    if args.config:
        try:
            from_file = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config file {args.config}: {exc}") from exc
        if not isinstance(from_file, dict):
            raise UsageError("config file must hold a JSON object")
        from_file = {k: v for k, v in from_file.items() if k != "command"}
        unknown = set(from_file) - set(params)
        if unknown:
            raise UsageError(f"unknown settings for {command}: {sorted(unknown)}")
    resolved = {}
    for key, (typ, default, _) in params.items():
        value = getattr(args, key)
        if value is None and key in from_file:
            try:
                value = typ(from_file[key])
            except (TypeError, ValueError) as exc:
                raise UsageError(f"config value {key}={from_file[key]!r}: {exc}") from exc
        resolved[key] = default if value is None else value
    for key in _REQUIRED.get(command, ()):
        if not resolved[key]:
            raise UsageError(f"{command} needs --{key.replace('_', '-')}")
    return resolved


def _threads(args) -> int:
    if args.threads is not None:
        n = args.threads
    elif os.environ.get("LOOP_PE_THREADS"):
        try:
            n = int(os.environ["LOOP_PE_THREADS"])
        except ValueError as exc:
            raise UsageError(f"LOOP_PE_THREADS must be an integer: {exc}") from exc
    else:
        n = os.cpu_count() or 1
    if n < 1:
        raise UsageError("thread count must be >= 1")
    return n


def _fresh_dir(path: str) -> Path:
    out = Path(path)
    if out.exists() and (not out.is_dir() or any(out.iterdir())):
        raise UsageError(f"output directory {out} already exists and is not empty")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_config(out: Path, command: str, resolved: dict) -> None:
    doc = {"command": command, **resolved}
    (out / "config.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _dataset_file(path: str, default_name: str) -> Path:
    p = Path(path)
    if p.is_dir():
        p = p / default_name
    if not p.is_file():
        raise UsageError(f"dataset not found: {p}")
    return p


def _load_samples(path: str, default_name: str):
    p = _dataset_file(path, default_name)
    try:
        samples = read_dataset(p)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    if not samples:
        raise UsageError(f"dataset {p} is empty")
    return samples


def _load_model(path: str):
    if not Path(path).is_file():
        raise UsageError(f"checkpoint not found: {path}")
    try:
        return load_checkpoint(path)
    except CheckpointError as exc:
        raise UsageError(str(exc)) from exc


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(args, cfg: dict) -> int:
    try:
        spec = DatasetSpec(
            n_agents_total=cfg["agents"], n_samples=cfg["samples"], n_test=cfg["test"],
            capacity_range=(cfg["capacity_min"], cfg["capacity_max"]),
            demand_range=(cfg["demand_min"], cfg["demand_max"]),
            p_omax=cfg["p_omax"], fluctuation=cfg["fluctuation"],
            subset_min=cfg["subset_min"], subset_max=cfg["subset_max"], seed=cfg["seed"],
        )
    except ContractError as exc:
        raise UsageError(f"invalid dataset spec: {exc}") from exc
    out = _fresh_dir(args.out)
    train_set, test_set = generate_dataset(spec, threads=_threads(args))
    write_dataset(out / "train.jsonl", train_set)
    write_dataset(out / "test.jsonl", test_set)
    (out / "dataset_spec.json").write_text(json.dumps(spec.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    _write_config(out, "gen-data", cfg)
    print(f"wrote {len(train_set)} train and {len(test_set)} test samples to {out}")
    return EXIT_OK


def cmd_train(args, cfg: dict) -> int:
    try:
        mcfg = ModelConfig(
            d_e=cfg["d_e"], d_k=cfg["d_k"], d_v_attn=cfg["d_v_attn"], embed_depth=cfg["embed_depth"],
            head_depth=cfg["head_depth"], activation=cfg["activation"], seed=cfg["seed"],
            attn_layers=cfg["attn_layers"], head_residual=cfg["head_residual"],
        )
        tcfg = TrainConfig(
            loss_mode=cfg["loss_mode"], learning_rate=cfg["lr"], beta1=cfg["beta1"], beta2=cfg["beta2"],
            epsilon=cfg["epsilon"], epochs=cfg["epochs"], batch_size=cfg["batch_size"], seed=cfg["seed"],
        )
    except ContractError as exc:
        raise UsageError(f"invalid training settings: {exc}") from exc
    samples = _load_samples(cfg["data"], "train.jsonl")
    out = _fresh_dir(args.out)
    _write_config(out, "train", cfg)

    losses = []

    def on_epoch(epoch: int, value: float) -> None:
        losses.append(value)
        if epoch % 50 == 0 or epoch == tcfg.epochs - 1:
            log.info("epoch %d loss %.6g", epoch, value)

    def write_losses() -> None:
        with open(out / "losses.csv", "w", encoding="utf-8", newline="\n") as fh:
            fh.write("epoch,loss\n")
            for i, v in enumerate(losses):
                fh.write(f"{i},{v!r}\n")

    try:
        model, _ = train(init_model(mcfg), samples, tcfg, on_epoch=on_epoch)
    except TrainingDivergence as exc:
        write_losses()
        diag = {"error": str(exc), "sample_id": exc.sample_id, "epochs_completed": len(losses)}
        (out / "divergence.json").write_text(json.dumps(diag, indent=2) + "\n", encoding="utf-8")
        print(f"training diverged: {exc} (details in {out / 'divergence.json'})", file=sys.stderr)
        return EXIT_RUNTIME
    write_losses()
    save_checkpoint(model, out / "model.json", tcfg)
    final = f"{losses[-1]:.6g}" if losses else "n/a"
    print(f"trained {tcfg.epochs} epochs, final loss {final}; checkpoint {out / 'model.json'}")
    return EXIT_OK


def cmd_eval(args, cfg: dict) -> int:
    model = _load_model(cfg["model"])
    samples = _load_samples(cfg["data"], "test.jsonl")
    out = _fresh_dir(args.out)
    _write_config(out, "eval", cfg)
    report = evaluate(model, samples, timing=cfg["timing"], threads=_threads(args))
    write_report(report, out)
    export_spectrum(model, samples, out)
    s = report.summary
    print(f"optimality gap  avg {s['gap_avg']:.4g}  min {s['gap_min']:.4g}  max {s['gap_max']:.4g}")
    print(f"feasibility gap avg {s['feas_avg']:.4g}  min {s['feas_min']:.4g}  max {s['feas_max']:.4g}")
    if report.timing_summary:
        _print_timing(report.timing_summary)
    return EXIT_OK


def _print_timing(t: dict) -> None:
    print(f"{'time [ms]':<10}{'neural':>12}{'oracle':>12}")
    for stat in ("average", "minimum", "maximum"):
        print(f"{stat:<10}{t['neural'][stat]:>12.4f}{t['oracle'][stat]:>12.4f}")


def cmd_bench(args, cfg: dict) -> int:
    model = _load_model(cfg["model"])
    samples = _load_samples(cfg["data"], "test.jsonl")
    out = _fresh_dir(args.out) if args.out else None
    summary = bench(model, samples)
    _print_timing(summary)
    print(f"median neural time at n={summary['reference_n']}: {summary['reference_neural_median_ms']:.4f} ms")
    if out is not None:
        _write_config(out, "bench", cfg)
        (out / "bench.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return EXIT_OK


def cmd_verify(args, cfg: dict) -> int:
    model = _load_model(cfg["model"]) if cfg["model"] else init_model(ModelConfig())
    rng = np.random.default_rng(cfg["seed"])
    instances = []
    if cfg["data"]:
        instances = [s.instance for s in _load_samples(cfg["data"], "test.jsonl")]
    out = _fresh_dir(args.out) if args.out else None
    tally: dict[str, list[int]] = {}

    def record(name: str, ok: bool) -> None:
        entry = tally.setdefault(name, [0, 0])
        entry[0] += int(ok)
        entry[1] += 1

    for k in range(cfg["permutations"]):
        if instances and k % 2 == 1:
            inst = instances[(k // 2) % len(instances)]
        else:
            inst = random_instance(int(rng.integers(1, cfg["max_agents"] + 1)), rng)
        perm = Permutation.random(inst.n, rng)
        u = apply(model, inst)
        moved_inst = inst.permuted(perm)
        u_moved = apply(model, moved_inst)
        record("equivariance", relative_deviation(u_moved, perm.apply(u)) <= EQUIV_TOL)
        cs = build_vpp_constraints(inst)
        record("feasibility", check_feasibility(cs, inst, u) <= FEAS_TOL)
        X = features(inst)
        ctx = gauge_context(cs, X, interior_point(inst))
        v = rng.normal(size=inst.n) * 10.0 ** rng.uniform(-2, 6)
        c = scaling_factor(cs, ctx, v).c
        moved_cs = build_vpp_constraints(moved_inst)
        moved_ctx = gauge_context(moved_cs, features(moved_inst), interior_point(moved_inst))
        c_moved = scaling_factor(moved_cs, moved_ctx, perm.apply(v)).c
        record("scaling-invariance", abs(c - c_moved) <= 1e-12)

    for _ in range(cfg["stress"]):
        inst = random_instance(int(rng.integers(1, cfg["max_agents"] + 1)), rng)
        cs = build_vpp_constraints(inst)
        ctx = gauge_context(cs, features(inst), interior_point(inst))
        v = rng.normal(size=(inst.n, 1)) * 10.0 ** rng.uniform(-3, 6)
        record("gauge-stress", check_feasibility(cs, inst, gauge_map(cs, ctx, v)) <= FEAS_TOL)

    scenes = (instances[:3] if instances else []) + [random_instance(n, rng) for n in (1, 5, 20)]
    for inst in scenes:
        rec = scenario_suite(model, inst, rng=rng)
        for c in rec.checks:
            record("scenario-" + c.name.split("[")[0], c.passed)
            if not c.passed:
                log.warning("scenario %s failed: %s", c.name, c.detail)

    all_ok = True
    for name, (passed, total) in tally.items():
        ok = passed == total
        all_ok &= ok
        print(f"{'PASS' if ok else 'FAIL'} {name}: {passed}/{total}")
    if out is not None:
        _write_config(out, "verify", cfg)
        doc = {name: {"passed": p, "total": t} for name, (p, t) in tally.items()}
        (out / "verify.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return EXIT_OK if all_ok else EXIT_RUNTIME


HANDLERS = {"gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval, "bench": cmd_bench, "verify": cmd_verify}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("a command is required: " + ", ".join(COMMANDS))
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
        cfg = resolve(args.command, args)
        return HANDLERS[args.command](args, cfg)
    except UsageError as exc:
        print(f"loop-pe: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except LoopPEError as exc:
        print(f"loop-pe: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
