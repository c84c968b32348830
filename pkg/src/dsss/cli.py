"""Command-line entry point: ``dsss {gen,train,eval,ablate,gradcheck,export-maps}``.

Exit codes: 0 success, 2 usage/config error, 3 numeric divergence, 4 gradcheck failure.
"""

from __future__ import annotations

import argparse
import datetime as dt
import hashlib
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__, config, gradcheck, synth, training
from .config import ConfigError, ExperimentConfig
from .objectives import metric_record, write_record

EXIT_OK, EXIT_USAGE, EXIT_DIVERGED, EXIT_GRADCHECK = 0, 2, 3, 4


class UsageError(Exception):
    pass


def _now() -> str:
    return dt.datetime.now(dt.timezone.utc).isoformat(timespec="seconds")


class Runner:
    def __init__(self, args: argparse.Namespace):
        self.args = args
        self.quiet = getattr(args, "quiet", False)
        self.started = _now()
        self.outputs: list[Path] = []

    def say(self, msg: str) -> None:
        if not self.quiet:
            print(msg)

    @property
    def out(self) -> Path:
        out = Path(self.args.out)
        try:
            out.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise UsageError(f"cannot create output directory {out}: {exc}") from None
        return out

    def write(self, path: Path, data: bytes | str) -> Path:
        try:
            if isinstance(data, str):
                path.write_text(data, encoding="utf-8")
            else:
                path.write_bytes(data)
        except OSError as exc:
            raise UsageError(f"cannot write {path}: {exc}") from None
        self.outputs.append(path)
        return path

    def load_config(self) -> ExperimentConfig:
        text = ""
        if self.args.config:
            path = Path(self.args.config)
            if not path.is_file():
                raise UsageError(f"config file not found: {path}")
            text = path.read_text(encoding="utf-8")
        overrides = list(self.args.set or [])
        if getattr(self.args, "seed", None) is not None:
            overrides.append(f"seed={self.args.seed}")
        return config.load(text, overrides)

    def manifest(self, cfg: ExperimentConfig, seeds) -> None:
        cfg_text = cfg.to_text()
        self.write(self.out / "config.txt", cfg_text)
        record = {
            "config_hash": hashlib.sha256(cfg_text.encode("utf-8")).hexdigest(),
            "seeds": list(seeds),
            "tool_version": __version__,
            "started": self.started,
            "finished": _now(),
            "outputs": sorted(str(p) for p in self.outputs) + [str(self.out / "manifest.json")],
        }
        (self.out / "manifest.json").write_text(json.dumps(record, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _load_dataset(path: str, what: str) -> synth.Dataset:
    if not path:
        raise UsageError(f"no {what} dataset path given")
    p = Path(path)
    if not (p / synth.MANIFEST).is_file():
        raise UsageError(f"{what} dataset not found: {p}")
    try:
        return synth.load_dataset(p)
    except (ValueError, OSError) as exc:
        raise UsageError(f"cannot read {what} dataset {p}: {exc}") from None


def _dump_divergence(run: Runner, err: training.DivergenceError) -> None:
    d = err.dump
    np.savez(run.out / "divergence.npz", rgb=d["rgb"], depth=d["depth"], labels=d["labels"])
    meta = {k: d[k] for k in ("step", "ids", "ce", "sa")}
    (run.out / "divergence.json").write_text(json.dumps(meta, default=str, indent=2) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# commands


def cmd_gen(run: Runner) -> int:
    a = run.args
    if a.K < 2:
        raise UsageError("K must be >= 2")
    try:
        spec = synth.domain_by_name(a.domain, a.K)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    size = (a.size, a.size)
    if a.size < 16:
        raise UsageError("size must be >= 16")
    ds = synth.build_dataset(spec, a.K, size, a.count, a.seed if a.seed is not None else 0)
    target = run.out / (a.split or spec.name)
    try:
        synth.write_dataset(ds, target)
    except OSError as exc:
        raise UsageError(f"cannot write dataset to {target}: {exc}") from None
    freq = synth.class_frequencies(ds, a.K)
    run.say(f"{spec.name}: {len(ds)} samples -> {target}")
    run.say("class pixel frequencies: " + " ".join(f"{k}:{f:.3f}" for k, f in enumerate(freq)))
    return EXIT_OK


def cmd_train(run: Runner) -> int:
    cfg = run.load_config()
    source = _load_dataset(cfg.source, "source")
    trail_lines: list[str] = []

    def log(rec):
        trail_lines.append(json.dumps(rec, sort_keys=True))
        run.say(f"step {rec['step']:5d}  loss {rec['loss']:.4f}  lr {rec['lr']:.5f}")

    try:
        result = training.train(cfg, source, on_record=log)
    except training.DivergenceError as err:
        _dump_divergence(run, err)
        print(f"error: {err}; last batch dumped to {run.out}", file=sys.stderr)
        return EXIT_DIVERGED
    run.say(f"parameters: {result.params.count()}")
    run.write(run.out / "checkpoint.bin", training.encode_checkpoint(result.params, cfg))
    run.write(run.out / "trail.jsonl", "\n".join(trail_lines) + "\n")
    run.manifest(cfg, [cfg.seed])
    return EXIT_OK


def cmd_eval(run: Runner) -> int:
    cfg = run.load_config()
    if not cfg.checkpoint or not Path(cfg.checkpoint).is_file():
        raise UsageError(f"checkpoint not found: {cfg.checkpoint or '(unset)'}")
    if not cfg.targets:
        raise UsageError("no target datasets given (targets=...)")
    params, _ = training.read_checkpoint(cfg.checkpoint)
    targets = [_load_dataset(t, "target") for t in cfg.targets]
    lines = []
    import io

    buf = io.StringIO()
    for ds in targets:
        rep = training.evaluate(params, ds, cfg)
        write_record(buf, metric_record(cfg.iterations, ds.domain, rep["confusion"]))
        lines.append(f"{ds.domain}: mIoU {100 * rep['miou']:.2f}")
    run.write(run.out / "metrics.jsonl", buf.getvalue())
    for line in lines:
        run.say(line)
    run.manifest(cfg, [cfg.seed])
    return EXIT_OK


def cmd_ablate(run: Runner) -> int:
    cfg = run.load_config()
    source = _load_dataset(cfg.source, "source")
    if not cfg.targets:
        raise UsageError("no target datasets given (targets=...)")
    targets = [_load_dataset(t, "target") for t in cfg.targets]

    def progress(cell):
        run.say(f"group {cell.group} seed {cell.seed}: " + " ".join(f"{d} {100 * v:.2f}" for d, v in cell.miou.items()))

    try:
        table = training.ablate(cfg, source, targets, on_cell=progress)
    except training.DivergenceError as err:
        _dump_divergence(run, err)
        print(f"error: {err}", file=sys.stderr)
        return EXIT_DIVERGED
    cells_dir = run.out / "cells"
    cells_dir.mkdir(exist_ok=True)
    for cell in table.cells:
        run.write(cells_dir / f"{cell.group}_seed{cell.seed}.bin", cell.checkpoint)
    run.write(run.out / "ablation.csv", table.to_csv())
    run.say(table.to_csv().rstrip())
    run.manifest(cfg, cfg.seeds)
    return EXIT_OK


def cmd_gradcheck(run: Runner) -> int:
    a = run.args
    seed = a.seed if a.seed is not None else 0
    sizes = [int(s) for s in str(a.sizes).split(",") if s.strip()]
    failed = []
    for line in gradcheck.check_composite(seed):
        status = "ok" if line.ok else "FAIL"
        run.say(f"composite {line.name:<18} max rel err {line.error:.3e}  {status}")
        if not line.ok:
            failed.append(f"composite:{line.name}")
    for size in sizes:
        for line in gradcheck.check_model(seed, size=size, inject_fault=a.inject_fault):
            status = "ok" if line.ok else "FAIL"
            run.say(f"model[{size}x{size}] {line.name:<15} max rel err {line.error:.3e}  {status}")
            if not line.ok:
                failed.append(f"model[{size}]:{line.name}")
    if failed:
        print("gradcheck failed: " + ", ".join(failed), file=sys.stderr)
        return EXIT_GRADCHECK
    return EXIT_OK


def cmd_export(run: Runner) -> int:
    cfg = run.load_config()
    if not cfg.checkpoint or not Path(cfg.checkpoint).is_file():
        raise UsageError(f"checkpoint not found: {cfg.checkpoint or '(unset)'}")
    params, _ = training.read_checkpoint(cfg.checkpoint)
    a = run.args
    try:
        sample = synth.read_sample(a.dataset, a.id)
    except (OSError, ValueError) as exc:
        raise UsageError(f"cannot read sample {a.id} from {a.dataset}: {exc}") from None
    try:
        paths = training.export_sensitivity(params, sample, run.out, cfg, seed=cfg.seed)
    except training.ConfigurationError as exc:
        raise UsageError(str(exc)) from None
    run.outputs.extend(paths)
    for p in paths:
        run.say(f"wrote {p}")
    return EXIT_OK


COMMANDS = {
    "gen": cmd_gen,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "gradcheck": cmd_gradcheck,
    "export-maps": cmd_export,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key=value config file")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key (repeatable)")
    common.add_argument("--seed", type=int, help="root seed")
    common.add_argument("--out", default="out", help="output directory")
    common.add_argument("--quiet", action="store_true")

    parser = argparse.ArgumentParser(prog="dsss", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen", parents=[common], help="render a synthetic RGB-D split")
    gen.add_argument("--domain", default="source", help=f"one of {sorted(synth.DOMAINS)}")
    gen.add_argument("--count", type=int, default=10)
    gen.add_argument("--size", type=int, default=64)
    gen.add_argument("--K", "-K", type=int, default=6, dest="K")
    gen.add_argument("--split", help="subdirectory name (default: domain name)")

    for name in ("train", "eval", "ablate"):
        sub.add_parser(name, parents=[common])

    gc = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient audit")
    gc.add_argument("--sizes", default="8", help="comma-separated image sizes for the model check")
    gc.add_argument("--inject-fault", action="store_true", help=argparse.SUPPRESS)

    ex = sub.add_parser("export-maps", parents=[common], help="write S_g, N_g and prediction maps")
    ex.add_argument("--dataset", required=True, help="dataset split directory")
    ex.add_argument("--id", required=True, help="sample id")
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    run = Runner(args)
    try:
        return COMMANDS[args.command](run)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


def main_exit() -> None:
    sys.exit(main())


if __name__ == "__main__":
    main_exit()
