"""``firereg`` command line: synth, train, register, eval, bench, config.

Exit codes are 0 on success, 2 for usage or input errors and 3 for
numerical failures.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, field, fields
from importlib import resources
from pathlib import Path

from .data import (
    PerturbationSpec,
    Volume,
    VolumeFormatError,
    load_dataset,
    load_volume,
    perturbed_pairs,
    save_volume,
    write_dataset,
)
from .evaluation import bench, evaluate
from .model import ModelConfig, register
from .tensor import ShapeError
from .trainer import CheckpointError, NonFiniteLossError, TrainConfig, load_checkpoint, train
from .warp import compose, identity_grid

log = logging.getLogger("firereg")

RUN_CONFIG_VERSION = 1
EXIT_OK, EXIT_INPUT, EXIT_NUMERIC = 0, 2, 3


class UsageError(Exception):
    """Bad flags, config or input files; maps to exit code 2."""


# -- run configuration --------------------------------------------------------------
def _train_fields() -> list[str]:
    return [f.name for f in fields(TrainConfig) if f.name != "model"]


def _section(doc: dict, name: str, allowed: list[str]) -> dict:
    part = doc.get(name, {})
    if not isinstance(part, dict):
        raise UsageError(f"config section {name!r} must be an object")
    unknown = sorted(set(part) - set(allowed))
    if unknown:
        raise UsageError(f"unknown config key {name}.{unknown[0]}")
    return part


@dataclass
class RunConfig:
    """Training, model and perturbation settings as one versioned document."""

    train: TrainConfig = field(default_factory=TrainConfig)
    perturbation: PerturbationSpec = field(default_factory=PerturbationSpec)

    @property
    def model(self) -> ModelConfig:
        return self.train.model

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        if not isinstance(doc, dict):
            raise UsageError("config must be a JSON object")
        unknown = sorted(set(doc) - {"version", "train", "model", "perturbation"})
        if unknown:
            raise UsageError(f"unknown config key {unknown[0]}")
        if doc.get("version") != RUN_CONFIG_VERSION:
            raise UsageError(f"config version {doc.get('version')!r} is not supported (expected {RUN_CONFIG_VERSION})")
        tr = _section(doc, "train", _train_fields())
        md = _section(doc, "model", [f.name for f in fields(ModelConfig)])
        pt = dict(_section(doc, "perturbation", [f.name for f in fields(PerturbationSpec)]))
        if "strength" in pt:
            pt["strength"] = tuple(pt["strength"])
        try:
            return cls(TrainConfig(**tr, model=ModelConfig(**md)), PerturbationSpec(**pt))
        except (TypeError, ValueError) as exc:
            raise UsageError(f"invalid config: {exc}") from exc

    def to_dict(self) -> dict:
        tr = {k: v for k, v in asdict(self.train).items() if k != "model"}
        pt = asdict(self.perturbation)
        pt["strength"] = list(pt["strength"])
        return {"version": RUN_CONFIG_VERSION, "train": tr, "model": asdict(self.model), "perturbation": pt}


def default_config_text() -> str:
    return resources.files("firereg").joinpath("default_config.json").read_text()


def load_run_config(path: str | None) -> RunConfig:
    if path is None:
        return RunConfig.from_dict(json.loads(default_config_text()))
    try:
        doc = json.loads(Path(path).read_text())
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise UsageError(f"config {path} is not valid JSON: {exc}") from exc
    return RunConfig.from_dict(doc)


def apply_overrides(cfg: RunConfig, args) -> RunConfig:
    """Flags win over the config file."""
    doc = cfg.to_dict()
    for key in ("iters", "lr_taf", "lr_tnr", "lr_gf", "seed", "checkpoint_every"):
        value = getattr(args, key, None)
        if value is not None:
            doc["train"][key] = value
    for key in ("base_channels", "resnet_blocks"):
        value = getattr(args, key, None)
        if value is not None:
            doc["model"][key] = value
    return RunConfig.from_dict(doc)


def worker_count(requested: int) -> int:
    cap = os.environ.get("FIRE_THREADS")
    if cap is None:
        return max(1, requested)
    try:
        limit = int(cap)
    except ValueError:
        raise UsageError(f"FIRE_THREADS must be an integer, got {cap!r}") from None
    return max(1, min(requested, limit))


def _report_paths(stem: str) -> tuple[Path, Path]:
    p = Path(stem)
    if p.suffix in (".csv", ".txt"):
        p = p.with_suffix("")
    return p.with_name(p.name + ".csv"), p.with_name(p.name + ".txt")


def _write_report(stem: str, csv_text: str, text: str) -> tuple[Path, Path]:
    csv_path, txt_path = _report_paths(stem)
    try:
        csv_path.parent.mkdir(parents=True, exist_ok=True)
        csv_path.write_text(csv_text)
        txt_path.write_text(text + "\n")
    except OSError as exc:
        raise UsageError(f"cannot write report {csv_path}: {exc}") from exc
    return csv_path, txt_path


# -- commands -----------------------------------------------------------------------
def cmd_synth(args) -> int:
    try:
        path = write_dataset(args.out, args.count, args.dim, args.size, args.seed)
    except OSError as exc:
        raise UsageError(f"cannot write dataset to {args.out}: {exc}") from exc
    print(path)
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = apply_overrides(load_run_config(args.config), args)
    cases = load_dataset(args.data)
    if cases[0][0].dim != cfg.model.dim:
        raise UsageError(f"dataset is {cases[0][0].dim}D but the model config is {cfg.model.dim}D")
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        (out / "run_config.json").write_text(json.dumps(cfg.to_dict(), indent=1))
    except OSError as exc:
        raise UsageError(f"cannot write to {out}: {exc}") from exc
    pairs = perturbed_pairs(cases, cfg.perturbation)
    train(pairs, cfg.train, out, resume_from=args.resume)
    print(out / "model.ckpt.json")
    return EXIT_OK


def cmd_register(args) -> int:
    model = load_checkpoint(args.ckpt)
    moving, fixed = load_volume(args.moving), load_volume(args.fixed)
    if moving.shape != fixed.shape:
        raise UsageError(f"moving {moving.shape} and fixed {fixed.shape} differ in shape")
    if moving.dim != model.config.dim:
        raise UsageError(f"volumes are {moving.dim}D but the checkpoint is {model.config.dim}D")
    affine, field_, warped = register(moving, fixed, model, args.direction)
    save_volume(warped, args.out)
    if args.field:
        grid = compose(affine, field_, moving.shape).data
        disp = grid - identity_grid(moving.shape, grid.dtype).data
        save_volume(Volume(disp, fixed.spacing), args.field)
    print(args.out)
    return EXIT_OK


def _perturbation(args) -> PerturbationSpec:
    return load_run_config(args.config).perturbation if args.config else PerturbationSpec()


def cmd_eval(args) -> int:
    model = load_checkpoint(args.ckpt)
    cases = load_dataset(args.data)
    report = evaluate(model, cases, args.repeat, _perturbation(args), args.seed, worker_count(args.workers))
    paths = _write_report(args.report, report.to_csv(), report.summary())
    print(report.summary())
    log.info("wrote %s and %s", *paths)
    return EXIT_OK


def cmd_bench(args) -> int:
    model = load_checkpoint(args.ckpt)
    cases = load_dataset(args.data)
    if args.cases:
        cases = cases[: args.cases]
    table = bench(model, cases, runs=args.runs)
    _write_report(args.report, table.to_csv(), table.text())
    print(table.text())
    return EXIT_OK


def cmd_config(args) -> int:
    sys.stdout.write(default_config_text())
    return EXIT_OK


# -- parser -------------------------------------------------------------------------
class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INPUT, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="firereg", description="Unsupervised multi-modal image registration on numpy.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="write a synthetic phantom dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--count", type=int, default=10)
    s.add_argument("--dim", type=int, choices=(2, 3), default=2)
    s.add_argument("--size", type=int, default=64)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="train a model on a dataset",
                       description="Train with a run config; flags override config values.")
    t.add_argument("--config", help="run config JSON (default: the shipped config, see 'firereg config')")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--resume", help="checkpoint to continue from")
    t.add_argument("--iters", type=int)
    t.add_argument("--lr-taf", dest="lr_taf", type=float)
    t.add_argument("--lr-tnr", dest="lr_tnr", type=float)
    t.add_argument("--lr-gf", dest="lr_gf", type=float)
    t.add_argument("--seed", type=int)
    t.add_argument("--checkpoint-every", dest="checkpoint_every", type=int)
    t.add_argument("--base-channels", dest="base_channels", type=int)
    t.add_argument("--resnet-blocks", dest="resnet_blocks", type=int)
    t.set_defaults(func=cmd_train)

    r = sub.add_parser("register", help="warp a moving volume onto a fixed one")
    r.add_argument("--ckpt", required=True)
    r.add_argument("--moving", required=True)
    r.add_argument("--fixed", required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--field", help="also write the displacement field (one channel per axis)")
    r.add_argument("--direction", choices=("ab", "ba"), default="ab")
    r.set_defaults(func=cmd_register)

    for name, func, helptext in (("eval", cmd_eval, "Dice, inverse consistency and folding report"),
                                 ("bench", cmd_bench, "registration timing report")):
        e = sub.add_parser(name, help=helptext)
        e.add_argument("--ckpt", required=True)
        e.add_argument("--data", required=True)
        e.add_argument("--report", required=True, help="output stem; writes <stem>.csv and <stem>.txt")
        if name == "eval":
            e.add_argument("--repeat", type=int, default=20, help="random perturbations per case")
            e.add_argument("--config", help="run config whose perturbation section is used")
            e.add_argument("--seed", type=int, default=0)
            e.add_argument("--workers", type=int, default=1, help="threads over cases (capped by FIRE_THREADS)")
        else:
            e.add_argument("--runs", type=int, default=5, help="passes over the cases")
            e.add_argument("--cases", type=int, default=0, help="use only the first N cases")
        e.set_defaults(func=func)

    c = sub.add_parser("config", help="print the shipped default run config")
    c.set_defaults(func=cmd_config)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except NonFiniteLossError as exc:
        print(f"firereg: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except FloatingPointError as exc:
        print(f"firereg: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (UsageError, VolumeFormatError, CheckpointError, ShapeError, ValueError, OSError) as exc:
        print(f"firereg: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
