"""Command-line entry point: ``mkgc {generate,train,eval,verify,inspect}``.

Exit status: 0 success, 1 I/O error, 2 usage error, 3 invariant or
verification failure.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
import time
from dataclasses import fields, replace
from pathlib import Path

from . import autograd as ag
from .data import generate_synthetic, sample_k_shot
from .encoders import ABLATIONS, ModelConfig
from .errors import InputError, MKGError, NumericError, ParseError, ShapeError, StateError
from .m_encoder import format_trace
from .metrics import MetricsReport, average_reports
from .training import (
    TrainConfig, build_model, evaluate, iterate_batches, load_checkpoint, load_task_data, run_training,
    save_checkpoint,
)
from .verify import SUITES, run_suites

log = logging.getLogger("mkgc")

EXIT_OK, EXIT_IO, EXIT_USAGE, EXIT_INVARIANT = 0, 1, 2, 3
OUTPUT_ENV = "MKG_OUTPUT_DIR"
MANIFEST_NAME = "manifest.cfg"
REPORT_NAME = "report.txt"
CHECKPOINT_NAME = "model.mkgc"
SWEEP_NAME = "sweep.tsv"

MODEL_KEYS = {f.name: f.type for f in fields(ModelConfig)}
TRAIN_KEYS = {f.name: f.type for f in fields(TrainConfig)}
SWEEP_KEYS = ("lm_layers", "ablate")
# run metadata echoed into manifests; ignored when a manifest is read back as a config
META_KEYS = ("command", "timestamp", "output_dir", "input_paths", "seed_list")

# per-task settings written next to generated data; small batches are what make the toy sets overfit quickly
TOY_SETTINGS = {
    "link": {"epochs": 300, "entity_epochs": 50, "batch_size": 8, "lr": 2e-3, "eval_split": "train"},
    "re": {"epochs": 100, "batch_size": 8, "lr": 2e-3, "eval_split": "train"},
    "ner": {"epochs": 100, "batch_size": 8, "lr": 2e-3, "eval_split": "train"},
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# ---------------------------------------------------------------------------
# config files


def read_config(path) -> dict[str, str]:
    """Flat ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    text = Path(path).read_text(encoding="utf-8")
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep or not key.strip():
            raise ParseError(f"expected 'key = value', got {raw!r}", line=lineno, path=str(path))
        out[key.strip()] = value.strip()
    return out


def write_config(path, values: dict) -> None:
    lines = [f"{k} = {_to_text(v)}" for k, v in values.items()]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def _to_text(v) -> str:
    if isinstance(v, (list, tuple)):
        return ",".join(str(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _coerce(key: str, value: str, kind):
    kind = kind if isinstance(kind, str) else getattr(kind, "__name__", str(kind))
    try:
        if kind == "bool":
            if value.lower() in ("1", "true", "yes", "on"):
                return True
            if value.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(value)
        if kind == "int":
            return int(value)
        if kind == "float":
            return float(value)
    except ValueError:
        raise UsageError(f"config key {key!r}: cannot read {value!r} as {kind}") from None
    return value


def resolve(values: dict[str, str]) -> tuple[ModelConfig, TrainConfig, dict]:
    """Split raw config values into model, training and sweep settings."""
    model_kw, train_kw, sweep = {}, {}, {}
    for key, value in values.items():
        if key in META_KEYS:
            continue
        if key in MODEL_KEYS:
            model_kw[key] = _coerce(key, value, MODEL_KEYS[key])
        elif key in TRAIN_KEYS:
            train_kw[key] = _coerce(key, value, TRAIN_KEYS[key])
        elif key in SWEEP_KEYS:
            sweep[key] = [v.strip() for v in value.split(",") if v.strip()]
        else:
            raise UsageError(f"unknown config key {key!r}")
    try:
        mcfg = ModelConfig(**model_kw)
        tcfg = TrainConfig(**train_kw)
    except (ShapeError, InputError) as exc:
        raise UsageError(str(exc)) from None
    return mcfg, tcfg, sweep


def _apply_ablation(mcfg: ModelConfig, name: str) -> ModelConfig:
    flags = {a: False for a in ABLATIONS}
    if name not in ("none", "full"):
        if name not in ABLATIONS:
            raise UsageError(f"unknown ablation {name!r}; choose from none, {', '.join(ABLATIONS)}")
        flags[name] = True
    return replace(mcfg, **flags)


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="mkgc", description="Hybrid text/vision transformer for multimodal KG tasks.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp):
        sp.add_argument("--task", choices=("link", "re", "ner"))
        sp.add_argument("--config", help="flat key = value file")
        sp.add_argument("--data", help="dataset directory (overrides data_dir)")
        sp.add_argument("--out", help=f"output directory (default ${OUTPUT_ENV} or ./runs)")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override any config key")

    g = sub.add_parser("generate", help="write a synthetic dataset and a matching config")
    g.add_argument("--task", choices=("link", "re", "ner"), required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--n-test", type=int, default=0, help="held-out items for a test split")

    t = sub.add_parser("train", help="train and report")
    common(t)
    t.add_argument("--epochs", type=int)
    t.add_argument("--k-shot", type=int)
    t.add_argument("--seeds", type=int)
    t.add_argument("--lm-layers", type=int, nargs="+", metavar="L", help="sweep the number of fused layers")
    t.add_argument("--ablate", nargs="+", metavar="VARIANT",
                   help=f"sweep variants among none, {', '.join(ABLATIONS)}")

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    common(e)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--split")

    v = sub.add_parser("verify", help="run the property suites")
    v.add_argument("--only", nargs="+", metavar="SUITE", help=f"subset of: {', '.join(SUITES)}")
    v.add_argument("--seed", type=int, default=0)
    v.add_argument("--mutate", action="store_true", help="corrupt the W_3 gradient path (negative control)")

    i = sub.add_parser("inspect", help="dump fused-layer internals for one example")
    common(i)
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--trace", action="store_true", required=True)
    i.add_argument("--example", type=int, default=0)
    i.add_argument("--split")
    return p


def _gather_values(args) -> dict[str, str]:
    values = read_config(args.config) if args.config else {}
    overrides = {}
    if getattr(args, "task", None):
        overrides["task"] = args.task
    if getattr(args, "data", None):
        overrides["data_dir"] = args.data
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = str(args.seed)
    for name in ("epochs", "k_shot", "seeds"):
        if getattr(args, name, None) is not None:
            overrides[name] = str(getattr(args, name))
    if getattr(args, "lm_layers", None):
        overrides["lm_layers"] = ",".join(str(x) for x in args.lm_layers)
    if getattr(args, "ablate", None):
        overrides["ablate"] = ",".join(args.ablate)
    for item in getattr(args, "set", []):
        key, sep, value = item.partition("=")
        if not sep:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        overrides[key.strip()] = value.strip()
    values.update(overrides)
    return values


def _output_dir(args) -> Path:
    out = Path(args.out or os.environ.get(OUTPUT_ENV) or "runs")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_manifest(out: Path, command: str, mcfg: ModelConfig, tcfg: TrainConfig, sweep: dict,
                    seeds: list[int], inputs: list[str]) -> None:
    values = {
        "command": command,
        "timestamp": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
        "output_dir": str(out.resolve()),
        "input_paths": ",".join(inputs),
        "seed_list": ",".join(str(s) for s in seeds),
        **mcfg.as_dict(),
        **tcfg.as_dict(),
    }
    for key in SWEEP_KEYS:
        if sweep.get(key):
            values[key] = sweep[key]
    write_config(out / MANIFEST_NAME, values)


# ---------------------------------------------------------------------------
# commands


def cmd_generate(args) -> int:
    out = Path(args.out)
    path = generate_synthetic(args.task, out, seed=args.seed, n_test=args.n_test)
    cfg = {"task": args.task, "data_dir": str(Path(path).resolve()), "seed": 0, **TOY_SETTINGS[args.task]}
    if args.n_test:
        cfg["eval_split"] = "test"
    write_config(out / "toy.cfg", cfg)
    print(f"wrote {args.task} data and toy.cfg to {out}")
    return EXIT_OK


def _seed_list(tcfg: TrainConfig) -> list[int]:
    return [tcfg.seed + i for i in range(max(1, tcfg.seeds))]


def _k_shot_subset(data, tcfg: TrainConfig, seed: int):
    if not tcfg.k_shot:
        return None
    if tcfg.task == "link":
        return sample_k_shot(data.store.triples("train"), tcfg.k_shot, seed, key=lambda tr: tr[1])
    return sample_k_shot(data.splits["train"], tcfg.k_shot, seed)


def _train_once(data, mcfg: ModelConfig, tcfg: TrainConfig, out: Path) -> MetricsReport:
    """One configuration, possibly several sampling seeds, averaged into one report."""
    seeds = _seed_list(tcfg)
    reports = []
    for seed in seeds:
        run_dir = out / f"seed{seed}" if len(seeds) > 1 else out
        run_dir.mkdir(parents=True, exist_ok=True)
        result = run_training(data, mcfg, tcfg, seed=seed, subset=_k_shot_subset(data, tcfg, seed))
        if result.frozen_intact is False:
            raise StateError("entity-modeling phase changed a frozen parameter")
        save_checkpoint(run_dir / CHECKPOINT_NAME, result.model)
        result.report.meta["seed"] = seed
        result.report.meta["epochs_run"] = len(result.history)
        (run_dir / REPORT_NAME).write_text(result.report.to_text(), encoding="utf-8")
        reports.append(result.report)
        log.info("seed %d: %s", seed, result.report.to_text().replace("\n", " "))
    report = reports[0] if len(reports) == 1 else average_reports(reports)
    if len(reports) > 1:
        (out / REPORT_NAME).write_text(report.to_text(), encoding="utf-8")
    return report


def _sweep_plan(mcfg: ModelConfig, sweep: dict) -> list[tuple[str, str, ModelConfig]]:
    plan = []
    if sweep.get("lm_layers"):
        for v in sweep["lm_layers"]:
            try:
                layers = int(v)
            except ValueError:
                raise UsageError(f"--lm-layers expects integers, got {v!r}") from None
            if layers < 1:
                raise UsageError("--lm-layers values must be >= 1")
            plan.append(("lm_layers", str(layers), replace(mcfg, n_fusion_layers=layers)))
    if sweep.get("ablate"):
        for v in sweep["ablate"]:
            plan.append(("ablate", v, _apply_ablation(mcfg, v)))
    return plan


def _write_sweep(path: Path, rows: list[tuple[str, str, MetricsReport]]) -> None:
    cols = rows[0][2].tsv_columns()
    lines = ["\t".join(["variable", "value", *cols, "count"])]
    for var, val, rep in rows:
        lines.append("\t".join([var, val, *(repr(float(getattr(rep, c))) for c in cols), str(rep.count)]))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def cmd_train(args) -> int:
    mcfg, tcfg, sweep = resolve(_gather_values(args))
    if not tcfg.data_dir:
        raise UsageError("no dataset: pass --data or set data_dir in the config")
    out = _output_dir(args)
    _write_manifest(out, "train", mcfg, tcfg, sweep, _seed_list(tcfg), [tcfg.data_dir])
    plan = _sweep_plan(mcfg, sweep)
    if not plan:
        data = load_task_data(tcfg.task, tcfg.data_dir, mcfg, tcfg)
        report = _train_once(data, mcfg, tcfg, out)
        print(report.to_text(), end="")
        return EXIT_OK
    data = load_task_data(tcfg.task, tcfg.data_dir, mcfg, tcfg)
    rows = []
    for var, val, cfg in plan:
        sub = out / f"{var}-{val}"
        sub.mkdir(parents=True, exist_ok=True)
        report = _train_once(data, cfg, tcfg, sub)
        rows.append((var, val, report))
        _write_sweep(out / SWEEP_NAME, rows)
        print(f"{var}={val} " + " ".join(f"{c}={getattr(report, c):.4f}" for c in report.tsv_columns()))
    print(f"wrote {out / SWEEP_NAME}")
    return EXIT_OK


def _load_model(args):
    mcfg, tcfg, _ = resolve(_gather_values(args))
    if not tcfg.data_dir:
        raise UsageError("no dataset: pass --data or set data_dir in the config")
    data = load_task_data(tcfg.task, tcfg.data_dir, mcfg, tcfg)
    model = build_model(tcfg.task, data, mcfg, tcfg.seed)
    try:
        model.load_state_dict(load_checkpoint(args.checkpoint))
    except (KeyError, ValueError) as exc:
        raise ParseError(f"checkpoint does not match the configured model: {exc}", path=args.checkpoint) from None
    return model, data, mcfg, tcfg


def cmd_eval(args) -> int:
    model, data, mcfg, tcfg = _load_model(args)
    out = _output_dir(args)
    _write_manifest(out, "eval", mcfg, tcfg, {}, [tcfg.seed], [tcfg.data_dir, str(args.checkpoint)])
    report = evaluate(model, data, mcfg, tcfg, args.split)
    (out / REPORT_NAME).write_text(report.to_text(), encoding="utf-8")
    print(report.to_text(), end="")
    return EXIT_OK


def cmd_inspect(args) -> int:
    model, data, mcfg, tcfg = _load_model(args)
    split = args.split or tcfg.eval_split
    if tcfg.task == "link":
        examples = data.query_examples(mcfg, split, train_targets=False)
    else:
        examples = data.examples(split, mcfg)
    if not 0 <= args.example < len(examples):
        raise UsageError(f"--example must be in [0, {len(examples)})")
    batch = next(iterate_batches([examples[args.example]], 1))
    with ag.no_grad():
        _, _, trace = model.encode(batch.token_ids[0], batch.images[0], batch.pad_mask[0], trace=True)
    print(format_trace(trace), end="")
    return EXIT_OK


def cmd_verify(args) -> int:
    only = None
    if args.only:
        only = [name for item in args.only for name in item.split(",") if name]
        unknown = [n for n in only if n not in SUITES]
        if unknown:
            raise UsageError(f"unknown suite(s): {', '.join(unknown)}")
    results = run_suites(only, seed=args.seed, mutate=args.mutate)
    for r in results:
        print(r.line())
    failed = [r.name for r in results if not r.passed]
    if failed:
        print(f"failed: {', '.join(failed)}")
        return EXIT_INVARIANT
    return EXIT_OK


COMMANDS = {"generate": cmd_generate, "train": cmd_train, "eval": cmd_eval, "verify": cmd_verify,
            "inspect": cmd_inspect}


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"mkgc: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"mkgc: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, ParseError) as exc:
        print(f"mkgc: {exc}", file=sys.stderr)
        return EXIT_IO
    except (StateError, NumericError) as exc:
        print(f"mkgc: invariant failure: {exc}", file=sys.stderr)
        return EXIT_INVARIANT
    except MKGError as exc:
        print(f"mkgc: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
