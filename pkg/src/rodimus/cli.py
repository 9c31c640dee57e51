"""Command-line interface.

    rodimus train     --config cfg.json [--set model.d 256 ...] [--resume ckpt]
    rodimus eval      --ckpt last.ckpt --config cfg.json
    rodimus generate  --ckpt last.ckpt --prompt "hello" --steps 64
    rodimus mqar-gen  --count 8 [--out data.jsonl]
    rodimus check     equivalence|gradcheck|selection|ska|memory|all
    rodimus mem-report --context-len 1024

Configuration is a single JSON file with "model" and "train" sections
(fields of ModelConfig / TrainConfig; "train.mqar" holds MqarConfig fields),
overridable per-invocation with repeated `--set dotted.key value`.  The env
var RODIMUS_DETERMINISTIC=0 opts out of bitwise-deterministic matmuls.

Exit codes: 0 ok; 1 property violation or integrity failure; 2 config error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys

import numpy as np

from .checkpoint import load_model
from .data import MqarConfig, mqar_generate
from .errors import ConfigError, DataError, IntegrityError, RodimusError
from .model import ModelConfig, generate, memory_report
from .reports import REPORT_KINDS, report_suite
from .rng import Rng
from .train import TrainConfig, _eval_pass, _load_task, train


def _coerce(old, raw: str):
    """Parse a --set value against the type of the field it replaces."""
    if isinstance(old, bool):
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"expected a boolean, got {raw!r}")
    if isinstance(old, int) and not isinstance(old, bool):
        return int(raw)
    if isinstance(old, float):
        return float(raw)
    return raw


def _apply_overrides(cfg: dict, pairs: list[list[str]]) -> dict:
    for key, raw in pairs:
        node = cfg
        parts = key.split(".")
        for part in parts[:-1]:
            if part not in node or not isinstance(node[part], dict):
                node[part] = {}
            node = node[part]
        leaf = parts[-1]
        node[leaf] = _coerce(node.get(leaf), raw) if leaf in node else _guess(raw)
    return cfg


def _guess(raw: str):
    for cast in (int, float):
        try:
            return cast(raw)
        except ValueError:
            pass
    if raw.lower() in ("true", "false"):
        return raw.lower() == "true"
    return raw


def _dataclass_from(cls, d: dict):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(d) - names
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} fields: {sorted(unknown)}")
    return cls(**d)


def load_config(path: str | None, overrides: list[list[str]]) -> tuple[ModelConfig, TrainConfig]:
    cfg: dict = {"model": {}, "train": {}}
    if path:
        try:
            with open(path) as f:
                loaded = json.load(f)
        except OSError as e:
            raise ConfigError(f"cannot read config {path!r}: {e}") from e
        except json.JSONDecodeError as e:
            raise ConfigError(f"config {path!r} is not valid JSON: {e}") from e
        if not isinstance(loaded, dict):
            raise ConfigError("config file must hold a JSON object")
        cfg["model"].update(loaded.get("model", {}))
        cfg["train"].update(loaded.get("train", {}))
    _apply_overrides(cfg, overrides)
    mqar_dict = cfg["train"].pop("mqar", {})
    model_cfg = _dataclass_from(ModelConfig, cfg["model"])
    train_cfg = _dataclass_from(TrainConfig, cfg["train"])
    train_cfg.mqar = _dataclass_from(MqarConfig, mqar_dict)
    model_cfg.validate()
    train_cfg.validate()
    return model_cfg, train_cfg


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", default=None, help="JSON config file with model/train sections")
    p.add_argument(
        "--set",
        dest="overrides",
        nargs=2,
        action="append",
        default=[],
        metavar=("KEY", "VALUE"),
        help="override a dotted config key, e.g. --set model.d 256",
    )


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="rodimus", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="cmd", required=True)

    p = sub.add_parser("train", help="train a model per the config")
    _add_common(p)
    p.add_argument("--resume", default=None, help="checkpoint to resume from")

    p = sub.add_parser("eval", help="evaluate a checkpoint on the configured task")
    _add_common(p)
    p.add_argument("--ckpt", required=True)

    p = sub.add_parser("generate", help="sampled decode from a checkpoint")
    _add_common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--prompt", default="", help="prompt text (byte tokens)")
    p.add_argument("--prompt-ids", default="", help="comma-separated prompt token ids")
    p.add_argument("--steps", type=int, default=64)
    p.add_argument("--temperature", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("mqar-gen", help="emit MQAR instances as jsonl")
    _add_common(p)
    p.add_argument("--count", type=int, default=8)
    p.add_argument("--out", default=None, help="output path (default: stdout)")

    p = sub.add_parser("check", help="run a property report suite")
    p.add_argument("kind", choices=REPORT_KINDS + ("all",))
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("mem-report", help="closed-form cache/state sizes")
    _add_common(p)
    p.add_argument("--context-len", type=int, default=1024)
    return ap


def _cmd_train(args) -> int:
    model_cfg, train_cfg = load_config(args.config, args.overrides)
    summary = train(model_cfg, train_cfg, resume=args.resume)
    print(json.dumps(summary, sort_keys=True))
    return 0


def _cmd_eval(args) -> int:
    model_cfg, train_cfg = load_config(args.config, args.overrides)
    params, _ = load_model(args.ckpt, expect_config=model_cfg.to_dict())
    _, eval_data = _load_task(train_cfg, model_cfg)
    loss, acc = _eval_pass(params, train_cfg, eval_data)
    print(json.dumps({"loss": loss, "ppl": float(np.exp(loss)), "accuracy": acc}, sort_keys=True))
    return 0


def _cmd_generate(args) -> int:
    params, _ = load_model(args.ckpt)
    if args.prompt_ids:
        prompt = [int(s) for s in args.prompt_ids.split(",") if s.strip()]
    elif args.prompt:
        prompt = list(args.prompt.encode("utf-8"))
    else:
        raise ConfigError("generate needs --prompt or --prompt-ids")
    out = generate(params, prompt, args.steps, Rng(args.seed, 500), args.temperature)
    text = bytes(t for t in out if t < 256).decode("utf-8", errors="replace")
    print(json.dumps({"ids": out, "text": text}))
    return 0


def _cmd_mqar_gen(args) -> int:
    _, train_cfg = load_config(args.config, args.overrides)
    batch = mqar_generate(train_cfg.mqar, args.count)
    sink = open(args.out, "w") if args.out else sys.stdout
    try:
        for i in range(args.count):
            sink.write(
                json.dumps(
                    {
                        "tokens": batch.tokens[i].tolist(),
                        "answer_positions": batch.answer_positions[i].tolist(),
                        "answer_ids": batch.answer_ids[i].tolist(),
                    }
                )
                + "\n"
            )
    finally:
        if args.out:
            sink.close()
    return 0


def _cmd_check(args) -> int:
    kinds = REPORT_KINDS if args.kind == "all" else (args.kind,)
    ok = True
    for kind in kinds:
        report = report_suite(kind, seed=args.seed)
        print(json.dumps(report, sort_keys=True))
        ok = ok and report["pass"]
    return 0 if ok else 1


def _cmd_mem_report(args) -> int:
    model_cfg, _ = load_config(args.config, args.overrides)
    print(json.dumps(memory_report(model_cfg, args.context_len), sort_keys=True))
    return 0


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    handlers = {
        "train": _cmd_train,
        "eval": _cmd_eval,
        "generate": _cmd_generate,
        "mqar-gen": _cmd_mqar_gen,
        "check": _cmd_check,
        "mem-report": _cmd_mem_report,
    }
    try:
        return handlers[args.cmd](args)
    except (ConfigError, DataError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except (IntegrityError, RodimusError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
