"""Command-line entry point wiring data generation, training, evaluation,
tracing, ablations and multi-seed campaigns.

Exit codes: 0 success, 2 usage or config-schema violation, 3 data error,
4 numeric failure during training.
"""

from __future__ import annotations

import argparse
import json
import subprocess
import sys
from dataclasses import asdict
from pathlib import Path

import jsonschema
import numpy as np

from . import __version__
from . import autodiff as ad
from . import data as data_mod
from . import interpret as interpret_mod
from . import tpr
from .agent import AgentConfig, run_episode
from .sexpr import ParseError, parse, unparse
from .trainer import (
    CheckpointError,
    NumericError,
    TrainConfig,
    evaluate,
    load_checkpoint,
    restore_model_for_eval,
    train,
)

_TRAIN_FIELDS = {
    "steps": {"type": "integer", "minimum": 1},
    "batch_size": {"type": "integer", "minimum": 1},
    "lr": {"type": "number", "exclusiveMinimum": 0},
    "warmup": {"type": "integer", "minimum": 0},
    "weight_decay": {"type": "number", "minimum": 0},
    "beta1": {"type": "number"},
    "beta2": {"type": "number"},
    "eps": {"type": "number", "exclusiveMinimum": 0},
    "clip": {"type": "number", "exclusiveMinimum": 0},
    "seed": {"type": "integer", "minimum": 0},
    "eval_every": {"type": "integer", "minimum": 1},
    "empty_penalty": {"type": "number", "minimum": 0},
    "decode_tau": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
    "steps_l": {"type": "integer", "minimum": 0},
    "learned_maps": {"type": "boolean"},
    "gumbel": {"type": "boolean"},
    "basis_mode": {"enum": ["identity", "random_orthonormal"]},
    "eval_batch": {"type": "integer", "minimum": 1},
    "train_eval_samples": {"type": "integer", "minimum": 1},
}

_AGENT_FIELDS = {
    "d_model": {"type": "integer", "minimum": 1},
    "n_heads": {"type": "integer", "minimum": 1},
    "d_ff": {"type": "integer", "minimum": 0},
    "dropout": {"type": "number", "minimum": 0, "maximum": 1},
    "steps_l": {"type": "integer", "minimum": 1},
    "params_per_step": {"type": "boolean"},
    "sampling": {"enum": ["softmax", "gumbel"]},
    "gumbel_start": {"type": "number"},
    "gumbel_end": {"type": "number"},
    "gumbel_anneal_frac": {"type": "number"},
}

CONFIG_SCHEMA = {
    "$schema": "http://json-schema.org/draft-07/schema#",
    "type": "object",
    "required": ["version", "task", "data_dir", "out_dir"],
    "additionalProperties": False,
    "properties": {
        "version": {"const": 1},
        "task": {"enum": list(data_mod.TASKS)},
        "data_dir": {"type": "string"},
        "out_dir": {"type": "string"},
        "seeds": {"type": "array", "items": {"type": "integer", "minimum": 0}},
        "train": {"type": "object", "additionalProperties": False, "properties": _TRAIN_FIELDS},
        "agent": {"type": "object", "additionalProperties": False, "properties": _AGENT_FIELDS},
    },
}


class UsageError(ValueError):
    pass


def _load_config(path: str) -> dict:
    try:
        raw = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise UsageError(f"config file not found: {path}")
    except json.JSONDecodeError as e:
        raise UsageError(f"config file is not valid JSON: {e}")
    try:
        jsonschema.validate(raw, CONFIG_SCHEMA)
    except jsonschema.ValidationError as e:
        raise UsageError(f"config schema violation: {e.message}")
    return raw


def _build_cfgs(raw: dict, seed: int | None = None) -> tuple[TrainConfig, AgentConfig]:
    train_kwargs = dict(raw.get("train", {}))
    if seed is not None:
        train_kwargs["seed"] = seed
    agent_kwargs = dict(raw.get("agent", {}))
    agent_kwargs.setdefault("steps_l", 1)  # overwritten by the trainer
    return TrainConfig(**train_kwargs), AgentConfig(**agent_kwargs)


def _build_id() -> str:
    try:
        rev = subprocess.run(
            ["git", "rev-parse", "HEAD"], capture_output=True, text=True, timeout=5
        )
        if rev.returncode == 0:
            return rev.stdout.strip()
    except OSError:
        pass
    return f"dtm-{__version__}"


def _write_manifest(out_dir: Path, raw_config: dict, seeds: list[int]) -> None:
    manifest = {
        "config": raw_config,
        "seeds": seeds,
        "build": _build_id(),
        "package_version": __version__,
    }
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=1) + "\n")


# ---------------------------------------------------------------------------
# subcommands


def _cmd_gen_data(args) -> int:
    sizes = {
        "train": args.train_size,
        "dev": args.eval_size,
        "test_iid": args.eval_size,
        "ood_lexical": args.eval_size,
        "ood_structural": args.eval_size,
    }
    split_spec = data_mod.SplitSpec(
        sizes=sizes,
        adjectives=_parse_range(args.adjectives),
        adjectives_ood=_parse_range(args.adjectives_ood),
    )
    if args.lexicon:
        lexicon = data_mod.load_lexicon(args.lexicon)
    elif args.preset == "desk":
        lexicon = data_mod.desk_lexicon()
    else:
        lexicon = data_mod.default_lexicon()
    spec = data_mod.TaskSpec(args.task)
    samples = data_mod.generate_task(spec, split_spec, lexicon, args.seed)
    manifest = data_mod.write_splits(args.task, samples, args.out, lexicon, args.seed, split_spec)
    print(f"wrote {sum(len(v) for v in samples.values())} samples to {args.out}")
    print(f"max depth per split: {manifest['depth']}; X = {manifest['min_steps']}")
    return 0


def _parse_range(text: str) -> tuple[int, int]:
    try:
        lo, hi = (int(x) for x in text.split(":"))
    except ValueError:
        raise UsageError(f"range must look like LO:HI, got {text!r}")
    return lo, hi


def _cmd_train(args) -> int:
    raw = _load_config(args.config)
    cfg, agent_cfg = _build_cfgs(raw, args.seed)
    out_dir = Path(args.out or raw["out_dir"])
    task_data = data_mod.load_task(raw["data_dir"])
    _write_manifest(out_dir, raw, [cfg.seed])
    report = train(
        task_data,
        cfg,
        agent_cfg,
        out_dir,
        config_snapshot={"experiment": raw},
        resume_from=args.resume,
    )
    print(json.dumps({k: report[k] for k in ("seed", "final", "train_acc", "excluded")}, indent=1))
    return 0


def _cmd_eval(args) -> int:
    ck = load_checkpoint(args.checkpoint)
    model, cfg = restore_model_for_eval(ck)
    data_dir = args.data or ck.config.get("experiment", {}).get("data_dir")
    if not data_dir:
        raise UsageError("no data directory recorded in checkpoint; pass --data")
    task_data = data_mod.load_task(data_dir)
    if args.split not in task_data.splits:
        raise UsageError(f"unknown split {args.split!r}; expected one of {list(task_data.splits)}")
    acc = evaluate(task_data.splits[args.split], model, cfg)
    print(f"{args.split} accuracy: {acc:.4f}")
    return 0


def _cmd_trace(args) -> int:
    ck = load_checkpoint(args.checkpoint)
    model, cfg = restore_model_for_eval(ck)
    try:
        tree = parse(args.input)
    except ParseError as e:
        raise UsageError(f"bad input expression: {e}")
    encoded = tpr.encode_tree(tree, model.basis, model.table)
    with ad.no_grad():
        pred, decisions = run_episode(ad.constant(encoded[None]), model.params, model.maps)
    trace = interpret_mod.trace_from_decisions(decisions, model.table.symbols)
    print(interpret_mod.render_trace(trace, args.format, input_tree=tree))
    decoded = tpr.decode_tpr(pred.data[0], model.basis, model.table, cfg.decode_tau)
    if args.format == "text":
        print(f"prediction: {interpret_mod._format_tree(decoded)}")
    return 0


def _cmd_ablate(args) -> int:
    raw = _load_config(args.config)
    cfg, agent_cfg = _build_cfgs(raw, args.seed)
    if args.mode == "learned-maps":
        cfg.learned_maps = True
    elif args.mode == "gumbel":
        cfg.gumbel = True
    else:
        raise UsageError(f"unknown ablation mode {args.mode!r}")
    out_dir = Path(args.out or raw["out_dir"]) / f"ablate_{args.mode.replace('-', '_')}"
    task_data = data_mod.load_task(raw["data_dir"])
    _write_manifest(out_dir, raw, [cfg.seed])
    report = train(task_data, cfg, agent_cfg, out_dir, config_snapshot={"experiment": raw})
    print(json.dumps({k: report[k] for k in ("seed", "final", "train_acc", "excluded")}, indent=1))
    return 0


def _cmd_campaign(args) -> int:
    raw = _load_config(args.config)
    seeds = raw.get("seeds") or list(range(args.seeds))
    seeds = seeds[: args.seeds] if args.seeds else seeds
    out_root = Path(args.out or raw["out_dir"])
    task_data = data_mod.load_task(raw["data_dir"])
    _write_manifest(out_root, raw, list(seeds))
    reports = []
    for seed in seeds:
        cfg, agent_cfg = _build_cfgs(raw, seed)
        report = train(
            task_data, cfg, agent_cfg, out_root / f"seed_{seed}", config_snapshot={"experiment": raw}
        )
        reports.append(report)
        print(f"seed {seed}: final={report['final']} excluded={report['excluded']}")
    summary = summarize_campaign(reports)
    (out_root / "summary.json").write_text(json.dumps(summary, sort_keys=True, indent=1) + "\n")
    print(format_campaign_table(summary))
    return 0


def summarize_campaign(reports: list[dict]) -> dict:
    splits = list(reports[0]["final"])
    by_split = {}
    for split in splits:
        vals = np.array([r["final"][split] for r in reports])
        by_split[split] = {"mean": float(vals.mean()), "std": float(vals.std()), "values": vals.tolist()}
    return {
        "n_seeds": len(reports),
        "seeds": [r["seed"] for r in reports],
        "splits": by_split,
        "excluded_seeds": [r["seed"] for r in reports if r["excluded"]],
    }


def format_campaign_table(summary: dict) -> str:
    lines = [f"mean ± std across {summary['n_seeds']} random initializations"]
    for split, stats in summary["splits"].items():
        lines.append(f"  {split:<16} {stats['mean']:.4f} ± {stats['std']:.4f}")
    if summary["excluded_seeds"]:
        lines.append(f"  excluded seeds (train acc < 0.9): {summary['excluded_seeds']}")
    return "\n".join(lines)


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dtm", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a task's five splits")
    g.add_argument("--task", required=True, choices=data_mod.TASKS)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.add_argument("--lexicon", help="JSON file with the five word-list fields")
    g.add_argument("--preset", choices=["full", "desk"], default="full")
    g.add_argument("--train-size", type=int, default=10000)
    g.add_argument("--eval-size", type=int, default=1250)
    g.add_argument("--adjectives", default="0:2", help="per-NP adjective range LO:HI")
    g.add_argument("--adjectives-ood", default="3:4", help="OOD-structural range LO:HI")
    g.set_defaults(fn=_cmd_gen_data)

    t = sub.add_parser("train", help="train one seed from a config file")
    t.add_argument("--config", required=True)
    t.add_argument("--seed", type=int, default=None, help="overrides the config seed")
    t.add_argument("--out", default=None, help="overrides the config out_dir")
    t.add_argument("--resume", default=None, help="checkpoint to resume from")
    t.set_defaults(fn=_cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on one split")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--split", required=True)
    e.add_argument("--data", default=None, help="overrides the recorded data_dir")
    e.set_defaults(fn=_cmd_eval)

    r = sub.add_parser("trace", help="run one input and print the step trace")
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--input", required=True, help="source tree as an s-expression")
    r.add_argument("--format", choices=["text", "json"], default="text")
    r.set_defaults(fn=_cmd_trace)

    a = sub.add_parser("ablate", help="train with an ablation switch enabled")
    a.add_argument("--config", required=True)
    a.add_argument("--mode", required=True, choices=["learned-maps", "gumbel"])
    a.add_argument("--seed", type=int, default=None)
    a.add_argument("--out", default=None)
    a.set_defaults(fn=_cmd_ablate)

    c = sub.add_parser("campaign", help="run the multi-seed protocol and summarize")
    c.add_argument("--config", required=True)
    c.add_argument("--seeds", type=int, default=5, help="number of random initializations")
    c.add_argument("--out", default=None)
    c.set_defaults(fn=_cmd_campaign)

    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 2 if e.code not in (0, None) else 0
    try:
        return args.fn(args)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (FileNotFoundError, CheckpointError, ValueError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return 3
    except NumericError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
