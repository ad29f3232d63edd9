"""Training objective, optimization loop, evaluation, checkpointing.

The loss is a masked mean-squared error in TPR space: predicted fillers
must match the target at every occupied role, and the norm of predicted
content at roles empty in the target is penalized.  Each role contributes
the mean over its d_symbol entries; the two terms are means over their
respective role sets.

Checkpoints are self-contained binary files (magic ``DTM1``) holding the
config snapshot, every parameter and optimizer array, the RNG state and
the step counter; save -> load -> save is byte-identical.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import agent as agent_mod
from . import autodiff as ad
from . import tpr
from .agent import AgentConfig, AgentParams, init_params, run_episode
from .autodiff import CounterRng, Tensor
from .data import Sample, TaskData
from .optim import Adam, LrSchedule, clip_grad_norm
from .sexpr import Tree

__all__ = [
    "TrainConfig",
    "LossBreakdown",
    "LossTerms",
    "NumericError",
    "CheckpointError",
    "Checkpoint",
    "compute_loss",
    "encode_batch",
    "train_step",
    "evaluate",
    "train",
    "save_checkpoint",
    "load_checkpoint",
    "build_model",
]


@dataclass
class TrainConfig:
    steps: int = 20000
    batch_size: int = 16
    lr: float = 1e-3
    warmup: int = 10000
    weight_decay: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    clip: float = 1.0
    seed: int = 0
    eval_every: int = 500
    empty_penalty: float = 1.0
    decode_tau: float = 0.5
    steps_l: int = 0  # 0 means (X + 2) * 2
    learned_maps: bool = False
    gumbel: bool = False
    basis_mode: str = "identity"
    eval_batch: int = 128
    train_eval_samples: int = 500

    def __post_init__(self):
        if min(self.steps, self.batch_size, self.eval_every) <= 0 or self.lr <= 0:
            raise ValueError("steps, batch size, eval cadence and lr must be positive")
        if self.empty_penalty < 0:
            raise ValueError("empty-node penalty weight must be nonnegative")


@dataclass
class LossBreakdown:
    filled_term: float
    empty_term: float
    total: float


@dataclass
class LossTerms:
    total: Tensor
    filled: Tensor
    empty: Tensor
    empty_penalty: float

    def breakdown(self) -> LossBreakdown:
        return LossBreakdown(self.filled.item(), self.empty.item(), self.total.item())


class NumericError(RuntimeError):
    """The loss left the finite range; diagnostics were dumped."""


def compute_loss(pred: Tensor, target: np.ndarray, occupancy: np.ndarray, empty_penalty: float = 1.0) -> LossTerms:
    """Masked squared error against a target TPR batch.

    ``target`` is (B, d_symbol, d_role) (or unbatched 2-D), ``occupancy``
    the boolean role mask derived from the target trees.
    """
    if pred.ndim == 2:
        pred = ad.reshape(pred, (1,) + pred.shape)
        target = target[None]
        occupancy = occupancy[None]
    b, d_symbol, d_role = pred.shape
    if target.shape != pred.shape:
        raise ad.ShapeError(f"target shape {target.shape} != prediction shape {pred.shape}")
    occ = occupancy.astype(float)
    n_occ = occ.sum(axis=1)
    n_emp = d_role - n_occ
    filled_w = occ / np.maximum(n_occ, 1.0)[:, None] / (d_symbol * b)
    empty_w = (1.0 - occ) / np.maximum(n_emp, 1.0)[:, None] / (d_symbol * b)
    diff = ad.sub(pred, ad.constant(target))
    sq = ad.mul(diff, diff)
    filled = ad.sum_all(ad.bmul(sq, ad.constant(filled_w[:, None, :])))
    empty = ad.sum_all(ad.bmul(sq, ad.constant(empty_w[:, None, :])))
    total = ad.add(filled, ad.scale(empty, empty_penalty))
    return LossTerms(total=total, filled=filled, empty=empty, empty_penalty=empty_penalty)


# ---------------------------------------------------------------------------
# model assembly


@dataclass
class Model:
    params: AgentParams
    maps: tpr.StructuralMaps
    basis: tpr.RoleBasis
    table: tpr.SymbolTable
    agent_cfg: AgentConfig
    trainables: dict[str, Tensor]


def build_model(task_data: TaskData, cfg: TrainConfig, agent_cfg: AgentConfig) -> Model:
    basis = tpr.build_role_basis(task_data.depth_limit, cfg.basis_mode, cfg.seed)
    table = tpr.SymbolTable.from_symbols(task_data.symbols)
    if cfg.learned_maps:
        maps = tpr.learned_maps_init(basis, cfg.seed)
    else:
        maps = tpr.make_structural_maps(basis)
    params = init_params(agent_cfg, table.d_symbol, basis.d_role, cfg.seed)
    trainables = dict(params.tensors)
    trainables.update(maps.trainable())
    return Model(params, maps, basis, table, agent_cfg, trainables)


def encode_batch(samples: list[Sample], basis: tpr.RoleBasis, table: tpr.SymbolTable):
    """Stack encodings: (inputs, targets, occupancy) batched along axis 0."""
    inputs = np.stack([tpr.encode_tree(s.source, basis, table) for s in samples])
    targets = np.stack([tpr.encode_tree(s.target, basis, table) for s in samples])
    occ = np.stack([tpr.tree_occupancy(s.target, basis, table)[0] for s in samples])
    return inputs, targets, occ


# ---------------------------------------------------------------------------
# training


def train_step(
    batch: list[Sample],
    model: Model,
    opt: Adam,
    cfg: TrainConfig,
    schedule: LrSchedule,
    step: int,
    rng: CounterRng,
) -> dict:
    """One optimization step over a batch; returns the metrics record."""
    inputs, targets, occ = encode_batch(batch, model.basis, model.table)
    anneal = step / cfg.steps
    pred, _ = run_episode(
        ad.constant(inputs), model.params, model.maps, train=True, rng=rng, anneal_progress=anneal
    )
    terms = compute_loss(pred, targets, occ, cfg.empty_penalty)
    b = terms.breakdown()
    if not np.isfinite(b.total):
        raise NumericError(f"non-finite loss at step {step}: {b}")
    opt.zero_grad()
    ad.backward(terms.total)
    grad_norm = clip_grad_norm(model.trainables.values(), cfg.clip)
    lr = schedule.lr_at(step)
    opt.step(lr)
    return {
        "step": step,
        "lr": lr,
        "loss": b.total,
        "filled": b.filled_term,
        "empty": b.empty_term,
        "grad_norm": grad_norm,
    }


def evaluate(samples: list[Sample], model: Model, cfg: TrainConfig) -> float:
    """Exact-match accuracy: decoded prediction must reproduce the target's
    occupancy and labels at every role.  Dropout off, softmax sampling."""
    if not samples:
        return 0.0
    hits = 0
    with ad.no_grad():
        for start in range(0, len(samples), cfg.eval_batch):
            chunk = samples[start : start + cfg.eval_batch]
            inputs = np.stack([tpr.encode_tree(s.source, model.basis, model.table) for s in chunk])
            pred, _ = run_episode(ad.constant(inputs), model.params, model.maps, train=False)
            for i, s in enumerate(chunk):
                if tpr.trees_match(pred.data[i], s.target, model.basis, model.table, cfg.decode_tau):
                    hits += 1
    return hits / len(samples)


def _resolve_steps_l(cfg: TrainConfig, task_data: TaskData) -> int:
    return cfg.steps_l if cfg.steps_l > 0 else (task_data.min_steps + 2) * 2


def train(
    task_data: TaskData,
    cfg: TrainConfig,
    agent_cfg: AgentConfig | None = None,
    out_dir: str | Path = "runs/run",
    config_snapshot: dict | None = None,
    resume_from: str | Path | None = None,
) -> dict:
    """Full schedule with periodic dev evaluation and final five-split eval.

    Writes metrics.jsonl, checkpoint_final.dtm, checkpoint_best.dtm and
    report.json under ``out_dir``.  Runs whose final train accuracy falls
    below 0.9 are flagged as excluded in the report (never silently
    dropped from any aggregate).
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    steps_l = _resolve_steps_l(cfg, task_data)
    if agent_cfg is None:
        agent_cfg = AgentConfig(steps_l=steps_l)
    agent_cfg.steps_l = steps_l
    if steps_l < task_data.min_steps:
        raise ValueError(f"L={steps_l} is below the task minimum X={task_data.min_steps}")
    if cfg.gumbel:
        agent_cfg.sampling = "gumbel"

    model = build_model(task_data, cfg, agent_cfg)
    opt = Adam(model.trainables, cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay)
    schedule = LrSchedule(cfg.lr, cfg.warmup, cfg.steps)
    rng = CounterRng(cfg.seed)
    start_step = 0

    snapshot = dict(config_snapshot or {})
    snapshot.update(
        {
            "task": task_data.task,
            "symbols": list(task_data.symbols),
            "depth_limit": task_data.depth_limit,
            "min_steps": task_data.min_steps,
            "train": asdict(cfg),
            "agent": asdict(agent_cfg),
        }
    )

    if resume_from is not None:
        ck = load_checkpoint(resume_from)
        _restore_model(model, opt, ck)
        rng = CounterRng(*ck.rng_state)
        start_step = ck.step

    train_samples = task_data.splits["train"]
    dev_samples = task_data.splits["dev"]
    train_probe = train_samples[: min(cfg.train_eval_samples, len(train_samples))]

    metrics_path = out / "metrics.jsonl"
    mode = "a" if resume_from is not None else "w"
    best_dev = -1.0
    window: list[dict] = []
    with open(metrics_path, mode) as metrics_file:
        for step in range(start_step, cfg.steps):
            idx = rng.integers(0, len(train_samples), cfg.batch_size)
            batch = [train_samples[i] for i in idx]
            try:
                rec = train_step(batch, model, opt, cfg, schedule, step, rng)
            except NumericError:
                _dump_diagnostics(out, step, window)
                raise
            window.append(rec)
            if (step + 1) % cfg.eval_every == 0 or step + 1 == cfg.steps:
                train_acc = evaluate(train_probe, model, cfg)
                dev_acc = evaluate(dev_samples, model, cfg)
                row = {
                    "step": step + 1,
                    "lr": rec["lr"],
                    "loss": float(np.mean([r["loss"] for r in window])),
                    "filled": float(np.mean([r["filled"] for r in window])),
                    "empty": float(np.mean([r["empty"] for r in window])),
                    "train_acc": train_acc,
                    "dev_acc": dev_acc,
                }
                metrics_file.write(json.dumps(row, sort_keys=True) + "\n")
                metrics_file.flush()
                window.clear()
                if dev_acc >= best_dev:
                    best_dev = dev_acc
                    save_checkpoint(out / "checkpoint_best.dtm", model, opt, snapshot, rng, step + 1)

    save_checkpoint(out / "checkpoint_final.dtm", model, opt, snapshot, rng, cfg.steps)

    final = {split: evaluate(task_data.splits[split], model, cfg) for split in task_data.splits}
    train_acc_full = evaluate(train_samples, model, cfg)
    report = {
        "seed": cfg.seed,
        "final": final,
        "train_acc": train_acc_full,
        "excluded": train_acc_full < 0.9,
        "best_dev": best_dev,
        "steps_l": steps_l,
        "config": snapshot,
    }
    (out / "report.json").write_text(json.dumps(report, sort_keys=True, indent=1) + "\n")
    return report


def _dump_diagnostics(out: Path, step: int, window: list[dict]) -> None:
    payload = {"failed_at_step": step, "recent": window[-20:]}
    (out / "diagnostics.json").write_text(json.dumps(payload, sort_keys=True, indent=1) + "\n")


# ---------------------------------------------------------------------------
# checkpoint format
#
#   magic "DTM1" | u32 version | u32 config_len | config JSON (utf-8)
#   u32 n_arrays | per array: u32 name_len, name, u32 ndim, u64*ndim dims,
#   float64 little-endian data | u64 rng_seed | u64 rng_counter | u64 step

MAGIC = b"DTM1"
VERSION = 1


class CheckpointError(RuntimeError):
    pass


@dataclass
class Checkpoint:
    version: int
    config: dict
    arrays: dict
    rng_state: tuple[int, int]
    step: int


def _collect_arrays(model: Model, opt: Adam | None) -> dict[str, np.ndarray]:
    arrays = {name: p.data for name, p in model.trainables.items()}
    if opt is not None:
        for name in model.trainables:
            arrays[f"adam.m:{name}"] = opt.m[name]
            arrays[f"adam.v:{name}"] = opt.v[name]
        arrays["adam.step"] = np.asarray(float(opt.step_count))
    return arrays


def save_checkpoint(
    path: str | Path,
    model: Model,
    opt: Adam | None,
    config: dict,
    rng: CounterRng,
    step: int,
) -> None:
    arrays = _collect_arrays(model, opt)
    blob = bytearray()
    blob += MAGIC
    blob += struct.pack("<I", VERSION)
    cfg_bytes = json.dumps(config, sort_keys=True, separators=(",", ":")).encode()
    blob += struct.pack("<I", len(cfg_bytes))
    blob += cfg_bytes
    blob += struct.pack("<I", len(arrays))
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name], dtype="<f8")
        nb = name.encode()
        blob += struct.pack("<I", len(nb))
        blob += nb
        blob += struct.pack("<I", arr.ndim)
        for dim in arr.shape:
            blob += struct.pack("<Q", dim)
        blob += arr.tobytes()
    seed, counter = rng.state()
    blob += struct.pack("<QQQ", seed, counter, step)
    Path(path).write_bytes(bytes(blob))


def load_checkpoint(path: str | Path) -> Checkpoint:
    raw = Path(path).read_bytes()
    view = memoryview(raw)
    off = 0

    def take(n: int) -> memoryview:
        nonlocal off
        if off + n > len(raw):
            raise CheckpointError(f"truncated checkpoint {path}")
        piece = view[off : off + n]
        off += n
        return piece

    if bytes(take(4)) != MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint (bad magic)")
    (version,) = struct.unpack("<I", take(4))
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (cfg_len,) = struct.unpack("<I", take(4))
    config = json.loads(bytes(take(cfg_len)).decode())
    (n_arrays,) = struct.unpack("<I", take(4))
    arrays = {}
    for _ in range(n_arrays):
        (name_len,) = struct.unpack("<I", take(4))
        name = bytes(take(name_len)).decode()
        (ndim,) = struct.unpack("<I", take(4))
        dims = struct.unpack(f"<{ndim}Q", take(8 * ndim)) if ndim else ()
        count = int(np.prod(dims)) if dims else 1
        data = np.frombuffer(take(8 * count), dtype="<f8").reshape(dims).copy()
        arrays[name] = data
    seed, counter, step = struct.unpack("<QQQ", take(24))
    if off != len(raw):
        raise CheckpointError(f"{path} has {len(raw) - off} trailing bytes")
    return Checkpoint(version, config, arrays, (int(seed), int(counter)), int(step))


def _restore_model(model: Model, opt: Adam | None, ck: Checkpoint) -> None:
    for name, p in model.trainables.items():
        if name not in ck.arrays:
            raise CheckpointError(f"checkpoint missing array {name!r}")
        if ck.arrays[name].shape != p.data.shape:
            raise CheckpointError(f"shape mismatch for {name!r}")
        p.data = ck.arrays[name].copy()
        p.grad = None
    if opt is not None:
        for name in model.trainables:
            opt.m[name] = ck.arrays[f"adam.m:{name}"].copy()
            opt.v[name] = ck.arrays[f"adam.v:{name}"].copy()
        opt.step_count = int(ck.arrays["adam.step"])


def restore_model_for_eval(ck: Checkpoint) -> tuple[Model, TrainConfig]:
    """Rebuild a model from a checkpoint's config snapshot and arrays."""
    cfg = TrainConfig(**ck.config["train"])
    agent_cfg = AgentConfig(**ck.config["agent"])
    basis = tpr.build_role_basis(ck.config["depth_limit"], cfg.basis_mode, cfg.seed)
    table = tpr.SymbolTable.from_symbols(ck.config["symbols"])
    if cfg.learned_maps:
        maps = tpr.learned_maps_init(basis, cfg.seed)
    else:
        maps = tpr.make_structural_maps(basis)
    params = init_params(agent_cfg, table.d_symbol, basis.d_role, cfg.seed)
    trainables = dict(params.tensors)
    trainables.update(maps.trainable())
    model = Model(params, maps, basis, table, agent_cfg, trainables)
    _restore_model(model, None, ck)
    return model, cfg
