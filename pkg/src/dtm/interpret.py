"""Turn converged soft traces into discrete programs and execute them.

At convergence the agent's operation and argument distributions become
one-hot; ``extract_program`` reads a trace back as a discrete instruction
sequence whenever every consumed distribution clears a threshold, and
``execute_instructions`` runs such sequences with purely symbolic trees.
The empty tree is a first-class value: cdr of a childless node yields it,
and cons over empty children writes a bare root word.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .sexpr import Tree, unparse

__all__ = [
    "Instruction",
    "Program",
    "Refusal",
    "TraceStep",
    "Trace",
    "trace_from_decisions",
    "extract_program",
    "execute_instructions",
    "execute_program",
    "render_trace",
    "trace_to_json",
    "trace_from_json",
]

OPS = ("car", "cdr", "cons")


@dataclass(frozen=True)
class Instruction:
    """One discrete machine step; cons uses both slots and a root symbol."""

    op: str
    arg0: int
    arg1: int | None = None
    symbol: str | None = None

    def __post_init__(self):
        if self.op not in OPS:
            raise ValueError(f"unknown op {self.op!r}")
        if self.op == "cons" and (self.arg1 is None or self.symbol is None):
            raise ValueError("cons needs two argument slots and a symbol")


@dataclass
class Program:
    instructions: list[Instruction]
    provenance: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.instructions)


@dataclass
class Refusal:
    """Extraction declined: the trace is not one-hot at ``step``."""

    step: int
    reason: str


@dataclass
class TraceStep:
    w: np.ndarray  # (3,)
    a: np.ndarray  # (m, 4) columns sum to one over memory slots
    s: np.ndarray  # raw root-symbol vector

    def entropies(self) -> dict[str, float]:
        ent = {"op": _entropy(self.w)}
        for k, name in enumerate(("car", "cdr", "cons0", "cons1")):
            ent[f"arg_{name}"] = _entropy(self.a[:, k])
        return ent


def _entropy(p: np.ndarray) -> float:
    q = np.clip(p, 1e-12, None)
    q = q / q.sum()
    return float(-(q * np.log(q)).sum())


@dataclass
class Trace:
    steps: list[TraceStep]
    symbols: tuple[str, ...]


def trace_from_decisions(decisions, symbols, batch_index: int = 0) -> Trace:
    """Extract one sample's trace from a batched episode."""
    steps = []
    for d in decisions:
        steps.append(
            TraceStep(
                w=d.w_np()[batch_index].copy(),
                a=d.a_np()[batch_index].copy(),
                s=d.s_np()[batch_index].copy(),
            )
        )
    return Trace(steps=steps, symbols=tuple(symbols))


# columns of `a` consumed by each operation
_CONSUMED = {0: [(0, "car")], 1: [(1, "cdr")], 2: [(2, "cons0"), (3, "cons1")]}


def extract_program(trace: Trace, theta: float = 0.99) -> Program | Refusal:
    """Read a discrete program off a trace.

    Succeeds when, at every step, the top operation weight and the top
    weight of every argument that operation actually consumes reach
    ``theta``.  Distributions feeding unselected operations are ignored:
    at a one-hot operation vertex they cannot affect the output.
    """
    instructions = []
    for i, step in enumerate(trace.steps):
        op_idx = int(step.w.argmax())
        if step.w[op_idx] < theta:
            return Refusal(i, f"operation weights not one-hot (max {step.w[op_idx]:.3f})")
        slots = {}
        for col, name in _CONSUMED[op_idx]:
            j = int(step.a[:, col].argmax())
            if step.a[j, col] < theta:
                return Refusal(i, f"{name} argument weights not one-hot (max {step.a[j, col]:.3f})")
            slots[name] = j
        if op_idx == 0:
            instructions.append(Instruction("car", slots["car"]))
        elif op_idx == 1:
            instructions.append(Instruction("cdr", slots["cdr"]))
        else:
            symbol = trace.symbols[int(step.s.argmax())]
            instructions.append(Instruction("cons", slots["cons0"], slots["cons1"], symbol))
    return Program(instructions)


def execute_instructions(instructions, input_tree: Tree | None) -> Tree | None:
    """Run instructions over symbolic tree memory; slot 0 is the input."""
    memory: list[Tree | None] = [input_tree]
    for k, ins in enumerate(instructions):
        if not (0 <= ins.arg0 < len(memory)) or (
            ins.op == "cons" and not (0 <= ins.arg1 < len(memory))
        ):
            raise IndexError(f"instruction {k} references a slot that does not exist yet")
        if ins.op == "car":
            t = memory[ins.arg0]
            memory.append(t.left if t is not None else None)
        elif ins.op == "cdr":
            t = memory[ins.arg0]
            memory.append(t.right if t is not None else None)
        else:
            memory.append(Tree(ins.symbol, memory[ins.arg0], memory[ins.arg1]))
    return memory[-1]


def execute_program(program: Program, input_tree: Tree | None) -> Tree | None:
    return execute_instructions(program.instructions, input_tree)


def _format_tree(t: Tree | None) -> str:
    if t is None:
        return "<empty>"
    try:
        return unparse(t)
    except ValueError:
        # diagnostic form for decode artifacts that have only a right child
        left = _format_tree(t.left) if t.left is not None else "_"
        right = _format_tree(t.right) if t.right is not None else "_"
        return f"( {t.label} {left} {right} )"


def render_trace(trace: Trace, fmt: str = "text", input_tree: Tree | None = None) -> str:
    """Human-readable step listing, or a loss-free json encoding.

    Text mode shows the winning operation, its argument slots with their
    weights, and (when the trace is discrete enough to execute) the
    symbolic tree produced at each step.
    """
    if fmt == "json":
        return trace_to_json(trace)
    if fmt != "text":
        raise ValueError(f"unknown format {fmt!r}")
    lines = []
    memory: list[Tree | None] = [input_tree]
    runnable = input_tree is not None
    for i, step in enumerate(trace.steps):
        op_idx = int(step.w.argmax())
        op = OPS[op_idx]
        parts = [f"step {i}: {op} (w={step.w[op_idx]:.3f})"]
        slots = []
        for col, name in _CONSUMED[op_idx]:
            j = int(step.a[:, col].argmax())
            parts.append(f"{name}<-slot{j} ({step.a[j, col]:.3f})")
            slots.append(j)
        if op == "cons":
            symbol = trace.symbols[int(step.s.argmax())]
            parts.append(f"root={symbol}")
        if runnable:
            if op == "car":
                t = memory[slots[0]]
                memory.append(t.left if t is not None else None)
            elif op == "cdr":
                t = memory[slots[0]]
                memory.append(t.right if t is not None else None)
            else:
                memory.append(Tree(symbol, memory[slots[0]], memory[slots[1]]))
            parts.append(f"-> {_format_tree(memory[-1])}")
        lines.append("  ".join(parts))
    return "\n".join(lines)


def trace_to_json(trace: Trace) -> str:
    payload = {
        "symbols": list(trace.symbols),
        "steps": [
            {
                "w": step.w.tolist(),
                "a": step.a.tolist(),
                "s": step.s.tolist(),
                "entropies": step.entropies(),
            }
            for step in trace.steps
        ],
    }
    return json.dumps(payload, sort_keys=True)


def trace_from_json(text: str) -> Trace:
    payload = json.loads(text)
    steps = [
        TraceStep(w=np.array(s["w"]), a=np.array(s["a"]), s=np.array(s["s"]))
        for s in payload["steps"]
    ]
    return Trace(steps=steps, symbols=tuple(payload["symbols"]))
