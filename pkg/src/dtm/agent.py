"""The learned controller: a per-step transformer over compressed trees.

Each step reads one token per memory slot plus two special tokens, runs a
transformer encoder layer, and projects hidden states into the operation
weights, the four argument distributions over memory, and the new root
symbol.  The resulting blended tree is appended to memory; after L steps
the final slot is the prediction.

All forward code operates on batched tensors (leading batch axis).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import tpr
from .autodiff import CounterRng, Tensor

__all__ = [
    "AgentConfig",
    "AgentParams",
    "StepDecision",
    "init_params",
    "shrink",
    "build_token_sequence",
    "transformer_layer",
    "decision_heads",
    "gumbel_temperature",
    "apply_decision",
    "agent_step",
    "run_episode",
    "parameter_count",
]


@dataclass
class AgentConfig:
    d_model: int = 64
    n_heads: int = 4
    d_ff: int = 0  # 0 means 4 * d_model
    dropout: float = 0.1
    steps_l: int = 1
    params_per_step: bool = True
    sampling: str = "softmax"  # or "gumbel"
    gumbel_start: float = 1.0
    gumbel_end: float = 0.5
    gumbel_anneal_frac: float = 0.5

    def __post_init__(self):
        if self.d_ff == 0:
            self.d_ff = 4 * self.d_model
        if self.d_model % self.n_heads != 0:
            raise ValueError("d_model must be divisible by n_heads")
        if self.steps_l < 1:
            raise ValueError("need at least one computation step")
        if self.sampling not in ("softmax", "gumbel"):
            raise ValueError(f"unknown sampling mode {self.sampling!r}")


class AgentParams:
    """Named parameter tensors; names double as checkpoint keys."""

    def __init__(self, tensors: dict[str, Tensor], cfg: AgentConfig, d_symbol: int, d_role: int):
        self.tensors = tensors
        self.cfg = cfg
        self.d_symbol = d_symbol
        self.d_role = d_role

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def layer_index(self, step: int) -> int:
        return step if self.cfg.params_per_step else 0

    def n_layers(self) -> int:
        return self.cfg.steps_l if self.cfg.params_per_step else 1


def _xavier(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    std = math.sqrt(2.0 / (fan_in + fan_out))
    return rng.standard_normal((fan_in, fan_out)) * std


def init_params(cfg: AgentConfig, d_symbol: int, d_role: int, seed: int) -> AgentParams:
    """Seeded initialization: Xavier linears, zero biases, unit LN gains,
    std-0.02 embeddings for positions and the two special tokens."""
    rng = np.random.Generator(np.random.Philox(key=[seed, 2]))
    d = cfg.d_model
    d_tpr = d_symbol * d_role
    max_seq = cfg.steps_l + 2
    t: dict[str, np.ndarray] = {}
    t["shrink.w"] = _xavier(rng, d_tpr, d)
    t["tok.op"] = rng.standard_normal((1, d)) * 0.02
    t["tok.root"] = rng.standard_normal((1, d)) * 0.02
    t["pos"] = rng.standard_normal((max_seq, d)) * 0.02
    n_layers = cfg.steps_l if cfg.params_per_step else 1
    for i in range(n_layers):
        pre = f"layer{i}."
        for name in ("wq", "wk", "wv", "wo"):
            t[pre + "attn." + name] = _xavier(rng, d, d)
            t[pre + "attn.b" + name[1]] = np.zeros(d)
        t[pre + "ln1.g"] = np.ones(d)
        t[pre + "ln1.b"] = np.zeros(d)
        t[pre + "ffn.w1"] = _xavier(rng, d, cfg.d_ff)
        t[pre + "ffn.b1"] = np.zeros(cfg.d_ff)
        t[pre + "ffn.w2"] = _xavier(rng, cfg.d_ff, d)
        t[pre + "ffn.b2"] = np.zeros(d)
        t[pre + "ln2.g"] = np.ones(d)
        t[pre + "ln2.b"] = np.zeros(d)
    t["head.op"] = _xavier(rng, d, 3)
    t["head.root"] = _xavier(rng, d, d_symbol)
    t["head.arg"] = _xavier(rng, d, 4)
    tensors = {k: ad.tensor(v, requires_grad=True) for k, v in t.items()}
    return AgentParams(tensors, cfg, d_symbol, d_role)


def parameter_count(cfg: AgentConfig, d_symbol: int, d_role: int) -> int:
    d, ff = cfg.d_model, cfg.d_ff
    n_layers = cfg.steps_l if cfg.params_per_step else 1
    per_layer = 4 * (d * d + d) + (d * ff + ff) + (ff * d + d) + 4 * d
    return (
        d_symbol * d_role * d
        + 2 * d
        + (cfg.steps_l + 2) * d
        + n_layers * per_layer
        + d * 3
        + d * d_symbol
        + d * 4
    )


# ---------------------------------------------------------------------------
# forward pieces


def _mm3(x: Tensor, w: Tensor) -> Tensor:
    """(B, n, k) @ (k, j) via a flat rank-2 matmul."""
    b, n, k = x.shape
    out = ad.matmul(ad.reshape(x, (b * n, k)), w)
    return ad.reshape(out, (b, n, w.shape[1]))


def shrink(T: Tensor, params: AgentParams) -> Tensor:
    """Compress a (B, d_symbol, d_role) tree tensor to (B, 1, d_model)."""
    b = T.shape[0]
    flat = ad.reshape(T, (b, params.d_symbol * params.d_role))
    out = ad.matmul(flat, params["shrink.w"])
    return ad.reshape(out, (b, 1, params.cfg.d_model))


def special_tokens(params: AgentParams, batch: int) -> list[Tensor]:
    """The op and root tokens tiled over the batch (reusable across steps)."""
    zeros = ad.constant(np.zeros((batch, 1, params.cfg.d_model)))
    return [ad.badd(zeros, params["tok.op"]), ad.badd(zeros, params["tok.root"])]


def build_token_sequence(
    tree_tokens: list[Tensor], params: AgentParams, batch: int, specials: list[Tensor] | None = None
) -> Tensor:
    """[op, root, tree_0 .. tree_l] plus positional embeddings, (B, l+3, d)."""
    if specials is None:
        specials = special_tokens(params, batch)
    seq = ad.concat(specials + tree_tokens, axis=1)
    n = seq.shape[1]
    return ad.badd(seq, ad.narrow(params["pos"], 0, 0, n))


def transformer_layer(
    x: Tensor,
    params: AgentParams,
    layer: int,
    train: bool,
    rng: CounterRng | None,
) -> Tensor:
    """Post-norm encoder block: LN(x + MHSA(x)); LN(x + FFN(x)).

    Full bidirectional attention, gelu feedforward, inverted dropout on
    both sublayer outputs during training.
    """
    cfg = params.cfg
    pre = f"layer{layer}."
    b, n, d = x.shape
    h = cfg.n_heads
    dh = d // h

    q = ad.badd(_mm3(x, params[pre + "attn.wq"]), params[pre + "attn.bq"])
    k = ad.badd(_mm3(x, params[pre + "attn.wk"]), params[pre + "attn.bk"])
    v = ad.badd(_mm3(x, params[pre + "attn.wv"]), params[pre + "attn.bv"])

    def split_heads(t: Tensor) -> Tensor:
        t = ad.reshape(t, (b, n, h, dh))
        t = ad.swap_axes(t, 1, 2)
        return ad.reshape(t, (b * h, n, dh))

    qh, kh, vh = split_heads(q), split_heads(k), split_heads(v)
    scores = ad.scale(ad.bmm(qh, kh, transpose_b=True), 1.0 / math.sqrt(dh))
    attn = ad.softmax(scores, axis=-1)
    ctx = ad.bmm(attn, vh)
    ctx = ad.reshape(ctx, (b, h, n, dh))
    ctx = ad.swap_axes(ctx, 1, 2)
    ctx = ad.reshape(ctx, (b, n, d))
    attn_out = ad.badd(_mm3(ctx, params[pre + "attn.wo"]), params[pre + "attn.bo"])
    attn_out = ad.dropout(attn_out, cfg.dropout, rng, train)
    x = ad.layer_norm(ad.add(x, attn_out), params[pre + "ln1.g"], params[pre + "ln1.b"])

    f = ad.gelu(ad.badd(_mm3(x, params[pre + "ffn.w1"]), params[pre + "ffn.b1"]))
    f = ad.badd(_mm3(f, params[pre + "ffn.w2"]), params[pre + "ffn.b2"])
    f = ad.dropout(f, cfg.dropout, rng, train)
    return ad.layer_norm(ad.add(x, f), params[pre + "ln2.g"], params[pre + "ln2.b"])


@dataclass
class StepDecision:
    """Per-step agent output: op weights, argument weights, root symbol.

    ``w`` is (B, 1, 3), ``a`` is (B, m, 4) with columns summing to one over
    the m memory slots, ``s`` is the raw (B, 1, d_symbol) root projection.
    """

    w: Tensor
    a: Tensor
    s: Tensor

    def w_np(self) -> np.ndarray:
        return self.w.data.reshape(self.w.shape[0], 3)

    def a_np(self) -> np.ndarray:
        return self.a.data

    def s_np(self) -> np.ndarray:
        return self.s.data.reshape(self.s.shape[0], -1)


def gumbel_temperature(cfg: AgentConfig, anneal_progress: float) -> float:
    """Linear anneal from start to end over the first ``anneal_frac`` of
    training, constant afterwards."""
    frac = max(min(anneal_progress, 1.0), 0.0)
    if cfg.gumbel_anneal_frac <= 0.0:
        return cfg.gumbel_end
    ramp = min(frac / cfg.gumbel_anneal_frac, 1.0)
    return cfg.gumbel_start + (cfg.gumbel_end - cfg.gumbel_start) * ramp


def _maybe_gumbel(logits: Tensor, axis: int, cfg: AgentConfig, sample: bool, rng, tau: float) -> Tensor:
    if not sample:
        return ad.softmax(logits, axis)
    noise = ad.constant(rng.gumbel(logits.shape))
    return ad.softmax(ad.scale(ad.add(logits, noise), 1.0 / tau), axis)


def decision_heads(
    h: Tensor,
    memory_size: int,
    params: AgentParams,
    train: bool = False,
    rng: CounterRng | None = None,
    anneal_progress: float = 0.0,
) -> StepDecision:
    """Project hidden states to the step decision.

    Token 0 drives the operation weights, token 1 the raw root symbol, and
    each memory token contributes one row of argument logits; argument
    weights normalize over memory slots.  Gumbel sampling (training-time
    ablation) perturbs both the operation and argument logits.
    """
    if h.shape[1] != memory_size + 2:
        raise ValueError(f"sequence length {h.shape[1]} != memory {memory_size} + 2")
    sample = train and params.cfg.sampling == "gumbel"
    tau = gumbel_temperature(params.cfg, anneal_progress) if sample else 1.0
    w_logits = _mm3(ad.narrow(h, 1, 0, 1), params["head.op"])
    w = _maybe_gumbel(w_logits, 2, params.cfg, sample, rng, tau)
    s = _mm3(ad.narrow(h, 1, 1, 1), params["head.root"])
    arg_logits = _mm3(ad.narrow(h, 1, 2, memory_size), params["head.arg"])
    a = _maybe_gumbel(arg_logits, 1, params.cfg, sample, rng, tau)
    return StepDecision(w=w, a=a, s=s)


def apply_decision(memory: list[Tensor], decision: StepDecision, maps: tpr.StructuralMaps) -> Tensor:
    """Blend arguments per the decision and run one interpreter step."""
    t4 = tpr.blend_arguments(memory, decision.a)
    return tpr.interpreter_step(decision.w, t4, decision.s, maps)


def agent_step(
    memory: list[Tensor],
    tree_tokens: list[Tensor],
    params: AgentParams,
    maps: tpr.StructuralMaps,
    step: int,
    train: bool = False,
    rng: CounterRng | None = None,
    anneal_progress: float = 0.0,
    specials: list[Tensor] | None = None,
) -> tuple[StepDecision, Tensor]:
    """One full machine step; appends the new tree and its token."""
    if len(memory) != step + 1:
        raise ValueError(f"memory holds {len(memory)} trees at step {step}, expected {step + 1}")
    batch = memory[0].shape[0]
    seq = build_token_sequence(tree_tokens, params, batch, specials)
    h = transformer_layer(seq, params, params.layer_index(step), train, rng)
    decision = decision_heads(h, len(memory), params, train, rng, anneal_progress)
    out = apply_decision(memory, decision, maps)
    memory.append(out)
    tree_tokens.append(shrink(out, params))
    return decision, out


def run_episode(
    input_tpr: Tensor,
    params: AgentParams,
    maps: tpr.StructuralMaps,
    train: bool = False,
    rng: CounterRng | None = None,
    anneal_progress: float = 0.0,
) -> tuple[Tensor, list[StepDecision]]:
    """Run L steps from the encoded input; the last tree written is the
    prediction.  Returns it with the full decision trace."""
    memory = [input_tpr]
    tree_tokens = [shrink(input_tpr, params)]
    specials = special_tokens(params, input_tpr.shape[0])
    trace: list[StepDecision] = []
    for step in range(params.cfg.steps_l):
        decision, _ = agent_step(
            memory, tree_tokens, params, maps, step, train, rng, anneal_progress, specials
        )
        trace.append(decision)
    return memory[-1], trace
