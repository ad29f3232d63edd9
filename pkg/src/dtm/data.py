"""Synthetic tree-to-tree tasks with IID and out-of-distribution splits.

Four tasks over template-generated sentences:

* ``car_cdr_seq``: the source root carries a Lisp-style token such as
  ``cdaadr``; the target is the subtree reached by executing the encoded
  car/cdr sequence (rightmost letter first).
* ``active_logical`` / ``passive_logical``: translate between a syntax
  tree and its logical form, mixing both directions per sample.
* ``active_passive_to_logical``: active or passive source, logical target.

Splits: train, dev, test_iid, ood_lexical (held-out adjectives) and
ood_structural (longer adjective chains).  Each sample also has a gold
reference program whose symbolic execution reproduces the target; the
longest program over the train split defines the minimum step count X.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .interpret import Instruction, execute_instructions
from .sexpr import Tree, levels, parse, unparse

__all__ = [
    "Lexicon",
    "TaskSpec",
    "SplitSpec",
    "Sample",
    "TASKS",
    "SPLITS",
    "OP_TOKENS",
    "default_lexicon",
    "desk_lexicon",
    "load_lexicon",
    "sample_np",
    "build_forms",
    "make_op_token",
    "op_token_ops",
    "apply_op_token",
    "OpNotApplicable",
    "feasible_tokens",
    "generate_task",
    "reference_program",
    "min_steps",
    "write_splits",
    "load_split",
    "task_vocabulary",
    "TaskData",
    "load_task",
]

TASKS = ("car_cdr_seq", "active_logical", "passive_logical", "active_passive_to_logical")
SPLITS = ("train", "dev", "test_iid", "ood_lexical", "ood_structural")

BASE_NONTERMINALS = ("S", "NP", "VP", "DET", "AP", "ADJ", "N", "V")
LOGICAL_NONTERMINALS = ("LF", "ARGS")
PASSIVE_NONTERMINALS = ("AUXPS", "VPPS", "PPPS", "PPS")
FUNCTION_WORDS = ("was", "by")


def _all_op_tokens() -> tuple[str, ...]:
    tokens = []
    for length in range(1, 5):
        for i in range(2**length):
            bits = format(i, f"0{length}b")
            ops = ["car" if b == "0" else "cdr" for b in bits]
            tokens.append(make_op_token(ops))
    return tuple(tokens)


@dataclass(frozen=True)
class Lexicon:
    """Word lists; adjective sets for train and OOD-lexical are disjoint."""

    determiners: tuple[str, ...]
    nouns: tuple[str, ...]
    verbs: tuple[str, ...]
    adjectives_train: tuple[str, ...]
    adjectives_ood: tuple[str, ...]

    def __post_init__(self):
        if set(self.adjectives_train) & set(self.adjectives_ood):
            raise ValueError("train and OOD adjective sets must be disjoint")
        for name in ("determiners", "nouns", "verbs", "adjectives_train", "adjectives_ood"):
            if not getattr(self, name):
                raise ValueError(f"empty word list: {name}")

    @property
    def nonterminals(self) -> tuple[str, ...]:
        return BASE_NONTERMINALS + LOGICAL_NONTERMINALS + PASSIVE_NONTERMINALS + FUNCTION_WORDS

    @property
    def op_tokens(self) -> tuple[str, ...]:
        return OP_TOKENS


def default_lexicon() -> Lexicon:
    """Word lists sized to reproduce the published vocabulary totals
    (10 + 80 content words + 11 adjectives = 101 for active<->logical)."""
    return Lexicon(
        determiners=("the", "some", "our", "his", "one", "a", "my"),
        nouns=(
            "goat", "rose", "crocodile", "donkey", "tree", "fox", "giraffe",
            "badger", "beaver", "camel", "cat", "cow", "deer", "dog", "duck",
            "eagle", "falcon", "ferret", "finch", "frog", "goose", "hamster",
            "hedgehog", "heron", "horse", "lemur", "lion", "lizard", "llama",
            "mole", "moose", "mouse", "otter", "owl", "panda", "pig", "pony",
            "rabbit", "raccoon", "rat", "raven", "seal", "sheep", "skunk",
            "sloth", "snail", "swan", "tiger", "toad", "turtle",
        ),
        verbs=(
            "bought", "washed", "touched", "kissed", "admired", "carried",
            "chased", "drew", "fed", "followed", "found", "groomed", "held",
            "hugged", "lifted", "painted", "patted", "petted", "poked",
            "pulled", "pushed", "tickled", "watched",
        ),
        adjectives_train=(
            "round", "happy", "thin", "polka-dotted", "blue", "green",
            "tall", "short", "shiny", "fuzzy", "gentle",
        ),
        adjectives_ood=(
            "purple", "striped", "grumpy", "sleepy", "brave", "noisy",
            "tiny", "crooked", "fluffy", "ancient", "spotted",
        ),
    )


def desk_lexicon() -> Lexicon:
    """Reduced lexicon (30 symbols on active<->logical) for desk-scale runs."""
    return Lexicon(
        determiners=("the", "a"),
        nouns=("goat", "fox", "donkey", "tree", "rose", "giraffe"),
        verbs=("washed", "kissed", "touched", "bought"),
        adjectives_train=("round", "happy", "thin", "blue"),
        adjectives_ood=("purple", "striped", "grumpy", "sleepy"),
    )


def load_lexicon(path: str | Path) -> Lexicon:
    with open(path) as f:
        raw = json.load(f)
    fields = ("determiners", "nouns", "verbs", "adjectives_train", "adjectives_ood")
    missing = [k for k in fields if k not in raw]
    if missing:
        raise ValueError(f"lexicon file missing fields: {missing}")
    return Lexicon(**{k: tuple(raw[k]) for k in fields})


@dataclass(frozen=True)
class TaskSpec:
    task: str

    def __post_init__(self):
        if self.task not in TASKS:
            raise ValueError(f"unknown task {self.task!r}; expected one of {TASKS}")


@dataclass(frozen=True)
class SplitSpec:
    """Split sizes plus the adjective-count ranges that define the OOD axis."""

    sizes: dict[str, int] = field(
        default_factory=lambda: {
            "train": 10000,
            "dev": 1250,
            "test_iid": 1250,
            "ood_lexical": 1250,
            "ood_structural": 1250,
        }
    )
    adjectives: tuple[int, int] = (0, 2)
    adjectives_ood: tuple[int, int] = (3, 4)

    def range_for(self, split: str) -> tuple[int, int]:
        return self.adjectives_ood if split == "ood_structural" else self.adjectives

    def adjective_vocab(self, split: str, lexicon: Lexicon) -> tuple[str, ...]:
        return lexicon.adjectives_ood if split == "ood_lexical" else lexicon.adjectives_train


@dataclass
class Sample:
    source: Tree
    target: Tree
    meta: dict


# ---------------------------------------------------------------------------
# grammar


def _unary(label: str, word: str) -> Tree:
    return Tree(label, Tree(word))


def sample_np(rng: np.random.Generator, adjective_range: tuple[int, int], vocab, lexicon: Lexicon) -> Tree:
    """A noun phrase with k nested adjectives, k uniform over the range."""
    lo, hi = adjective_range
    if not (0 <= lo <= hi <= 4):
        raise ValueError("adjective range must lie within 0..4")
    k = int(rng.integers(lo, hi + 1))
    det = lexicon.determiners[rng.integers(len(lexicon.determiners))]
    noun = lexicon.nouns[rng.integers(len(lexicon.nouns))]
    picks = rng.choice(len(vocab), size=k, replace=False)
    chain = Tree("AP", _unary("N", noun))
    for i in reversed(picks):
        chain = Tree("AP", _unary("ADJ", vocab[i]), chain)
    return Tree("NP", _unary("DET", det), chain)


def build_forms(subject_np: Tree, object_np: Tree, verb: str) -> tuple[Tree, Tree, Tree]:
    """Active, passive, and logical trees for one subject/object/verb triple.

    The passive fronts the object and holds the subject in the by-phrase;
    the logical form lists arguments as (subject, object).
    """
    v = _unary("V", verb)
    active = Tree("S", subject_np, Tree("VP", v, object_np))
    passive = Tree(
        "S",
        object_np,
        Tree(
            "VP",
            _unary("AUXPS", "was"),
            Tree("VPPS", v, Tree("PPPS", _unary("PPS", "by"), subject_np)),
        ),
    )
    logical = Tree("LF", v, Tree("ARGS", subject_np, object_np))
    return active, passive, logical


def _sample_sentence(rng, split_range, vocab, lexicon, frame: str) -> tuple[Tree, dict]:
    subj = sample_np(rng, split_range, vocab, lexicon)
    obj = sample_np(rng, split_range, vocab, lexicon)
    verb = lexicon.verbs[rng.integers(len(lexicon.verbs))]
    active, passive, logical = build_forms(subj, obj, verb)
    forms = {"active": active, "passive": passive, "logical": logical}
    return forms[frame], {"verb": verb}


# ---------------------------------------------------------------------------
# car/cdr sequence tokens


def make_op_token(seq) -> str:
    """Token for an operation sequence given in execution order.

    The rightmost inner letter runs first (Lisp composition), so the
    letters are the reversed sequence: [cdr, car, car, cdr] -> "cdaadr".
    """
    ops = list(seq)
    if not (1 <= len(ops) <= 4):
        raise ValueError("sequence length must lie in 1..4")
    letters = []
    for op in reversed(ops):
        if op == "car":
            letters.append("a")
        elif op == "cdr":
            letters.append("d")
        else:
            raise ValueError(f"unknown operation {op!r}")
    return "c" + "".join(letters) + "r"


def op_token_ops(token: str) -> list[str]:
    """Execution-order operation list encoded by a token."""
    if len(token) < 3 or not token.startswith("c") or not token.endswith("r"):
        raise ValueError(f"malformed operation token {token!r}")
    inner = token[1:-1]
    if not (1 <= len(inner) <= 4) or set(inner) - {"a", "d"}:
        raise ValueError(f"malformed operation token {token!r}")
    return ["car" if c == "a" else "cdr" for c in reversed(inner)]


class OpNotApplicable(ValueError):
    """An operation stepped to a missing child; the caller should resample."""


def apply_op_token(token: str, tree: Tree) -> Tree:
    """Execute the token's car/cdr sequence against a tree."""
    node: Tree | None = tree
    for op in op_token_ops(token):
        node = node.left if op == "car" else node.right
        if node is None:
            raise OpNotApplicable(f"{token} walks off the tree")
    return node


OP_TOKENS = _all_op_tokens()


def feasible_tokens(max_adjectives: int, frames=("active", "passive")) -> tuple[str, ...]:
    """Tokens whose path can exist under the sentence templates.

    Sentence shapes grow monotonically with adjective count, so checking a
    maximal template per frame decides feasibility; tokens whose path runs
    through the missing right child of a unary node are never applicable.
    """
    adjs = ("round", "happy", "thin", "blue")
    templates = []
    chain = Tree("AP", _unary("N", "goat"))
    for i in range(max_adjectives):
        chain = Tree("AP", _unary("ADJ", adjs[i % len(adjs)]), chain)
    np_full = Tree("NP", _unary("DET", "the"), chain)
    active, passive, _ = build_forms(np_full, np_full, "washed")
    if "active" in frames:
        templates.append(active)
    if "passive" in frames:
        templates.append(passive)
    out = []
    for token in OP_TOKENS:
        for t in templates:
            try:
                apply_op_token(token, t)
            except OpNotApplicable:
                continue
            out.append(token)
            break
    return tuple(out)


# ---------------------------------------------------------------------------
# task generation

_MAX_RETRIES = 1000


def _gen_sample(task: str, rng, split: str, split_spec: SplitSpec, lexicon: Lexicon, feasible) -> Sample:
    rng_range = split_spec.range_for(split)
    vocab = split_spec.adjective_vocab(split, lexicon)
    if task == "car_cdr_seq":
        token = feasible[rng.integers(len(feasible))]
        for _ in range(_MAX_RETRIES):
            frame = ("active", "passive")[rng.integers(2)]
            sent, _meta = _sample_sentence(rng, rng_range, vocab, lexicon, frame)
            source = Tree(token, sent.left, sent.right)
            try:
                target = apply_op_token(token, source)
            except OpNotApplicable:
                continue
            return Sample(source, target, {"token": token, "frame": frame})
        raise RuntimeError(f"could not place token {token} after {_MAX_RETRIES} tries")
    subj = sample_np(rng, rng_range, vocab, lexicon)
    obj = sample_np(rng, rng_range, vocab, lexicon)
    verb = lexicon.verbs[rng.integers(len(lexicon.verbs))]
    active, passive, logical = build_forms(subj, obj, verb)
    if task == "active_logical":
        if rng.integers(2) == 0:
            return Sample(active, logical, {"direction": "syntax_to_logical"})
        return Sample(logical, active, {"direction": "logical_to_syntax"})
    if task == "passive_logical":
        if rng.integers(2) == 0:
            return Sample(passive, logical, {"direction": "syntax_to_logical"})
        return Sample(logical, passive, {"direction": "logical_to_syntax"})
    if task == "active_passive_to_logical":
        frame = ("active", "passive")[rng.integers(2)]
        return Sample(active if frame == "active" else passive, logical, {"frame": frame})
    raise ValueError(f"unknown task {task!r}")


def generate_task(
    spec: TaskSpec, split_spec: SplitSpec, lexicon: Lexicon, seed: int
) -> dict[str, list[Sample]]:
    """Generate all five splits; every sample is validated against its
    reference program at generation time."""
    feasible = feasible_tokens(split_spec.adjectives[1]) if spec.task == "car_cdr_seq" else ()
    out: dict[str, list[Sample]] = {}
    for split_id, split in enumerate(SPLITS):
        # one independent counter-based stream per split (documented split
        # of the master seed; shards could generate in parallel)
        rng = np.random.Generator(np.random.Philox(key=[seed, 100 + split_id]))
        samples = []
        for _ in range(split_spec.sizes[split]):
            s = _gen_sample(spec.task, rng, split, split_spec, lexicon, feasible)
            program = reference_program(spec.task, s)
            if execute_instructions(program, s.source) != s.target:
                raise AssertionError("reference program does not reproduce the target")
            samples.append(s)
        out[split] = samples
    return out


# ---------------------------------------------------------------------------
# gold reference programs


def _extract(op: str, arg: int) -> Instruction:
    return Instruction(op=op, arg0=arg)


def _cons(a: int, b: int, symbol: str) -> Instruction:
    return Instruction(op="cons", arg0=a, arg1=b, symbol=symbol)


def _program_active_to_logical() -> list[Instruction]:
    return [
        _extract("car", 0),  # 1: subject
        _extract("cdr", 0),  # 2: verb phrase
        _extract("car", 2),  # 3: verb
        _extract("cdr", 2),  # 4: object
        _cons(1, 4, "ARGS"),  # 5
        _cons(3, 5, "LF"),  # 6
    ]


def _program_logical_to_active() -> list[Instruction]:
    return [
        _extract("car", 0),  # 1: verb
        _extract("cdr", 0),  # 2: argument pair
        _extract("car", 2),  # 3: subject
        _extract("cdr", 2),  # 4: object
        _cons(1, 4, "VP"),  # 5
        _cons(3, 5, "S"),  # 6
    ]


def _program_passive_to_logical() -> list[Instruction]:
    return [
        _extract("car", 0),  # 1: object (fronted)
        _extract("cdr", 0),  # 2: verb phrase
        _extract("cdr", 2),  # 3: inner verb phrase
        _extract("car", 3),  # 4: verb
        _extract("cdr", 3),  # 5: by-phrase
        _extract("cdr", 5),  # 6: subject
        _cons(6, 1, "ARGS"),  # 7
        _cons(4, 7, "LF"),  # 8
    ]


def _program_logical_to_passive() -> list[Instruction]:
    # Slots 5-9 manufacture the function words: cdr of the unary verb node
    # yields the empty tree, and cons over empty arguments writes a bare
    # word at the root.
    return [
        _extract("car", 0),  # 1: verb
        _extract("cdr", 0),  # 2: argument pair
        _extract("car", 2),  # 3: subject
        _extract("cdr", 2),  # 4: object
        _extract("cdr", 1),  # 5: empty tree
        _cons(5, 5, "was"),  # 6
        _cons(6, 5, "AUXPS"),  # 7
        _cons(5, 5, "by"),  # 8
        _cons(8, 5, "PPS"),  # 9
        _cons(9, 3, "PPPS"),  # 10
        _cons(1, 10, "VPPS"),  # 11
        _cons(7, 11, "VP"),  # 12
        _cons(4, 12, "S"),  # 13
    ]


def reference_program(task: str, sample: Sample) -> list[Instruction]:
    """A discrete instruction sequence mapping source to target exactly.

    Dispatch reads the source tree itself, so any well-formed sample of the
    task works regardless of metadata.
    """
    root = sample.source.label
    if task == "car_cdr_seq":
        ops = op_token_ops(root)
        return [_extract(op, i) for i, op in enumerate(ops)]
    if task == "active_logical":
        return _program_active_to_logical() if root == "S" else _program_logical_to_active()
    if task == "passive_logical":
        return _program_passive_to_logical() if root == "S" else _program_logical_to_passive()
    if task == "active_passive_to_logical":
        inner = sample.source.right.left
        if inner is not None and inner.label == "AUXPS":
            return _program_passive_to_logical()
        return _program_active_to_logical()
    raise ValueError(f"unknown task {task!r}")


def min_steps(task: str, train_samples: list[Sample]) -> int:
    """X: the longest reference program over the training distribution."""
    return max(len(reference_program(task, s)) for s in train_samples)


def pad_program(program: list[Instruction], total_steps: int) -> list[Instruction]:
    """Stall to a fixed step count by re-deriving the final tree."""
    if not program or total_steps < len(program):
        raise ValueError("cannot pad an empty or over-long program")
    out = list(program)
    while len(out) < total_steps:
        out.append(out[-1])
    return out


# ---------------------------------------------------------------------------
# vocabulary and files


def task_vocabulary(task: str, lexicon: Lexicon) -> tuple[str, ...]:
    """Deterministic symbol order: structural labels, then word lists.

    The union covers every split, including the OOD adjectives: fillers for
    unseen words must already exist for zero-shot lexical generalization.
    """
    syms: list[str] = []
    if task == "car_cdr_seq":
        syms += list(OP_TOKENS)
        syms += [s for s in BASE_NONTERMINALS if s != "S"]
        syms += list(PASSIVE_NONTERMINALS) + list(FUNCTION_WORDS)
    elif task == "active_logical":
        syms += list(BASE_NONTERMINALS) + list(LOGICAL_NONTERMINALS)
    else:
        syms += list(BASE_NONTERMINALS) + list(LOGICAL_NONTERMINALS)
        syms += list(PASSIVE_NONTERMINALS) + list(FUNCTION_WORDS)
    syms += list(lexicon.determiners) + list(lexicon.nouns) + list(lexicon.verbs)
    syms += list(lexicon.adjectives_train) + list(lexicon.adjectives_ood)
    return tuple(syms)


def _tree_symbols(t: Tree, acc: set) -> None:
    acc.add(t.label)
    if t.left is not None:
        _tree_symbols(t.left, acc)
    if t.right is not None:
        _tree_symbols(t.right, acc)


def write_splits(
    task: str,
    samples: dict[str, list[Sample]],
    out_dir: str | Path,
    lexicon: Lexicon,
    seed: int,
    split_spec: SplitSpec,
) -> dict:
    """Write the five jsonl files plus vocab.json and manifest.json."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    checksums = {}
    depth_stats = {}
    split_symbol_counts = {}
    for split in SPLITS:
        path = out / f"{split}.jsonl"
        seen: set[str] = set()
        max_levels = 0
        with open(path, "w") as f:
            for s in samples[split]:
                rec = {"source": unparse(s.source), "target": unparse(s.target), "meta": s.meta}
                f.write(json.dumps(rec, sort_keys=True, separators=(",", ":")) + "\n")
                _tree_symbols(s.source, seen)
                _tree_symbols(s.target, seen)
                max_levels = max(max_levels, levels(s.source), levels(s.target))
        checksums[path.name] = _sha256(path)
        depth_stats[split] = max_levels
        split_symbol_counts[split] = len(seen)

    vocab = task_vocabulary(task, lexicon)
    vocab_payload = {"symbols": list(vocab), "counts": split_symbol_counts}
    vocab_path = out / "vocab.json"
    vocab_path.write_text(json.dumps(vocab_payload, sort_keys=True, indent=1) + "\n")
    checksums[vocab_path.name] = _sha256(vocab_path)

    x = min_steps(task, samples["train"])
    manifest = {
        "format_version": 1,
        "task": task,
        "seed": seed,
        "spec": {
            "sizes": split_spec.sizes,
            "adjectives": list(split_spec.adjectives),
            "adjectives_ood": list(split_spec.adjectives_ood),
        },
        "lexicon": {
            "determiners": list(lexicon.determiners),
            "nouns": list(lexicon.nouns),
            "verbs": list(lexicon.verbs),
            "adjectives_train": list(lexicon.adjectives_train),
            "adjectives_ood": list(lexicon.adjectives_ood),
        },
        "depth": depth_stats,
        "min_steps": x,
        "feasible_tokens": list(feasible_tokens(split_spec.adjectives[1]))
        if task == "car_cdr_seq"
        else [],
        "checksums": checksums,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=1) + "\n")
    return manifest


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    h.update(path.read_bytes())
    return h.hexdigest()


def load_split(path: str | Path) -> list[Sample]:
    samples = []
    with open(path) as f:
        for line in f:
            rec = json.loads(line)
            samples.append(Sample(parse(rec["source"]), parse(rec["target"]), rec.get("meta", {})))
    return samples


@dataclass
class TaskData:
    task: str
    splits: dict[str, list[Sample]]
    symbols: tuple[str, ...]
    depth_limit: int  # max levels over all splits, per the depth tables
    min_steps: int
    manifest: dict


def load_task(data_dir: str | Path) -> TaskData:
    """Load a generated dataset directory back into memory."""
    d = Path(data_dir)
    try:
        manifest = json.loads((d / "manifest.json").read_text())
        vocab = json.loads((d / "vocab.json").read_text())
        splits = {split: load_split(d / f"{split}.jsonl") for split in SPLITS}
    except FileNotFoundError as e:
        raise FileNotFoundError(f"dataset file missing under {d}: {e.filename}") from e
    return TaskData(
        task=manifest["task"],
        splits=splits,
        symbols=tuple(vocab["symbols"]),
        depth_limit=max(manifest["depth"].values()),
        min_steps=manifest["min_steps"],
        manifest=manifest,
    )
