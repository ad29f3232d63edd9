"""Binary trees and the parenthesized text format used by the datasets.

Grammar: EXPR := ATOM | "(" ATOM EXPR* ")" with at most two child
expressions.  A single child attaches on the left.  "( DET ( the ) )" and
"( DET the )" denote the same tree; ``unparse`` always emits the second,
canonical form.
"""

from __future__ import annotations

from dataclasses import dataclass

__all__ = [
    "Tree",
    "ParseError",
    "parse",
    "unparse",
    "depth",
    "levels",
    "node_count",
    "car_t",
    "cdr_t",
    "cons_t",
    "iter_paths",
]


class ParseError(ValueError):
    """Malformed s-expression; ``offset`` is the byte position."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at offset {offset})")
        self.offset = offset


@dataclass(frozen=True)
class Tree:
    """A labeled binary tree node; children are optional."""

    label: str
    left: "Tree | None" = None
    right: "Tree | None" = None

    def is_leaf(self) -> bool:
        return self.left is None and self.right is None


def _tokenize(text: str):
    i, n = 0, len(text)
    while i < n:
        c = text[i]
        if c.isspace():
            i += 1
            continue
        if c in "()":
            yield c, i
            i += 1
            continue
        j = i
        while j < n and not text[j].isspace() and text[j] not in "()":
            j += 1
        yield text[i:j], i
        i = j


def parse(text: str) -> Tree:
    """Parse one well-formed expression into a Tree."""
    tokens = list(_tokenize(text))
    if not tokens:
        raise ParseError("empty input", 0)
    tree, pos = _parse_expr(tokens, 0)
    if pos != len(tokens):
        raise ParseError("trailing content after expression", tokens[pos][1])
    return tree


def _parse_expr(tokens, pos: int) -> tuple[Tree, int]:
    tok, off = tokens[pos]
    if tok == ")":
        raise ParseError("unexpected ')'", off)
    if tok != "(":
        return Tree(tok), pos + 1
    pos += 1
    if pos >= len(tokens):
        raise ParseError("unclosed '('", off)
    label, label_off = tokens[pos]
    if label in "()":
        raise ParseError("expected a label after '('", label_off)
    pos += 1
    children: list[Tree] = []
    while True:
        if pos >= len(tokens):
            raise ParseError("unclosed '('", off)
        tok, tok_off = tokens[pos]
        if tok == ")":
            pos += 1
            break
        child, pos = _parse_expr(tokens, pos)
        if len(children) == 2:
            raise ParseError("more than two children", tok_off)
        children.append(child)
    left = children[0] if children else None
    right = children[1] if len(children) > 1 else None
    return Tree(label, left, right), pos


def unparse(t: Tree) -> str:
    """Canonical single-space text form; round-trips through ``parse``."""
    if t.left is None and t.right is not None:
        raise ValueError("tree with only a right child has no text form")
    if t.is_leaf():
        return t.label
    parts = ["(", t.label]
    if t.left is not None:
        parts.append(unparse(t.left))
    if t.right is not None:
        parts.append(unparse(t.right))
    parts.append(")")
    return " ".join(parts)


def depth(t: Tree | None) -> int:
    """Longest root-to-leaf path in edges; a lone node has depth 0."""
    if t is None:
        return -1
    if t.is_leaf():
        return 0
    return 1 + max(depth(t.left), depth(t.right))


def levels(t: Tree | None) -> int:
    """Number of node levels (depth in nodes rather than edges)."""
    return depth(t) + 1


def node_count(t: Tree | None) -> int:
    if t is None:
        return 0
    return 1 + node_count(t.left) + node_count(t.right)


def car_t(t: Tree | None) -> Tree | None:
    """Symbolic left child; empty when absent."""
    return t.left if t is not None else None


def cdr_t(t: Tree | None) -> Tree | None:
    """Symbolic right child; empty when absent."""
    return t.right if t is not None else None


def cons_t(left: Tree | None, right: Tree | None, label: str) -> Tree:
    """New tree with the given root label and children."""
    return Tree(label, left, right)


def iter_paths(t: Tree | None, prefix: str = ""):
    """Yield (path, node) pairs; paths are strings over {'0','1'}."""
    if t is None:
        return
    yield prefix, t
    yield from iter_paths(t.left, prefix + "0")
    yield from iter_paths(t.right, prefix + "1")
