"""Tensor-product embeddings of binary trees and the lifted Lisp operators.

A tree with symbols drawn from a vocabulary of size ``d_symbol`` and node
positions limited to depth ``D`` embeds as a ``d_symbol x d_role`` matrix:
the sum of outer products of one-hot symbol fillers with orthonormal role
vectors, one role per tree path (``d_role = 2^(D+1) - 1``).

car, cdr and cons become linear maps acting on the role axis.  With the
identity role basis those maps are partial permutations of heap indices,
applied here as index gathers; with a random orthonormal basis (or the
learned-maps ablation) they are dense ``d_role x d_role`` matrices.

All functions taking autodiff Tensors are differentiable; functions on
plain ndarrays serve the dataset/evaluation side.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .sexpr import Tree

__all__ = [
    "RoleBasis",
    "SymbolTable",
    "StructuralMaps",
    "DecodeReport",
    "build_role_basis",
    "make_structural_maps",
    "learned_maps_init",
    "encode_tree",
    "unbind",
    "decode_tpr",
    "decode_report",
    "occupancy_grid",
    "trees_match",
    "apply_car",
    "apply_cdr",
    "apply_cons",
    "blend_arguments",
    "interpreter_step",
    "run_program_np",
]

MAX_DEPTH = 14

# heap indexing: root = 0, left(i) = 2i+1, right(i) = 2i+2


def path_to_index(path: str) -> int:
    i = 0
    for c in path:
        i = 2 * i + 1 + (c == "1")
    return i


def index_depth(i: int) -> int:
    d = 0
    while i > 0:
        i = (i - 1) // 2
        d += 1
    return d


@dataclass(frozen=True)
class RoleBasis:
    """Orthonormal role vectors for every tree path of depth <= D.

    ``R[:, i]`` is the role vector of heap index i.  Identity mode keeps R
    implicit (the standard basis) so deep role spaces stay cheap.
    """

    depth_limit: int
    d_role: int
    mode: str
    R: np.ndarray | None  # None means identity

    def role(self, path: str) -> np.ndarray:
        i = path_to_index(path)
        if i >= self.d_role:
            raise ValueError(f"path {path!r} exceeds depth limit {self.depth_limit}")
        if self.R is None:
            v = np.zeros(self.d_role)
            v[i] = 1.0
            return v
        return self.R[:, i].copy()

    def to_role_coords(self, M: np.ndarray) -> np.ndarray:
        """Project filler content onto each role: column i is M @ r_i."""
        return M if self.R is None else M @ self.R

    def from_role_coords(self, C: np.ndarray) -> np.ndarray:
        return C if self.R is None else C @ self.R.T


def build_role_basis(depth_limit: int, mode: str = "identity", seed: int = 0) -> RoleBasis:
    if not (1 <= depth_limit <= MAX_DEPTH):
        raise ValueError(f"depth limit must lie in [1, {MAX_DEPTH}], got {depth_limit}")
    d_role = 2 ** (depth_limit + 1) - 1
    if mode == "identity":
        return RoleBasis(depth_limit, d_role, mode, None)
    if mode == "random_orthonormal":
        rng = np.random.Generator(np.random.Philox(key=[seed, 0]))
        q, r = np.linalg.qr(rng.standard_normal((d_role, d_role)))
        q = q * np.sign(np.diag(r))  # fix the sign ambiguity deterministically
        return RoleBasis(depth_limit, d_role, mode, q)
    raise ValueError(f"unknown basis mode {mode!r}")


@dataclass(frozen=True)
class SymbolTable:
    """Ordered vocabulary with one-hot filler embeddings."""

    symbols: tuple[str, ...]
    index: dict[str, int] = field(repr=False)

    @classmethod
    def from_symbols(cls, symbols) -> "SymbolTable":
        syms = tuple(symbols)
        if len(set(syms)) != len(syms):
            raise ValueError("symbols must be unique")
        return cls(syms, {s: i for i, s in enumerate(syms)})

    @property
    def d_symbol(self) -> int:
        return len(self.symbols)

    def onehot(self, label: str) -> np.ndarray:
        v = np.zeros(len(self.symbols))
        try:
            v[self.index[label]] = 1.0
        except KeyError:
            raise KeyError(f"unknown symbol {label!r}") from None
        return v


# ---------------------------------------------------------------------------
# encoding / decoding


def encode_tree(t: Tree | None, basis: RoleBasis, table: SymbolTable) -> np.ndarray:
    """Embed a tree as a d_symbol x d_role matrix; None encodes as zeros."""
    C = np.zeros((table.d_symbol, basis.d_role))
    _fill(t, 0, C, basis, table)
    return basis.from_role_coords(C)


def _fill(t: Tree | None, idx: int, C: np.ndarray, basis: RoleBasis, table: SymbolTable) -> None:
    if t is None:
        return
    if idx >= basis.d_role:
        raise ValueError(f"tree exceeds depth limit {basis.depth_limit}")
    try:
        C[table.index[t.label], idx] = 1.0
    except KeyError:
        raise KeyError(f"unknown symbol {t.label!r}") from None
    _fill(t.left, 2 * idx + 1, C, basis, table)
    _fill(t.right, 2 * idx + 2, C, basis, table)


def unbind(T: np.ndarray, path: str, basis: RoleBasis) -> np.ndarray:
    """Filler content at a path: T @ r_path."""
    if len(path) > basis.depth_limit:
        raise ValueError(f"path {path!r} exceeds depth limit {basis.depth_limit}")
    if basis.R is None:
        return T[:, path_to_index(path)].copy()
    return T @ basis.R[:, path_to_index(path)]


@dataclass
class DecodeReport:
    tree: Tree | None
    orphaned: int  # occupied roles dropped because an ancestor was empty


def decode_report(
    T: np.ndarray, basis: RoleBasis, table: SymbolTable, tau: float = 0.5
) -> DecodeReport:
    """Threshold each role's filler and rebuild the tree top-down.

    A role is occupied when its strongest symbol reaches ``tau``; occupied
    roles below an empty ancestor are dropped and counted.
    """
    if not (0.0 < tau <= 1.0):
        raise ValueError("tau must lie in (0, 1]")
    C = basis.to_role_coords(T)
    occupied = C.max(axis=0) >= tau
    labels = C.argmax(axis=0)
    orphans = 0

    def build(idx: int) -> Tree | None:
        if idx >= basis.d_role or not occupied[idx]:
            return None
        left = build(2 * idx + 1)
        right = build(2 * idx + 2)
        return Tree(table.symbols[labels[idx]], left, right)

    tree = build(0)
    if occupied.any():
        reachable = np.zeros(basis.d_role, dtype=bool)
        if occupied[0]:
            reachable[0] = True
            for i in range(1, basis.d_role):
                reachable[i] = occupied[i] and reachable[(i - 1) // 2]
        orphans = int(occupied.sum() - reachable.sum())
    return DecodeReport(tree, orphans)


def decode_tpr(T: np.ndarray, basis: RoleBasis, table: SymbolTable, tau: float = 0.5) -> Tree | None:
    return decode_report(T, basis, table, tau).tree


def occupancy_grid(
    T: np.ndarray, basis: RoleBasis, tau: float = 0.5
) -> tuple[np.ndarray, np.ndarray]:
    """(occupied mask, argmax label index) per role, without tree rebuilding."""
    C = basis.to_role_coords(T)
    return C.max(axis=0) >= tau, C.argmax(axis=0)


def tree_occupancy(t: Tree | None, basis: RoleBasis, table: SymbolTable) -> tuple[np.ndarray, np.ndarray]:
    occ = np.zeros(basis.d_role, dtype=bool)
    lab = np.zeros(basis.d_role, dtype=np.int64)
    for path, node in _walk(t, 0):
        occ[path] = True
        lab[path] = table.index[node.label]
    return occ, lab


def _walk(t: Tree | None, idx: int):
    if t is None:
        return
    yield idx, t
    yield from _walk(t.left, 2 * idx + 1)
    yield from _walk(t.right, 2 * idx + 2)


def trees_match(
    T: np.ndarray, target: Tree | None, basis: RoleBasis, table: SymbolTable, tau: float = 0.5
) -> bool:
    """Exact structural match: identical occupancy and labels at every role."""
    occ, lab = occupancy_grid(T, basis, tau)
    t_occ, t_lab = tree_occupancy(target, basis, table)
    return bool((occ == t_occ).all() and (lab[t_occ] == t_lab[t_occ]).all())


# ---------------------------------------------------------------------------
# structural maps


@dataclass
class StructuralMaps:
    """The four lifted tree operators plus the root role vector.

    ``kind`` is "index" (identity basis, gather-based), "dense" (explicit
    matrices for a rotated basis) or "learned" (trainable dense matrices).
    Dense matrices are stored as autodiff Tensors; in the learned case they
    require gradients.
    """

    d_role: int
    depth_limit: int
    kind: str
    r_root: np.ndarray
    # index form: precompiled partial permutations of the role axis
    car_src: ad.ShiftIndex | None = None
    cdr_src: ad.ShiftIndex | None = None
    cons0_src: ad.ShiftIndex | None = None
    cons1_src: ad.ShiftIndex | None = None
    # dense form
    car_m: Tensor | None = None
    cdr_m: Tensor | None = None
    cons0_m: Tensor | None = None
    cons1_m: Tensor | None = None

    def trainable(self) -> dict[str, Tensor]:
        if self.kind != "learned":
            return {}
        return {
            "maps.car": self.car_m,
            "maps.cdr": self.cdr_m,
            "maps.cons0": self.cons0_m,
            "maps.cons1": self.cons1_m,
        }

    # numpy-side application, used by the symbolic/evaluation path
    def car_np(self, T: np.ndarray) -> np.ndarray:
        return self._apply_np(T, self.car_src, self.car_m)

    def cdr_np(self, T: np.ndarray) -> np.ndarray:
        return self._apply_np(T, self.cdr_src, self.cdr_m)

    def cons_np(self, T0: np.ndarray, T1: np.ndarray, s: np.ndarray) -> np.ndarray:
        out = self._apply_np(T0, self.cons0_src, self.cons0_m)
        out = out + self._apply_np(T1, self.cons1_src, self.cons1_m)
        return out + np.outer(s, self.r_root)

    @staticmethod
    def _apply_np(T: np.ndarray, shift: "ad.ShiftIndex | None", m: Tensor | None) -> np.ndarray:
        if shift is not None:
            out = T[..., shift.src_clipped]
            if shift.src_mask is not None:
                out *= shift.src_mask
            return out
        return T @ m.data.T


def _heap_children(d_role: int) -> tuple[np.ndarray, np.ndarray]:
    idx = np.arange(d_role)
    left = 2 * idx + 1
    right = 2 * idx + 2
    left[left >= d_role] = -1
    right[right >= d_role] = -1
    return left, right


def _heap_parent_maps(d_role: int) -> tuple[np.ndarray, np.ndarray]:
    cons0 = np.full(d_role, -1, dtype=np.int64)
    cons1 = np.full(d_role, -1, dtype=np.int64)
    for i in range(1, d_role):
        if i % 2 == 1:
            cons0[i] = (i - 1) // 2
        else:
            cons1[i] = (i - 2) // 2
    return cons0, cons1


def make_structural_maps(basis: RoleBasis) -> StructuralMaps:
    """Precompute car/cdr/cons from the role basis.

    car moves every filler in the left subtree up one level and zeroes the
    rest; cons pushes a whole tree down into a child position, annihilating
    fillers already at the depth limit.
    """
    d = basis.d_role
    car_src, cdr_src = _heap_children(d)
    cons0_src, cons1_src = _heap_parent_maps(d)
    root = np.zeros(d)
    root[0] = 1.0
    if basis.R is None:
        return StructuralMaps(
            d_role=d,
            depth_limit=basis.depth_limit,
            kind="index",
            r_root=root,
            car_src=ad.ShiftIndex(car_src),
            cdr_src=ad.ShiftIndex(cdr_src),
            cons0_src=ad.ShiftIndex(cons0_src),
            cons1_src=ad.ShiftIndex(cons1_src),
        )
    car_id = _src_to_matrix(car_src, d)
    cdr_id = _src_to_matrix(cdr_src, d)
    R = basis.R
    return StructuralMaps(
        d_role=d,
        depth_limit=basis.depth_limit,
        kind="dense",
        r_root=R @ root,
        car_m=ad.constant(R @ car_id @ R.T),
        cdr_m=ad.constant(R @ cdr_id @ R.T),
        cons0_m=ad.constant(R @ car_id.T @ R.T),
        cons1_m=ad.constant(R @ cdr_id.T @ R.T),
    )


def _src_to_matrix(src: np.ndarray, d: int) -> np.ndarray:
    m = np.zeros((d, d))
    for j, s in enumerate(src):
        if s >= 0:
            m[j, s] = 1.0
    return m


def learned_maps_init(basis: RoleBasis, seed: int) -> StructuralMaps:
    """Random trainable replacements for the four operator matrices."""
    d = basis.d_role
    rng = np.random.Generator(np.random.Philox(key=[seed, 1]))
    std = 1.0 / np.sqrt(d)
    root = np.zeros(d)
    root[0] = 1.0
    if basis.R is not None:
        root = basis.R @ root
    mats = [ad.tensor(rng.standard_normal((d, d)) * std, requires_grad=True) for _ in range(4)]
    return StructuralMaps(
        d_role=d,
        depth_limit=basis.depth_limit,
        kind="learned",
        r_root=root,
        car_m=mats[0],
        cdr_m=mats[1],
        cons0_m=mats[2],
        cons1_m=mats[3],
    )


# ---------------------------------------------------------------------------
# differentiable operator application (leading batch axes pass through)


def _apply_map(T: Tensor, shift: "ad.ShiftIndex | None", m: Tensor | None) -> Tensor:
    if shift is not None:
        return ad.role_shift(T, shift)
    if T.ndim == 2:
        return ad.matmul(T, ad.transpose(m))
    b, s, r = T.shape
    flat = ad.reshape(T, (b * s, r))
    out = ad.matmul(flat, ad.transpose(m))
    return ad.reshape(out, (b, s, r))


def apply_car(T: Tensor, maps: StructuralMaps) -> Tensor:
    return _apply_map(T, maps.car_src, maps.car_m)


def apply_cdr(T: Tensor, maps: StructuralMaps) -> Tensor:
    return _apply_map(T, maps.cdr_src, maps.cdr_m)


def apply_cons(T0: Tensor, T1: Tensor, s: Tensor, maps: StructuralMaps) -> Tensor:
    """cons embedding: push T0/T1 into child position, write s at the root.

    ``s`` has shape (d_symbol,) or (B, 1, d_symbol).
    """
    out = ad.add(_apply_map(T0, maps.cons0_src, maps.cons0_m), _apply_map(T1, maps.cons1_src, maps.cons1_m))
    return ad.add(out, _root_outer(s, maps, out.shape))


def _root_outer(s: Tensor, maps: StructuralMaps, out_shape) -> Tensor:
    root_row = ad.constant(maps.r_root[None, :])
    if s.ndim == 1:
        col = ad.reshape(s, (len(s.data), 1))
        return ad.matmul(col, root_row)
    b, _, d_symbol = s.shape
    col = ad.reshape(s, (b * d_symbol, 1))
    out = ad.matmul(col, root_row)
    return ad.reshape(out, (b, d_symbol, maps.d_role))


_SIMPLEX_ATOL = 1e-9


def blend_arguments(memory: list[Tensor], a: Tensor) -> tuple[Tensor, Tensor, Tensor, Tensor]:
    """Convex combinations of memory slots, one per operator argument.

    ``memory`` holds m tensors of shape (B, d_symbol, d_role) (or 2-D,
    treated as a batch of one); ``a`` has shape (B, m, 4) / (m, 4) and each
    column must be a probability vector over the m slots.  Returns the
    car, cdr, cons-left and cons-right arguments.
    """
    m = len(memory)
    if a.shape[-2] != m:
        raise ValueError(f"weight rows ({a.shape[-2]}) must match memory size ({m})")
    sums = a.data.sum(axis=-2)
    if not np.allclose(sums, 1.0, atol=_SIMPLEX_ATOL, rtol=0.0) or (a.data < -_SIMPLEX_ATOL).any():
        raise ValueError("argument weights must form probability vectors over memory")
    unbatched = memory[0].ndim == 2
    if unbatched:
        d_symbol, d_role = memory[0].shape
        memory = [ad.reshape(t, (1, d_symbol, d_role)) for t in memory]
        a = ad.reshape(a, (1, m, 4))
    b, d_symbol, d_role = memory[0].shape
    stack = ad.concat([ad.reshape(t, (b, 1, d_symbol * d_role)) for t in memory], axis=1)
    rows = ad.swap_axes(a, 1, 2)  # (B, 4, m)
    mixed = ad.bmm(rows, stack)  # one fused product covers all four arguments
    out = []
    for k in range(4):
        piece = ad.narrow(mixed, 1, k, 1)
        shape = (d_symbol, d_role) if unbatched else (b, d_symbol, d_role)
        out.append(ad.reshape(piece, shape))
    return tuple(out)


def interpreter_step(w: Tensor, T4, s: Tensor, maps: StructuralMaps) -> Tensor:
    """One differentiable machine step: blend car, cdr and cons outputs.

    ``w`` holds the three operation weights (shape (3,) or (B, 1, 3)) and
    must sum to one; ``T4`` holds the four argument tensors; ``s`` is the
    new root symbol ((d_symbol,) or (B, 1, d_symbol)).
    """
    sums = w.data.sum(axis=-1)
    if not np.allclose(sums, 1.0, atol=_SIMPLEX_ATOL, rtol=0.0) or (w.data < -_SIMPLEX_ATOL).any():
        raise ValueError("operation weights must form a probability vector")
    t_car, t_cdr, t_cons0, t_cons1 = T4
    car_out = apply_car(t_car, maps)
    cdr_out = apply_cdr(t_cdr, maps)
    cons_out = apply_cons(t_cons0, t_cons1, s, maps)
    axis = w.ndim - 1
    if w.ndim == 1:
        parts = [ad.reshape(ad.narrow(w, axis, k, 1), ()) for k in range(3)]
    else:
        parts = [ad.reshape(ad.narrow(w, axis, k, 1), (w.shape[0], 1, 1)) for k in range(3)]
    out = ad.bmul(car_out, parts[0])
    out = ad.add(out, ad.bmul(cdr_out, parts[1]))
    return ad.add(out, ad.bmul(cons_out, parts[2]))


# ---------------------------------------------------------------------------
# discrete program execution in TPR space (for gold-trace injection)


def run_program_np(
    instructions,
    input_tpr: np.ndarray,
    maps: StructuralMaps,
    table: SymbolTable,
) -> np.ndarray:
    """Execute a discrete instruction list over TPR memory with numpy."""
    mem = [input_tpr]
    for ins in instructions:
        if ins.op == "car":
            mem.append(maps.car_np(mem[ins.arg0]))
        elif ins.op == "cdr":
            mem.append(maps.cdr_np(mem[ins.arg0]))
        elif ins.op == "cons":
            mem.append(maps.cons_np(mem[ins.arg0], mem[ins.arg1], table.onehot(ins.symbol)))
        else:
            raise ValueError(f"unknown op {ins.op!r}")
    return mem[-1]
