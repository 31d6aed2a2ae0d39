"""Partially separable energies on a mesh.

A Problem owns the flat variable vector (one n-dimensional block per vertex,
vertex-major), a list of per-element energy terms, and the machinery that
evaluates all terms and assembles the global energy, gradient, block-sparse
Hessian, and matrix-free Hessian-vector products.

Each term is a callback over one mesh element and the vertices its
neighborhood access pattern reaches. The callback is invoked on *batches* of
elements: the handles it receives carry an array of element ids (one per batch
lane) and the variable accessor hands back ActiveVec components whose fields
broadcast over the batch, so a single scalar-looking expression differentiates
every element in the batch at once. Callbacks must be pure functions of their
inputs.

Elements are processed patch-by-patch. In "deterministic" accumulation the
per-chunk contributions are merged in fixed patch order (bitwise reproducible
for any worker count); in "atomic" accumulation they are merged in completion
order, which is faster to overlap but only reproducible to rounding. Setting
the environment variable MESHGRAD_DETERMINISTIC=1 forces deterministic
accumulation regardless of what the constructor was told.
"""

from __future__ import annotations

import itertools
import os
import time
from collections import deque
from concurrent.futures import ThreadPoolExecutor, as_completed

import numpy as np

from .active import ActiveScalar, ActiveVec, project_psd
from .mesh import DEFAULT_VALENCE_CAP, Element, Mesh, Op, SOURCE_KIND

__all__ = [
    "BlockSparseMatrix",
    "EnergyTerm",
    "Problem",
    "read_matrix_market",
]

_TERM_OPS = (Op.FV, Op.EV, Op.VV, Op.V)  # neighborhoods that resolve to vertex variables


def _tree_sum(parts) -> float:
    """Pairwise reduction; summation order depends only on the list layout."""
    vals = [float(p) for p in parts]
    if not vals:
        return 0.0
    while len(vals) > 1:
        vals = [vals[i] + vals[i + 1] if i + 1 < len(vals) else vals[i] for i in range(0, len(vals), 2)]
    return vals[0]


class BlockSparseMatrix:
    """Symmetric CSR matrix of dense n x n blocks keyed by vertex pairs.

    Rows are sorted and column indices are sorted within each row; both (i, j)
    and (j, i) are stored.
    """

    def __init__(self, block_dim, num_block_rows, row_offsets, col_indices, values):
        self.block_dim = block_dim
        self.num_block_rows = num_block_rows
        self.row_offsets = row_offsets
        self.col_indices = col_indices
        self.values = values
        self._block_rows = np.repeat(np.arange(num_block_rows, dtype=np.int64), np.diff(row_offsets))

    @property
    def nnz_blocks(self) -> int:
        return len(self.col_indices)

    @property
    def nnz_scalar(self) -> int:
        return self.nnz_blocks * self.block_dim * self.block_dim

    @property
    def shape(self):
        n = self.num_block_rows * self.block_dim
        return (n, n)

    def block_index(self, i: int, j: int) -> int | None:
        lo, hi = self.row_offsets[i], self.row_offsets[i + 1]
        k = lo + np.searchsorted(self.col_indices[lo:hi], j)
        if k < hi and self.col_indices[k] == j:
            return int(k)
        return None

    def block(self, i: int, j: int) -> np.ndarray | None:
        k = self.block_index(i, j)
        return None if k is None else self.values[k]

    def block_pairs(self):
        """All stored (row, col) vertex pairs."""
        return np.stack([self._block_rows, self.col_indices], axis=1)

    def matvec(self, v: np.ndarray) -> np.ndarray:
        n = self.block_dim
        v2 = np.asarray(v, dtype=np.float64).reshape(self.num_block_rows, n)
        out = np.zeros_like(v2)
        contrib = np.einsum("bij,bj->bi", self.values, v2[self.col_indices])
        np.add.at(out, self._block_rows, contrib)
        return out.ravel()

    def to_dense(self) -> np.ndarray:
        n = self.block_dim
        size = self.num_block_rows * n
        dense = np.zeros((size, size))
        for k in range(self.nnz_blocks):
            i = self._block_rows[k]
            j = self.col_indices[k]
            dense[i * n : (i + 1) * n, j * n : (j + 1) * n] = self.values[k]
        return dense

    def diagonal_block_inverses(self) -> np.ndarray:
        """Per-row inverse diagonal blocks (identity where a row has none or
        its block is singular); used as a block-Jacobi preconditioner."""
        n = self.block_dim
        inv = np.tile(np.eye(n), (self.num_block_rows, 1, 1))
        for i in range(self.num_block_rows):
            k = self.block_index(i, i)
            if k is None:
                continue
            try:
                inv[i] = np.linalg.inv(self.values[k])
            except np.linalg.LinAlgError:
                pass
        return inv

    def write_matrix_market(self, path) -> None:
        """Coordinate format, 1-indexed, every stored entry written explicitly."""
        n = self.block_dim
        with open(path, "w") as fh:
            fh.write("%%MatrixMarket matrix coordinate real general\n")
            size = self.num_block_rows * n
            fh.write(f"{size} {size} {self.nnz_scalar}\n")
            for k in range(self.nnz_blocks):
                bi = self._block_rows[k] * n
                bj = self.col_indices[k] * n
                blk = self.values[k]
                for a in range(n):
                    for b in range(n):
                        fh.write(f"{bi + a + 1} {bj + b + 1} {blk[a, b]:.17g}\n")


def read_matrix_market(path):
    """Read a coordinate-format file written by write_matrix_market.

    Returns (num_rows, num_cols, entries) with entries as (i, j, value)
    tuples, 0-indexed.
    """
    with open(path) as fh:
        header = fh.readline()
        if not header.startswith("%%MatrixMarket matrix coordinate real"):
            raise ValueError(f"{path}: unsupported MatrixMarket header: {header.strip()}")
        line = fh.readline()
        while line.startswith("%"):
            line = fh.readline()
        rows, cols, nnz = (int(t) for t in line.split())
        entries = []
        for _ in range(nnz):
            i, j, v = fh.readline().split()
            entries.append((int(i) - 1, int(j) - 1, float(v)))
    return rows, cols, entries


class _Batch:
    """A batch of same-kind elements handed to an energy callback.

    `index` holds the global element ids, one per lane. Vertex batches also
    name the local variable slot they occupy, which is what the accessor keys
    on.
    """

    __slots__ = ("kind", "index", "slot")

    def __init__(self, kind, index, slot=None):
        self.kind = kind
        self.index = index
        self.slot = slot


class _Vars:
    __slots__ = ("slots",)

    def __init__(self, slots):
        self.slots = slots

    def __getitem__(self, batch) -> ActiveVec:
        if batch.slot is None:
            raise KeyError(f"{batch.kind.value} elements carry no variables; index with a vertex handle")
        return self.slots[batch.slot]


class _TermGroup:
    """Elements of one term that share a selection arity, sorted patch-by-patch."""

    __slots__ = ("elem_ids", "sel", "free", "gidx", "bids", "chunks")

    def __init__(self, elem_ids, sel, free, gidx, chunks):
        self.elem_ids = elem_ids
        self.sel = sel          # (M, P) global vertex id per local slot
        self.free = free        # (M, P) 1.0 where the slot's vertex is unpinned, else 0.0; None if nothing pinned
        self.gidx = gidx        # (M, K) scatter target per local variable (dump slot for pinned)
        self.bids = None        # (M, P, P) Hessian block ids, set by precompute_sparsity
        self.chunks = chunks    # list of slices, patch-aligned


class EnergyTerm:
    __slots__ = ("kind", "op", "fn", "groups")

    def __init__(self, kind: Element, op: Op, fn):
        self.kind = kind
        self.op = op
        self.fn = fn
        self.groups: list[_TermGroup] | None = None


def _patch_chunks(patches_sorted: np.ndarray, max_elems: int) -> list[slice]:
    m = len(patches_sorted)
    if m == 0:
        return []
    change = np.flatnonzero(np.diff(patches_sorted)) + 1
    bounds = np.concatenate([[0], change, [m]])
    chunks: list[slice] = []
    start = 0
    for b0, b1 in zip(bounds[:-1], bounds[1:]):
        if b1 - start > max_elems:
            if b0 > start:
                chunks.append(slice(start, b0))
                start = b0
            while b1 - start > max_elems:
                chunks.append(slice(start, start + max_elems))
                start += max_elems
    if start < m:
        chunks.append(slice(start, m))
    return chunks


class Problem:
    """Registered energy terms plus the evaluation and assembly state.

    Parameters
    ----------
    mesh : Mesh
    var_dim : variables per vertex (the block dimension n)
    with_hessian : track second derivatives in eval_terms and assemble the
        block-sparse Hessian; gradient-only problems skip all of that work
    fixed_vertices : vertex ids excluded from the unknowns. Their positions in
        `x` act as constants: their local variables are lifted passively and
        their gradient/Hessian rows are never assembled.
    accumulation : "deterministic" or "atomic" (see module docstring)
    workers : thread count for per-chunk evaluation
    """

    def __init__(self, mesh: Mesh, var_dim: int, with_hessian: bool = True,
                 fixed_vertices=(), accumulation: str = "deterministic",
                 workers: int = 1, valence_cap: int = DEFAULT_VALENCE_CAP,
                 chunk_elements: int = 4096):
        if var_dim < 1:
            raise ValueError("var_dim must be at least 1")
        if accumulation not in ("deterministic", "atomic"):
            raise ValueError(f"unknown accumulation mode {accumulation!r}")
        if os.environ.get("MESHGRAD_DETERMINISTIC") == "1":
            accumulation = "deterministic"
        self.mesh = mesh
        self.n = var_dim
        self.with_hessian = with_hessian
        self.accumulation = accumulation
        self.workers = max(1, int(workers))
        self.valence_cap = valence_cap
        self._chunk_elements = chunk_elements

        nv = mesh.num_vertices
        self._fixed = np.zeros(nv, dtype=bool)
        for v in fixed_vertices:
            self._fixed[v] = True
        self._num_dofs = var_dim * nv

        self.x = np.zeros(self._num_dofs)
        self._gpad = np.zeros(self._num_dofs + 1)  # last entry is the dump slot for pinned rows
        self.grad = self._gpad[: self._num_dofs]
        self.hess: BlockSparseMatrix | None = None
        self._hpad: np.ndarray | None = None
        self.energy: float = float("nan")

        self._terms: list[EnergyTerm] = []
        self._layout_ready = False
        self._pattern_ready = False
        self.stats = {
            "eval_terms_calls": 0, "eval_terms_ms": 0.0,
            "energy_only_calls": 0, "energy_only_ms": 0.0,
            "hvp_calls": 0, "hvp_ms": 0.0,
        }

    # registration ----------------------------------------------------------

    def add_term(self, kind: Element, op: Op, fn) -> int:
        """Register a per-element energy callback; returns the term id."""
        if SOURCE_KIND[op] is not kind:
            raise ValueError(f"{op.name} iterates over {SOURCE_KIND[op].value} elements, not {kind.value}")
        if op not in _TERM_OPS:
            raise ValueError(f"{op.name} does not resolve to vertex variables; terms support FV, EV, VV, V")
        self._terms.append(EnergyTerm(kind, op, fn))
        self._layout_ready = False
        self._pattern_ready = False
        return len(self._terms) - 1

    @property
    def num_dofs(self) -> int:
        return self._num_dofs

    @property
    def fixed_mask(self) -> np.ndarray:
        return self._fixed

    @property
    def free_dof_indices(self) -> np.ndarray:
        free_v = np.flatnonzero(~self._fixed)
        return (free_v[:, None] * self.n + np.arange(self.n)).ravel()

    # layout ------------------------------------------------------------------

    def _selection_groups(self, term: EnergyTerm):
        """Global vertex ids per local slot for every element of the term,
        grouped by arity, plus the element ids and patch of each element."""
        mesh = self.mesh
        if term.op is Op.FV:
            ids = np.arange(mesh.num_faces, dtype=np.int64)
            yield ids, mesh.faces, mesh.patch_of_face
        elif term.op is Op.EV:
            ids = np.arange(mesh.num_edges, dtype=np.int64)
            yield ids, mesh.edges, mesh.patch_of_edge
        elif term.op is Op.V:
            ids = np.arange(mesh.num_vertices, dtype=np.int64)
            yield ids, ids[:, None], mesh.patch_of_vertex
        else:  # VV: selection is the center vertex followed by its one-ring
            degs = mesh.vertex_to_vertex.degrees()
            if degs.size and degs.max() > self.valence_cap:
                worst = int(np.argmax(degs))
                raise ValueError(
                    f"vertex {worst} has valence {int(degs[worst])}, exceeding the cap {self.valence_cap}"
                )
            for d in np.unique(degs):
                ids = np.flatnonzero(degs == d).astype(np.int64)
                sel = np.empty((len(ids), 1 + int(d)), dtype=np.int64)
                sel[:, 0] = ids
                for r, v in enumerate(ids):
                    sel[r, 1:] = mesh.vertex_to_vertex[int(v)]
                yield ids, sel, mesh.patch_of_vertex

    def _ensure_layout(self):
        if self._layout_ready:
            return
        if not self._terms:
            raise ValueError("no energy terms registered")
        n = self.n
        any_fixed = bool(self._fixed.any())
        for term in self._terms:
            groups = []
            for ids, sel, patch_table in self._selection_groups(term):
                patches = patch_table[ids]
                order = np.lexsort((ids, patches))
                ids = ids[order]
                sel = np.ascontiguousarray(sel[order])
                free = None
                if any_fixed:
                    free = (~self._fixed[sel]).astype(np.float64)
                base = (sel[:, :, None] * n + np.arange(n)).reshape(len(ids), -1)
                if free is not None:
                    mask = np.repeat(free.astype(bool), n, axis=1)
                    base = np.where(mask, base, self._num_dofs)
                chunks = _patch_chunks(patches[order], self._chunk_elements)
                groups.append(_TermGroup(ids, sel, free, base, chunks))
            term.groups = groups
        self._layout_ready = True

    # sparsity ------------------------------------------------------------------

    def precompute_sparsity(self) -> BlockSparseMatrix:
        """Derive the Hessian block pattern from the registered neighborhoods
        and cache per-element scatter offsets so assembly does no searching."""
        self._ensure_layout()
        nv = self.mesh.num_vertices
        keys = []
        for term in self._terms:
            for grp in term.groups:
                a = grp.sel[:, :, None].astype(np.int64)
                b = grp.sel[:, None, :].astype(np.int64)
                pair_keys = a * nv + b
                if grp.free is not None:
                    fm = grp.free.astype(bool)
                    pair_keys = pair_keys[fm[:, :, None] & fm[:, None, :]]
                keys.append(pair_keys.ravel())
        all_keys = np.unique(np.concatenate(keys)) if keys else np.zeros(0, np.int64)
        rows = all_keys // nv
        cols = all_keys % nv
        offsets = np.zeros(nv + 1, dtype=np.int64)
        np.cumsum(np.bincount(rows, minlength=nv), out=offsets[1:])
        nnzb = len(all_keys)
        n = self.n
        self._hpad = np.zeros((nnzb + 1, n, n))
        self.hess = BlockSparseMatrix(n, nv, offsets, cols, self._hpad[:nnzb])
        for term in self._terms:
            for grp in term.groups:
                pair_keys = grp.sel[:, :, None].astype(np.int64) * nv + grp.sel[:, None, :]
                bids = np.searchsorted(all_keys, pair_keys)
                if grp.free is not None:
                    fm = grp.free.astype(bool)
                    bids = np.where(fm[:, :, None] & fm[:, None, :], bids, nnzb)
                grp.bids = bids
        self._pattern_ready = True
        return self.hess

    # evaluation ------------------------------------------------------------------

    def _lift_chunk(self, grp: _TermGroup, sl: slice, x2d: np.ndarray, mode: str):
        sel = grp.sel[sl]
        m, p = sel.shape
        n = self.n
        vals = x2d[sel]  # (m, P, n)
        if mode == "passive":
            return [ActiveVec([ActiveScalar(vals[:, q, c]) for c in range(n)]) for q in range(p)]
        k = p * n
        with_h = mode != "gradient"
        free = grp.free[sl] if grp.free is not None else None
        slots = []
        for q in range(p):
            comps = []
            for c in range(n):
                g = np.zeros((m, k))
                g[:, q * n + c] = 1.0 if free is None else free[:, q]
                comps.append(ActiveScalar(vals[:, q, c], g, 0.0 if with_h else None))
            slots.append(ActiveVec(comps))
        return slots

    def _call_term(self, term: EnergyTerm, grp: _TermGroup, sl: slice, slots) -> ActiveScalar:
        sel = grp.sel[sl]
        ids = grp.elem_ids[sl]
        if term.kind is Element.VERTEX:
            handle = _Batch(Element.VERTEX, ids, 0)
            if term.op is Op.V:
                nbrs = (handle,)
            else:
                nbrs = tuple(_Batch(Element.VERTEX, sel[:, q], q) for q in range(1, sel.shape[1]))
        else:
            handle = _Batch(term.kind, ids, None)
            nbrs = tuple(_Batch(Element.VERTEX, sel[:, q], q) for q in range(sel.shape[1]))
        return term.fn(handle, nbrs, _Vars(slots))

    def _extract(self, res: ActiveScalar, m: int, k: int, want_hess: bool, psd_floor):
        f = np.broadcast_to(np.asarray(res.value, dtype=np.float64), (m,))
        g = None
        h = None
        if res.grad is not None:
            g = np.broadcast_to(np.asarray(res.grad, dtype=np.float64), (m, k))
        if want_hess:
            if res.grad is not None and isinstance(res.hess, np.ndarray):
                h = np.broadcast_to(res.hess, (m, k, k))
            elif psd_floor is not None:
                h = np.zeros((m, k, k))
            if h is not None:
                h = 0.5 * (h + np.swapaxes(h, -1, -2))
                if psd_floor is not None:
                    # non-finite lanes would abort the eigensolver; leave them
                    # as-is so the poisoned energy surfaces at the caller
                    finite = np.isfinite(h).all(axis=(-2, -1))
                    if bool(np.all(finite)):
                        h = project_psd(h, psd_floor)
                    else:
                        h = np.array(h)
                        h[finite] = project_psd(h[finite], psd_floor)
        return f, g, h

    def _run_tasks(self, tasks, fn):
        """Yield fn(task) results, in task order for deterministic accumulation
        or completion order for atomic accumulation."""
        if self.workers <= 1 or len(tasks) <= 1:
            for t in tasks:
                yield fn(t)
            return
        with ThreadPoolExecutor(max_workers=self.workers) as ex:
            if self.accumulation == "atomic":
                futs = [ex.submit(fn, t) for t in tasks]
                for fut in as_completed(futs):
                    yield fut.result()
            else:
                window = 4 * self.workers
                it = iter(tasks)
                pending = deque(ex.submit(fn, t) for t in itertools.islice(it, window))
                while pending:
                    res = pending.popleft().result()
                    nxt = next(it, None)
                    if nxt is not None:
                        pending.append(ex.submit(fn, nxt))
                    yield res

    def _tasks(self):
        return [(term, grp, sl) for term in self._terms for grp in term.groups for sl in grp.chunks]

    def eval_terms(self, psd_floor: float | None = None) -> float:
        """Evaluate every term at the current `x`; fills `energy`, `grad`, and
        (in Hessian mode) the assembled `hess`. Previous contents are zeroed.
        `grad` and the Hessian values are reused buffers: copy them if they
        must survive the next evaluation.

        With `psd_floor` set, each element's local Hessian is eigenvalue
        clamped to at least the floor before it is scattered.
        """
        t0 = time.perf_counter()
        self._ensure_layout()
        if psd_floor is not None and not self.with_hessian:
            raise ValueError("psd_floor requires a Hessian-mode problem")
        if self.with_hessian and not self._pattern_ready:
            self.precompute_sparsity()
        self._gpad[:] = 0.0
        if self._hpad is not None:
            self._hpad[:] = 0.0
        x2d = self.x.reshape(self.mesh.num_vertices, self.n)
        mode = "hessian" if self.with_hessian else "gradient"
        n = self.n

        def compute(task):
            term, grp, sl = task
            slots = self._lift_chunk(grp, sl, x2d, mode)
            res = self._call_term(term, grp, sl, slots)
            m = sl.stop - sl.start
            p = grp.sel.shape[1]
            f, g, h = self._extract(res, m, p * n, self.with_hessian, psd_floor)
            blocks = None
            if h is not None:
                blocks = h.reshape(m, p, n, p, n).transpose(0, 1, 3, 2, 4).reshape(-1, n, n)
            return float(np.sum(f)), g, grp.gidx[sl], (grp.bids[sl].ravel() if blocks is not None else None), blocks

        partials = []
        for fsum, g, gidx, bids, blocks in self._run_tasks(self._tasks(), compute):
            partials.append(fsum)
            if g is not None:
                np.add.at(self._gpad, gidx.ravel(), g.ravel())
            if blocks is not None:
                np.add.at(self._hpad, bids, blocks)
        total = _tree_sum(partials) if self.accumulation == "deterministic" else float(np.sum(partials))
        self.energy = total
        self.stats["eval_terms_calls"] += 1
        self.stats["eval_terms_ms"] += (time.perf_counter() - t0) * 1e3
        return total

    def eval_energy_only(self, x_trial: np.ndarray) -> float:
        """Total energy at a trial state with derivative tracking disabled.

        Leaves the problem state untouched; non-finite local terms surface as
        a non-finite return value.
        """
        t0 = time.perf_counter()
        self._ensure_layout()
        x_trial = np.asarray(x_trial, dtype=np.float64)
        if x_trial.shape != (self._num_dofs,):
            raise ValueError(f"trial state must have shape ({self._num_dofs},)")
        x2d = x_trial.reshape(self.mesh.num_vertices, self.n)

        def compute(task):
            term, grp, sl = task
            slots = self._lift_chunk(grp, sl, x2d, "passive")
            res = self._call_term(term, grp, sl, slots)
            m = sl.stop - sl.start
            f = np.broadcast_to(np.asarray(res.value, dtype=np.float64), (m,))
            return float(np.sum(f))

        partials = list(self._run_tasks(self._tasks(), compute))
        total = _tree_sum(partials) if self.accumulation == "deterministic" else float(np.sum(partials))
        self.stats["energy_only_calls"] += 1
        self.stats["energy_only_ms"] += (time.perf_counter() - t0) * 1e3
        return total

    def hvp(self, x: np.ndarray, v: np.ndarray, psd_floor: float | None = None) -> np.ndarray:
        """Apply the Hessian at `x` to `v` element-by-element, never forming
        the global matrix. Components of `v` at pinned vertices are ignored.

        With `psd_floor`, each local Hessian is eigenvalue clamped before it
        is applied, matching a filtered assembly.
        """
        t0 = time.perf_counter()
        self._ensure_layout()
        x = np.asarray(x, dtype=np.float64)
        v = np.asarray(v, dtype=np.float64)
        if x.shape != (self._num_dofs,) or v.shape != (self._num_dofs,):
            raise ValueError(f"x and v must have shape ({self._num_dofs},)")
        nv = self.mesh.num_vertices
        n = self.n
        x2d = x.reshape(nv, n)
        v2d = v.reshape(nv, n)
        ypad = np.zeros(self._num_dofs + 1)

        def compute(task):
            term, grp, sl = task
            slots = self._lift_chunk(grp, sl, x2d, "hessian")
            res = self._call_term(term, grp, sl, slots)
            m = sl.stop - sl.start
            k = grp.sel.shape[1] * n
            _, _, h = self._extract(res, m, k, True, psd_floor)
            if h is None:
                return None, None
            vloc = v2d[grp.sel[sl]].reshape(m, k)
            if grp.free is not None:
                vloc = vloc * np.repeat(grp.free[sl], n, axis=1)
            y = np.einsum("mij,mj->mi", h, vloc)
            return grp.gidx[sl], y

        for gidx, y in self._run_tasks(self._tasks(), compute):
            if y is not None:
                np.add.at(ypad, gidx.ravel(), y.ravel())
        self.stats["hvp_calls"] += 1
        self.stats["hvp_ms"] += (time.perf_counter() - t0) * 1e3
        return ypad[: self._num_dofs].copy()

    # export ------------------------------------------------------------------

    def export_hessian(self, path) -> None:
        if self.hess is None or not self._pattern_ready:
            raise ValueError("no Hessian assembled")
        self.hess.write_matrix_market(path)

    def export_gradient(self, path) -> None:
        with open(path, "w") as fh:
            for g in self.grad:
                fh.write(f"{g:.17g}\n")
