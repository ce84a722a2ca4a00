"""Reverse-mode autodiff over dense 2-D float matrices with exact
activation-cache accounting.

Every operation is recorded as a node on a :class:`Tape`. A node that
requires gradients retains ("saves") exactly the tensors its backward rule
will read, and the tape keeps a per-node ledger of how many scalar values
were retained. Saves that merely reference parameters or constants are
charged zero elements: those arrays are resident regardless of the backward
pass, so only forward-produced intermediates count toward the activation
cache. The ledger is a per-read sum; a tensor saved by two consumers is
charged twice (a refcount-free upper bound, deterministic for a fixed
computation).

Cache policy per primitive, as (what backward reads):
    matmul         lhs iff rhs needs grad, rhs iff lhs needs grad
    add            nothing (gradient passes through / column-sums)
    elementwise    gelu: its input; scale: nothing (constant factor)
    softmax_rows   its output, not its input
    layer_norm     normalized input, per-row inverse std, the scale vector
    select/concat  nothing (integer metadata only)
    mean_rows      nothing
    cross_entropy  the softmax probabilities (log-softmax is fused)

Nodes recorded while gradients are disabled (`with tape.no_grad(): ...`)
have ``requires_grad = False``, save nothing, and act as constants during
backward. Recording and backward are single-threaded per tape; independent
tapes are safe to use concurrently.
"""

from __future__ import annotations

import math
from contextlib import contextmanager

import numpy as np
from scipy.special import erf

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)

#: Additive pre-softmax mask value; finite (keeps matrices NaN/Inf-free)
#: but large enough that exp() underflows to exactly 0 in float32/float64.
MASK_VALUE = -1e30

LEAF_KINDS = ("param", "const", "input")


def gelu_array(x: np.ndarray) -> np.ndarray:
    """Exact (erf-based) GELU on a plain array; shared with eval paths."""
    return 0.5 * x * (1.0 + erf(x * _INV_SQRT2))


class EngineError(Exception):
    """Base class for engine failures."""


class ShapeError(EngineError):
    """Operand shapes do not conform to an op's signature."""

    def __init__(self, op: str, detail: str):
        self.op = op
        self.detail = detail
        super().__init__(f"{op}: {detail}")


class NonFiniteError(EngineError):
    """An op produced NaN or Inf."""

    def __init__(self, op: str, detail: str = ""):
        self.op = op
        super().__init__(f"{op}: non-finite output{': ' + detail if detail else ''}")


class BackwardError(EngineError):
    """Backward pass misuse (non-scalar loss, repeated backward, ...)."""


def as_matrix(data, dtype=None) -> np.ndarray:
    """Coerce to a C-contiguous 2-D float array (the engine's Matrix)."""
    arr = np.asarray(data, dtype=dtype)
    if arr.dtype not in (np.float32, np.float64):
        arr = arr.astype(np.float64)
    if arr.ndim == 1:
        arr = arr.reshape(1, -1)
    if arr.ndim != 2:
        raise ShapeError("as_matrix", f"expected 2-D data, got ndim={arr.ndim}")
    return np.ascontiguousarray(arr)


class Node:
    """One recorded operation (or leaf) on the tape.

    ``saved`` is the immutable cache ledger, a tuple of (role, element
    count charged); ``_saved_arrays`` holds the actual references and is
    released as backward consumes each node.
    """

    __slots__ = (
        "idx", "op", "value", "requires_grad", "inputs", "meta",
        "saved", "_saved_arrays", "label", "name",
    )

    def __init__(self, idx, op, value, requires_grad, inputs=(), meta=None,
                 label="", name=None):
        self.idx = idx
        self.op = op
        self.value = value
        self.requires_grad = requires_grad
        self.inputs = tuple(inputs)
        self.meta = meta or {}
        self.saved = ()
        self._saved_arrays = None
        self.label = label
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    @property
    def is_leaf(self):
        return self.op in LEAF_KINDS

    def cached_elements(self) -> int:
        return sum(count for _, count in self.saved)

    def __repr__(self):
        return (f"Node({self.idx}, {self.op}, shape={self.value.shape}, "
                f"grad={self.requires_grad})")


class Tape:
    """Ordered record of a computation, in topological order by construction.

    ``debug_cache_untracked`` exists only for the mutation-testing harness:
    when set, nodes recorded under a disabled scope still write their
    would-be saves into the ledger (values and gradients are unaffected).
    """

    def __init__(self, debug_cache_untracked: bool = False):
        self.nodes: list[Node] = []
        self._grad_stack = [True]
        self._label_stack: list[str] = []
        self._params_by_name: dict[str, Node] = {}
        self._backward_done = False
        self._leaf_grads: dict[int, np.ndarray] = {}
        self.debug_cache_untracked = debug_cache_untracked

    # ---- scopes ----------------------------------------------------------

    @property
    def grad_enabled(self) -> bool:
        return self._grad_stack[-1]

    @contextmanager
    def no_grad(self):
        self._grad_stack.append(False)
        try:
            yield self
        finally:
            self._grad_stack.pop()

    @contextmanager
    def grad_enabled_scope(self):
        self._grad_stack.append(True)
        try:
            yield self
        finally:
            self._grad_stack.pop()

    @contextmanager
    def region(self, label: str):
        """Attribute nodes recorded inside to `label` (ledger breakdowns)."""
        self._label_stack.append(label)
        try:
            yield self
        finally:
            self._label_stack.pop()

    def _label(self) -> str:
        return ".".join(self._label_stack)

    # ---- leaves ----------------------------------------------------------

    def _add_leaf(self, op, value, requires_grad, name=None) -> Node:
        node = Node(len(self.nodes), op, value, requires_grad,
                    label=self._label(), name=name)
        self.nodes.append(node)
        return node

    def param(self, name: str, value: np.ndarray, trainable: bool = True) -> Node:
        """Register a model parameter leaf; repeated requests are deduped."""
        existing = self._params_by_name.get(name)
        if existing is not None:
            return existing
        node = self._add_leaf("param", as_matrix(value), trainable, name=name)
        self._params_by_name[name] = node
        return node

    def constant(self, value) -> Node:
        return self._add_leaf("const", as_matrix(value), False)

    def input(self, value, requires_grad: bool = True) -> Node:
        arr = as_matrix(value)
        if not np.isfinite(arr).all():
            raise NonFiniteError("input")
        return self._add_leaf("input", arr, requires_grad and self.grad_enabled)

    def detach(self, node: Node) -> Node:
        """Re-enter a node's value as a constant (stop-gradient)."""
        out = self._add_leaf("const", node.value, False)
        out.meta["alias"] = True  # shares storage; not a new allocation
        return out

    # ---- recording helper ------------------------------------------------

    def _record(self, op, value, inputs, meta=None, saves=()) -> Node:
        """Append an op node; attach saves only if the node requires grad.

        `saves` is a sequence of (role, array, charged: bool) describing
        what this op's backward rule reads.
        """
        if not np.isfinite(value).all():
            raise NonFiniteError(op)
        tracked = self.grad_enabled and any(i.requires_grad for i in inputs)
        node = Node(len(self.nodes), op, value, tracked, inputs, meta,
                    label=self._label())
        if tracked:
            node._saved_arrays = [(role, arr) for role, arr, _ in saves]
            node.saved = tuple((role, arr.size if charged else 0)
                               for role, arr, charged in saves)
        elif self.debug_cache_untracked:
            node.saved = tuple((role, arr.size if charged else 0)
                               for role, arr, charged in saves)
        self.nodes.append(node)
        return node

    @staticmethod
    def _charged(node: Node) -> bool:
        # Parameters and constants are resident regardless of backward;
        # only forward-produced intermediates count as activation cache.
        return node.op not in ("param", "const")

    # ---- primitives ------------------------------------------------------

    def matmul(self, a: Node, b: Node, transpose_b: bool = False) -> Node:
        bv = b.value.T if transpose_b else b.value
        if a.value.shape[1] != bv.shape[0]:
            raise ShapeError("matmul", f"{a.value.shape} x {b.value.shape}"
                                       f"{' (transposed rhs)' if transpose_b else ''}")
        if a.value.dtype != b.value.dtype:
            raise ShapeError("matmul", f"dtype mismatch {a.value.dtype} vs {b.value.dtype}")
        out = a.value @ bv
        saves = []
        if a.requires_grad:
            saves.append(("rhs", b.value, self._charged(b)))
        if b.requires_grad:
            saves.append(("lhs", a.value, self._charged(a)))
        return self._record("matmul", out, (a, b),
                            {"transpose_b": transpose_b}, saves)

    def add(self, a: Node, b: Node) -> Node:
        """Elementwise add; `b` may be a 1-row vector broadcast over rows."""
        if b.value.shape == a.value.shape:
            broadcast = False
        elif b.value.shape == (1, a.value.shape[1]):
            broadcast = True
        else:
            raise ShapeError("add", f"{a.value.shape} + {b.value.shape}")
        out = a.value + b.value
        return self._record("add", out, (a, b), {"broadcast": broadcast})

    def scale(self, a: Node, c: float) -> Node:
        return self._record("elementwise", a.value * float(c), (a,),
                            {"fn": "scale", "c": float(c)})

    def gelu(self, a: Node) -> Node:
        x = a.value
        return self._record("elementwise", gelu_array(x), (a,), {"fn": "gelu"},
                            saves=[("input", x, self._charged(a))])

    def softmax_rows(self, a: Node) -> Node:
        z = a.value - a.value.max(axis=1, keepdims=True)
        e = np.exp(z)
        p = e / e.sum(axis=1, keepdims=True)
        return self._record("softmax_rows", p, (a,),
                            saves=[("probs", p, True)])

    def layer_norm(self, x: Node, gamma: Node, beta: Node,
                   eps: float = 1e-5) -> Node:
        d = x.value.shape[1]
        if gamma.value.shape != (1, d) or beta.value.shape != (1, d):
            raise ShapeError("layer_norm",
                             f"x {x.value.shape}, scale {gamma.value.shape}, "
                             f"shift {beta.value.shape}")
        mu = x.value.mean(axis=1, keepdims=True)
        xc = x.value - mu
        var = (xc * xc).mean(axis=1, keepdims=True)
        inv = 1.0 / np.sqrt(var + eps)
        xhat = xc * inv
        out = xhat * gamma.value + beta.value
        saves = [("normalized", xhat, True),
                 ("inv_std", inv, True),
                 ("scale", gamma.value, self._charged(gamma))]
        return self._record("layer_norm", out, (x, gamma, beta),
                            {"eps": eps}, saves)

    def select_rows(self, a: Node, idx) -> Node:
        idx = np.asarray(idx, dtype=np.intp)
        if idx.ndim != 1:
            raise ShapeError("select_rows", f"index must be 1-D, got {idx.shape}")
        if idx.size and (idx.min() < 0 or idx.max() >= a.value.shape[0]):
            raise ShapeError("select_rows",
                             f"index out of range for {a.value.shape[0]} rows")
        return self._record("select_rows", a.value[idx], (a,), {"idx": idx})

    def select_cols(self, a: Node, idx) -> Node:
        idx = np.asarray(idx, dtype=np.intp)
        if idx.ndim != 1:
            raise ShapeError("select_cols", f"index must be 1-D, got {idx.shape}")
        if idx.size and (idx.min() < 0 or idx.max() >= a.value.shape[1]):
            raise ShapeError("select_cols",
                             f"index out of range for {a.value.shape[1]} cols")
        return self._record("select_cols",
                            np.ascontiguousarray(a.value[:, idx]), (a,),
                            {"idx": idx})

    def concat_rows(self, parts: list[Node]) -> Node:
        if not parts:
            raise ShapeError("concat_rows", "no parts")
        cols = parts[0].value.shape[1]
        if any(p.value.shape[1] != cols for p in parts):
            raise ShapeError("concat_rows",
                             f"column mismatch: {[p.value.shape for p in parts]}")
        out = np.concatenate([p.value for p in parts], axis=0)
        sizes = [p.value.shape[0] for p in parts]
        return self._record("concat_rows", out, parts, {"sizes": sizes})

    def concat_cols(self, parts: list[Node]) -> Node:
        if not parts:
            raise ShapeError("concat_cols", "no parts")
        rows = parts[0].value.shape[0]
        if any(p.value.shape[0] != rows for p in parts):
            raise ShapeError("concat_cols",
                             f"row mismatch: {[p.value.shape for p in parts]}")
        out = np.concatenate([p.value for p in parts], axis=1)
        sizes = [p.value.shape[1] for p in parts]
        return self._record("concat_cols", out, parts, {"sizes": sizes})

    def mean_rows(self, a: Node) -> Node:
        n = a.value.shape[0]
        if n == 0:
            raise ShapeError("mean_rows", "empty matrix")
        return self._record("mean_rows", a.value.mean(axis=0, keepdims=True),
                            (a,), {"n": n})

    def cross_entropy(self, logits: Node, targets) -> Node:
        """Summed negative log-likelihood over rows; log-softmax is fused."""
        t = np.asarray(targets, dtype=np.intp).reshape(-1)
        m, v = logits.value.shape
        if t.shape[0] != m:
            raise ShapeError("cross_entropy",
                             f"{m} logit rows vs {t.shape[0]} targets")
        if m == 0:
            raise ShapeError("cross_entropy", "no rows")
        if t.min() < 0 or t.max() >= v:
            raise ShapeError("cross_entropy", f"target out of range for {v} classes")
        zmax = logits.value.max(axis=1, keepdims=True)
        lse = zmax + np.log(np.exp(logits.value - zmax).sum(axis=1, keepdims=True))
        picked = logits.value[np.arange(m), t].reshape(-1, 1)
        loss = np.array([[(lse - picked).sum()]], dtype=logits.value.dtype)
        probs = np.exp(logits.value - lse)
        return self._record("cross_entropy", loss, (logits,),
                            {"targets": t}, saves=[("probs", probs, True)])

    # ---- backward --------------------------------------------------------

    def backward(self, loss: Node) -> dict[str, np.ndarray]:
        """Reverse accumulation from a scalar loss node.

        Returns gradients for trainable parameters, keyed by name. Nodes
        with ``requires_grad = False`` are constants: their inputs receive
        no contribution. Gradients w.r.t. tracked non-parameter leaves are
        kept for inspection via :meth:`grad_of`.
        """
        if self._backward_done:
            raise BackwardError("backward already ran on this tape; re-record first")
        if loss.value.shape != (1, 1):
            raise BackwardError(f"loss must be 1x1, got {loss.value.shape}")
        if not loss.requires_grad:
            raise BackwardError("loss does not require grad")
        self._backward_done = True

        grads: dict[int, np.ndarray] = {
            loss.idx: np.ones((1, 1), dtype=loss.value.dtype)
        }
        store: dict[str, np.ndarray] = {}
        self._leaf_grads = {}

        for node in reversed(self.nodes):
            g = grads.pop(node.idx, None)
            if g is None or not node.requires_grad:
                continue
            if node.op == "param":
                store[node.name] = g
            elif node.op == "input":
                self._leaf_grads[node.idx] = g
            elif node.op == "const":
                pass
            else:
                self._backprop(node, g, grads)
                node._saved_arrays = None  # release the activation cache
        return store

    def grad_of(self, node: Node):
        """Gradient accumulated for a tracked input leaf (after backward)."""
        return self._leaf_grads.get(node.idx)

    @staticmethod
    def _accum(grads, node, contrib):
        if not node.requires_grad:
            return
        prev = grads.get(node.idx)
        # First write keeps the (possibly aliased) array; merging allocates.
        grads[node.idx] = contrib if prev is None else prev + contrib

    def _backprop(self, node: Node, g: np.ndarray, grads) -> None:
        op = node.op
        saved = dict(node._saved_arrays or ())
        if op == "matmul":
            a, b = node.inputs
            tb = node.meta["transpose_b"]
            if a.requires_grad:
                rhs = saved["rhs"]
                self._accum(grads, a, g @ rhs if tb else g @ rhs.T)
            if b.requires_grad:
                lhs = saved["lhs"]
                self._accum(grads, b, g.T @ lhs if tb else lhs.T @ g)
        elif op == "add":
            a, b = node.inputs
            self._accum(grads, a, g)
            if b.requires_grad:
                self._accum(grads, b,
                            g.sum(axis=0, keepdims=True) if node.meta["broadcast"] else g)
        elif op == "elementwise":
            (a,) = node.inputs
            fn = node.meta["fn"]
            if fn == "scale":
                self._accum(grads, a, g * node.meta["c"])
            elif fn == "gelu":
                x = saved["input"]
                phi = 0.5 * (1.0 + erf(x * _INV_SQRT2))
                dens = np.exp(-0.5 * x * x) * _INV_SQRT2PI
                self._accum(grads, a, g * (phi + x * dens))
            else:  # pragma: no cover - guarded at record time
                raise BackwardError(f"unknown elementwise fn {fn}")
        elif op == "softmax_rows":
            (a,) = node.inputs
            p = saved["probs"]
            dot = (g * p).sum(axis=1, keepdims=True)
            self._accum(grads, a, p * (g - dot))
        elif op == "layer_norm":
            x, gamma, beta = node.inputs
            xhat = saved["normalized"]
            inv = saved["inv_std"]
            if gamma.requires_grad:
                self._accum(grads, gamma, (g * xhat).sum(axis=0, keepdims=True))
            if beta.requires_grad:
                self._accum(grads, beta, g.sum(axis=0, keepdims=True))
            if x.requires_grad:
                gs = saved["scale"]
                dxhat = g * gs
                m1 = dxhat.mean(axis=1, keepdims=True)
                m2 = (dxhat * xhat).mean(axis=1, keepdims=True)
                self._accum(grads, x, inv * (dxhat - m1 - xhat * m2))
        elif op == "select_rows":
            (a,) = node.inputs
            da = np.zeros_like(a.value)
            np.add.at(da, node.meta["idx"], g)
            self._accum(grads, a, da)
        elif op == "select_cols":
            (a,) = node.inputs
            da = np.zeros_like(a.value)
            np.add.at(da.T, node.meta["idx"], g.T)
            self._accum(grads, a, da)
        elif op == "concat_rows":
            offset = 0
            for part, size in zip(node.inputs, node.meta["sizes"]):
                self._accum(grads, part, g[offset:offset + size])
                offset += size
        elif op == "concat_cols":
            offset = 0
            for part, size in zip(node.inputs, node.meta["sizes"]):
                self._accum(grads, part,
                            np.ascontiguousarray(g[:, offset:offset + size]))
                offset += size
        elif op == "mean_rows":
            (a,) = node.inputs
            n = node.meta["n"]
            self._accum(grads, a, np.repeat(g / n, n, axis=0))
        elif op == "cross_entropy":
            (logits,) = node.inputs
            p = saved["probs"]
            t = node.meta["targets"]
            gval = float(g[0, 0])
            dl = p * gval
            dl[np.arange(t.shape[0]), t] -= gval
            self._accum(grads, logits, dl)
        else:  # pragma: no cover
            raise BackwardError(f"no backward rule for op {op}")

    # ---- introspection ---------------------------------------------------

    def cached_activation_elements(self) -> int:
        """Sum of the per-node cache ledger (scalar element counts)."""
        return sum(node.cached_elements() for node in self.nodes)

    def live_cached_elements(self) -> int:
        """Charged elements whose arrays are still retained (pre-backward)."""
        total = 0
        for node in self.nodes:
            if node._saved_arrays is not None:
                total += node.cached_elements()
        return total

    def cache_breakdown(self) -> dict[tuple[str, str], int]:
        """Ledger grouped by (region label, op kind)."""
        out: dict[tuple[str, str], int] = {}
        for node in self.nodes:
            c = node.cached_elements()
            if c:
                key = (node.label, node.op)
                out[key] = out.get(key, 0) + c
        return out


def _fresh_saved_bytes(node: Node) -> int:
    """Bytes of backward saves that are new allocations (not references to
    an existing node output): layer_norm's normalized input and inverse
    std, and cross_entropy's probabilities. Everything else a backward rule
    reads is a reference to a node output or parameter."""
    width = node.value.itemsize
    if node.op == "layer_norm" and node.requires_grad:
        rows, cols = node.inputs[0].value.shape
        return (rows * cols + rows) * width
    if node.op == "cross_entropy" and node.requires_grad:
        return node.inputs[0].value.size * width
    return 0


def _retained_for_backward(tape: Tape) -> set[int]:
    """Node ids whose output array some backward rule will read."""
    retained: set[int] = set()
    for node in tape.nodes:
        if not node.requires_grad or node.is_leaf:
            continue
        if node.op == "matmul":
            a, b = node.inputs
            if a.requires_grad:
                retained.add(b.idx)
            if b.requires_grad:
                retained.add(a.idx)
        elif node.op == "elementwise" and node.meta.get("fn") == "gelu":
            retained.add(node.inputs[0].idx)
        elif node.op == "softmax_rows":
            retained.add(node.idx)
    return retained


def simulate_peak_bytes(tape: Tape) -> tuple[int, int]:
    """Engine-accounted live-allocation model for one tape.

    Replays the forward pass assuming a production engine frees an
    intermediate as soon as its last consumer has run, unless a backward
    rule retains it. Returns (peak bytes, bytes retained at the end of the
    forward pass). The backward phase is modeled as the retained set plus
    two transient gradient buffers of the largest node. Parameters and
    shared constants are excluded (accounted as persistent elsewhere);
    masks and other engine-built constants count until their last use.
    """
    last_use: dict[int, int] = {}
    for node in tape.nodes:
        for inp in node.inputs:
            last_use[inp.idx] = node.idx
    retained = _retained_for_backward(tape)

    def counted(n: Node) -> bool:
        if n.op == "param" or n.meta.get("alias"):
            return False
        return True

    running = 0
    peak = 0
    max_node_bytes = 0
    for node in tape.nodes:
        nbytes = node.value.size * node.value.itemsize
        max_node_bytes = max(max_node_bytes, nbytes)
        if counted(node):
            running += nbytes
        running += _fresh_saved_bytes(node)
        peak = max(peak, running)
        for inp in set(node.inputs):
            if (last_use.get(inp.idx) == node.idx and counted(inp)
                    and inp.idx not in retained):
                running -= inp.value.size * inp.value.itemsize
    retained_end = running
    peak = max(peak, retained_end + 2 * max_node_bytes)
    return peak, retained_end
