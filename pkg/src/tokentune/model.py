"""Transformer encoder/decoder built from tape primitives.

Pre-norm residual blocks with GELU feed-forward, learned absolute position
embeddings indexed by each token's original position id (so rows can be
stored in any order without changing values), multi-head attention with
additive masks, and either a classifier head (one hidden layer MLP over a
mean-pooled representation) or a tied-nothing language-model projection.

The same on-tape builders serve the plain pipeline and the token-selective
pipeline, which keeps the two numerically identical when the selection
covers every position.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .config import ModelConfig
from .engine import MASK_VALUE, Node, Tape
from .engine import gelu_array

INIT_STD = 0.02


class ModelError(ValueError):
    pass


@dataclass
class Parameter:
    value: np.ndarray
    frozen: bool = False

    @property
    def shape(self):
        return self.value.shape


@dataclass
class TokenSequence:
    """Token ids with explicit original positions and a padding mask."""

    ids: np.ndarray
    positions: np.ndarray
    pad_mask: np.ndarray  # True = real token

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.intp)
        self.positions = np.asarray(self.positions, dtype=np.intp)
        self.pad_mask = np.asarray(self.pad_mask, dtype=bool)
        if not (len(self.ids) == len(self.positions) == len(self.pad_mask)):
            raise ModelError("ids, positions, pad_mask must have equal length")

    @classmethod
    def from_ids(cls, ids, pad_mask=None) -> "TokenSequence":
        ids = np.asarray(ids, dtype=np.intp)
        if pad_mask is None:
            pad_mask = np.ones(len(ids), dtype=bool)
        return cls(ids=ids, positions=np.arange(len(ids)), pad_mask=pad_mask)

    def __len__(self):
        return len(self.ids)

    @property
    def n_unpadded(self) -> int:
        return int(self.pad_mask.sum())


class TransformerModel:
    """Named parameter store plus the config; adapters attach by name."""

    def __init__(self, config: ModelConfig, params: dict[str, Parameter]):
        self.config = config
        self.params = params
        self.adapters: dict[str, object] = {}  # target param name -> adapter

    def param(self, name: str) -> Parameter:
        if name not in self.params:
            raise ModelError(f"unknown parameter '{name}'")
        return self.params[name]

    def param_items(self):
        return list(self.params.items())

    def trainable_arrays(self) -> list[tuple[str, np.ndarray]]:
        """Arrays the optimizer may update, in a fixed order.

        Adapter factors appear as '<target>.lora_a' / '<target>.lora_b',
        matching the names the tape reports gradients under.
        """
        out = []
        for name, p in self.params.items():
            if not p.frozen:
                out.append((name, p.value))
            ad = self.adapters.get(name)
            if ad is not None:
                out.append((f"{name}.lora_a", ad.a))
                out.append((f"{name}.lora_b", ad.b))
        return out

    def total_param_elements(self) -> int:
        total = sum(p.value.size for p in self.params.values())
        for ad in self.adapters.values():
            total += ad.a.size + ad.b.size
        return total

    def trainable_elements(self) -> int:
        return sum(arr.size for _, arr in self.trainable_arrays())

    @property
    def dtype(self):
        return next(iter(self.params.values())).value.dtype

    def astype(self, dtype) -> "TransformerModel":
        clone = TransformerModel(self.config, {
            name: Parameter(p.value.astype(dtype), p.frozen)
            for name, p in self.params.items()
        })
        for target, ad in self.adapters.items():
            clone.adapters[target] = ad.astype(dtype)
        return clone


def layer_param_names(i: int) -> list[str]:
    base = f"layers.{i}"
    return [
        f"{base}.attn.w_q", f"{base}.attn.b_q",
        f"{base}.attn.w_k", f"{base}.attn.b_k",
        f"{base}.attn.w_v", f"{base}.attn.b_v",
        f"{base}.attn.w_o", f"{base}.attn.b_o",
        f"{base}.norm1.scale", f"{base}.norm1.shift",
        f"{base}.norm2.scale", f"{base}.norm2.shift",
        f"{base}.ffn.w1", f"{base}.ffn.b1",
        f"{base}.ffn.w2", f"{base}.ffn.b2",
    ]


def build_model(config: ModelConfig, seed: int = 0,
                dtype: str = "float32") -> TransformerModel:
    """Fresh model: normal(0, 0.02) weights, zero biases/shifts, unit scales."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x70CE]))
    npdtype = np.dtype(dtype)
    d, dff = config.d_model, config.d_ff

    def w(rows, cols):
        return Parameter(rng.normal(0.0, INIT_STD, (rows, cols)).astype(npdtype))

    def zeros(cols):
        return Parameter(np.zeros((1, cols), dtype=npdtype))

    def ones(cols):
        return Parameter(np.ones((1, cols), dtype=npdtype))

    params: dict[str, Parameter] = {}
    params["tok_emb"] = w(config.vocab_size, d)
    params["pos_emb"] = w(config.max_positions, d)
    for i in range(config.n_layers):
        base = f"layers.{i}"
        for suffix in ("q", "k", "v", "o"):
            params[f"{base}.attn.w_{suffix}"] = w(d, d)
            params[f"{base}.attn.b_{suffix}"] = zeros(d)
        params[f"{base}.norm1.scale"] = ones(d)
        params[f"{base}.norm1.shift"] = zeros(d)
        params[f"{base}.norm2.scale"] = ones(d)
        params[f"{base}.norm2.shift"] = zeros(d)
        params[f"{base}.ffn.w1"] = w(d, dff)
        params[f"{base}.ffn.b1"] = zeros(dff)
        params[f"{base}.ffn.w2"] = w(dff, d)
        params[f"{base}.ffn.b2"] = zeros(d)
    if config.causal:
        params["head.w_lm"] = w(d, config.vocab_size)
    else:
        params["head.w1"] = w(d, d)
        params["head.b1"] = zeros(d)
        params["head.w2"] = w(d, config.n_classes)
        params["head.b2"] = zeros(config.n_classes)
    return TransformerModel(config, params)


# ---- on-tape building blocks ----------------------------------------------

def _param_node(tape: Tape, model: TransformerModel, name: str) -> Node:
    p = model.param(name)
    return tape.param(name, p.value, trainable=not p.frozen)


def affine(tape: Tape, model: TransformerModel, x: Node, w_name: str,
           b_name: str | None = None) -> Node:
    """x @ W (+ low-rank delta if an adapter is attached) (+ bias)."""
    w = _param_node(tape, model, w_name)
    z = tape.matmul(x, w)
    ad = model.adapters.get(w_name)
    if ad is not None:
        a = tape.param(f"{w_name}.lora_a", ad.a, trainable=True)
        b = tape.param(f"{w_name}.lora_b", ad.b, trainable=True)
        delta = tape.scale(tape.matmul(tape.matmul(x, a), b), ad.scaling)
        z = tape.add(z, delta)
    if b_name is not None:
        z = tape.add(z, _param_node(tape, model, b_name))
    return z


def attention_mask(query_positions, key_positions, key_pad_mask, causal,
                   dtype) -> np.ndarray:
    """Additive mask from ORIGINAL position ids, never storage order.

    Key j is blocked for query i when the key is padding, or (causal) when
    the key's original position exceeds the query's.
    """
    qp = np.asarray(query_positions).reshape(-1, 1)
    kp = np.asarray(key_positions).reshape(1, -1)
    blocked = ~np.asarray(key_pad_mask, dtype=bool).reshape(1, -1)
    blocked = np.broadcast_to(blocked, (qp.shape[0], kp.shape[1])).copy()
    if causal:
        blocked |= kp > qp
    mask = np.zeros((qp.shape[0], kp.shape[1]), dtype=dtype)
    mask[blocked] = MASK_VALUE
    return mask


def attend_heads(tape: Tape, q: Node, k: Node, v: Node, mask: np.ndarray,
                 n_heads: int) -> Node:
    """Per-head scaled dot-product mix; shared by every attention variant."""
    d = q.value.shape[1]
    head_dim = d // n_heads
    inv_sqrt = 1.0 / math.sqrt(head_dim)
    mask_node = tape.constant(mask)
    outs = []
    for h in range(n_heads):
        cols = np.arange(h * head_dim, (h + 1) * head_dim)
        qh = tape.select_cols(q, cols)
        kh = tape.select_cols(k, cols)
        vh = tape.select_cols(v, cols)
        scores = tape.matmul(tape.scale(qh, inv_sqrt), kh, transpose_b=True)
        probs = tape.softmax_rows(tape.add(scores, mask_node))
        outs.append(tape.matmul(probs, vh))
    return tape.concat_cols(outs)


def attention(tape: Tape, model: TransformerModel, layer: int, h: Node,
              positions, pad_mask, causal: bool) -> Node:
    """Standard multi-head attention over one group of rows."""
    base = f"layers.{layer}.attn"
    q = affine(tape, model, h, f"{base}.w_q", f"{base}.b_q")
    k = affine(tape, model, h, f"{base}.w_k", f"{base}.b_k")
    v = affine(tape, model, h, f"{base}.w_v", f"{base}.b_v")
    mask = attention_mask(positions, positions, pad_mask, causal,
                          h.value.dtype)
    mixed = attend_heads(tape, q, k, v, mask, model.config.n_heads)
    return affine(tape, model, mixed, f"{base}.w_o", f"{base}.b_o")


def ffn(tape: Tape, model: TransformerModel, layer: int, h: Node) -> Node:
    base = f"layers.{layer}.ffn"
    z = affine(tape, model, h, f"{base}.w1", f"{base}.b1")
    return affine(tape, model, tape.gelu(z), f"{base}.w2", f"{base}.b2")


def norm(tape: Tape, model: TransformerModel, layer: int, which: int,
         h: Node) -> Node:
    base = f"layers.{layer}.norm{which}"
    return tape.layer_norm(h, _param_node(tape, model, f"{base}.scale"),
                           _param_node(tape, model, f"{base}.shift"))


def layer_forward(tape: Tape, model: TransformerModel, layer: int, h: Node,
                  positions, pad_mask) -> Node:
    """Pre-norm residual block: h + attn(norm1(h)), then h + ffn(norm2(h))."""
    causal = model.config.causal
    with tape.region(f"layer.{layer}.attn"):
        att = attention(tape, model, layer, norm(tape, model, layer, 1, h),
                        positions, pad_mask, causal)
        h = tape.add(h, att)
    with tape.region(f"layer.{layer}.ffn"):
        f = ffn(tape, model, layer, norm(tape, model, layer, 2, h))
        h = tape.add(h, f)
    return h


def embed(tape: Tape, model: TransformerModel, seq: TokenSequence) -> Node:
    cfg = model.config
    if len(seq) and (seq.ids.min() < 0 or seq.ids.max() >= cfg.vocab_size):
        raise ModelError(f"token id out of range for vocab {cfg.vocab_size}")
    if len(seq) and (seq.positions.min() < 0
                     or seq.positions.max() >= cfg.max_positions):
        raise ModelError(
            f"position out of range for max_positions {cfg.max_positions}")
    with tape.region("embed"):
        tok = tape.select_rows(_param_node(tape, model, "tok_emb"), seq.ids)
        pos = tape.select_rows(_param_node(tape, model, "pos_emb"),
                               seq.positions)
        return tape.add(tok, pos)


def forward_hidden(tape: Tape, model: TransformerModel,
                   seq: TokenSequence) -> Node:
    """Plain (unsplit) forward through every layer; rows in storage order."""
    h = embed(tape, model, seq)
    for i in range(model.config.n_layers):
        h = layer_forward(tape, model, i, h, seq.positions, seq.pad_mask)
    return h


# ---- heads and losses ------------------------------------------------------

def class_logits(tape: Tape, model: TransformerModel, pooled: Node) -> Node:
    hidden = tape.gelu(affine(tape, model, pooled, "head.w1", "head.b1"))
    return affine(tape, model, hidden, "head.w2", "head.b2")


def loss_classification_rows(tape: Tape, model: TransformerModel,
                             h_rows: Node, label: int) -> Node:
    """Negative log-likelihood of `label` from mean-pooled rows."""
    n_classes = model.config.n_classes
    if not 0 <= label < n_classes:
        raise ModelError(f"label {label} out of range for {n_classes} classes")
    if h_rows.value.shape[0] < 1:
        raise ModelError("classification pooling needs at least one row")
    with tape.region("head"):
        pooled = tape.mean_rows(h_rows)
        return tape.cross_entropy(class_logits(tape, model, pooled), [label])


def lm_logits(tape: Tape, model: TransformerModel, h_rows: Node) -> Node:
    with tape.region("head"):
        return affine(tape, model, h_rows, "head.w_lm")


def loss_lm_rows(tape: Tape, model: TransformerModel, h_rows: Node,
                 targets) -> Node:
    """Summed next-token cross-entropy for the given rows."""
    targets = np.asarray(targets, dtype=np.intp)
    if targets.size == 0:
        raise ModelError("language-model loss needs at least one target row")
    logits = lm_logits(tape, model, h_rows)
    with tape.region("head"):
        return tape.cross_entropy(logits, targets)


# ---- value-level head application (evaluation paths) -----------------------

def log_softmax(values: np.ndarray) -> np.ndarray:
    zmax = values.max(axis=1, keepdims=True)
    lse = zmax + np.log(np.exp(values - zmax).sum(axis=1, keepdims=True))
    return values - lse


def _mlp_head_values(model: TransformerModel, pooled: np.ndarray) -> np.ndarray:
    h = gelu_array(pooled @ model.param("head.w1").value
                   + model.param("head.b1").value)
    return h @ model.param("head.w2").value + model.param("head.b2").value


def classify_pool_train(h_selected: np.ndarray,
                        model: TransformerModel) -> np.ndarray:
    """Class log-probabilities pooled over the selected rows only."""
    h_selected = np.asarray(h_selected)
    if h_selected.ndim != 2 or h_selected.shape[0] < 1:
        raise ModelError("need a non-empty 2-D block of selected rows")
    pooled = h_selected.mean(axis=0, keepdims=True)
    return log_softmax(_mlp_head_values(model, pooled))


def classify_pool_eval(h_all: np.ndarray, pad_mask,
                       model: TransformerModel) -> np.ndarray:
    """Class log-probabilities pooled over every unpadded row."""
    pad_mask = np.asarray(pad_mask, dtype=bool)
    if not pad_mask.any():
        raise ModelError("cannot pool: every position is padding")
    pooled = np.asarray(h_all)[pad_mask].mean(axis=0, keepdims=True)
    return log_softmax(_mlp_head_values(model, pooled))
