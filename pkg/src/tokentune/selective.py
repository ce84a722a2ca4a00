"""Token-selective forward pass: gradients flow only through chosen rows.

Hidden states are split into a selected block (tracked, activations cached)
and an unselected block recorded under a disabled-gradient scope (values
identical, nothing cached, constants during backward). Attention lets the
selected queries attend over the concatenated [unselected; selected] keys
and values, so forward values match the plain pipeline for every selection;
only gradient availability and the cache ledger change.

`inject_bug` deliberately mis-wires the pipeline for mutation testing of
the verification properties:
    track-unselected-kv      record the unselected Q/K/V affines tracked
    mask-from-storage-order  build masks from storage rows, not positions
(`cache-unselected-rows` is a tape-level ledger bug; see engine.Tape.)
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .engine import Node, Tape
from .model import (ModelError, TokenSequence, TransformerModel, affine,
                    attend_heads, attention_mask, embed,
                    loss_classification_rows, loss_lm_rows)
from .model import ffn as ffn_block
from .model import norm as norm_block
from .partition import SelectionError, TokenPartition, partition_rows

BUG_NAMES = ("track-unselected-kv", "cache-unselected-rows",
             "mask-from-storage-order")


@dataclass
class SplitHidden:
    """Hidden states split into selected / unselected row blocks."""

    h_g: Node
    h_gbar: Node | None
    positions_g: np.ndarray
    positions_gbar: np.ndarray
    restore_idx: np.ndarray

    def with_blocks(self, h_g: Node, h_gbar: Node | None) -> "SplitHidden":
        return SplitHidden(h_g, h_gbar, self.positions_g,
                           self.positions_gbar, self.restore_idx)


def split_hidden(tape: Tape, h: Node, partition: TokenPartition,
                 storage_positions=None) -> SplitHidden:
    """Select partition rows out of `h`; the unselected block is recorded
    under a disabled scope and therefore enters the graph as a constant."""
    if storage_positions is not None and h.value.shape[0] != len(storage_positions):
        raise SelectionError(
            f"matrix rows ({h.value.shape[0]}) != storage positions "
            f"({len(storage_positions)})")
    rows_sel, rows_unsel, restore_idx = partition_rows(partition,
                                                       storage_positions)
    all_rows = np.concatenate([rows_sel, rows_unsel])
    if all_rows.size and all_rows.max() >= h.value.shape[0]:
        raise SelectionError(
            f"partition refers to row {int(all_rows.max())} but the matrix "
            f"has {h.value.shape[0]} rows")
    h_g = tape.select_rows(h, rows_sel)
    h_gbar = None
    if rows_unsel.size:
        with tape.no_grad():
            h_gbar = tape.select_rows(h, rows_unsel)
    return SplitHidden(h_g, h_gbar, partition.selected.copy(),
                       partition.unselected.copy(), restore_idx)


def restore_hidden(tape: Tape, split: SplitHidden) -> Node:
    """Concatenate the blocks back into storage order (exact copy)."""
    parts = [split.h_g] + ([split.h_gbar] if split.h_gbar is not None else [])
    return tape.select_rows(tape.concat_rows(parts), split.restore_idx)


def _mask_positions(split: SplitHidden, key_positions, inject_bug):
    if inject_bug == "mask-from-storage-order":
        qpos_g = np.arange(split.positions_g.size)
        qpos_gbar = np.arange(split.positions_gbar.size)
        kpos = np.arange(len(key_positions))
        return qpos_g, qpos_gbar, kpos
    return split.positions_g, split.positions_gbar, key_positions


def tokentune_attention(tape: Tape, model: TransformerModel, layer: int,
                        split: SplitHidden, causal: bool,
                        inject_bug: str | None = None) -> SplitHidden:
    """Residual attention update; unselected K/V/queries are constants."""
    base = f"layers.{layer}.attn"
    with tape.region(f"layer.{layer}.attn"):
        g_n = norm_block(tape, model, layer, 1, split.h_g)
        q_g = affine(tape, model, g_n, f"{base}.w_q", f"{base}.b_q")
        k_g = affine(tape, model, g_n, f"{base}.w_k", f"{base}.b_k")
        v_g = affine(tape, model, g_n, f"{base}.w_v", f"{base}.b_v")

        q_gb = k_gb = v_gb = None
        if split.h_gbar is not None:
            with tape.no_grad():
                gb_n = norm_block(tape, model, layer, 1, split.h_gbar)
            if inject_bug == "track-unselected-kv":
                q_gb = affine(tape, model, gb_n, f"{base}.w_q", f"{base}.b_q")
                k_gb = affine(tape, model, gb_n, f"{base}.w_k", f"{base}.b_k")
                v_gb = affine(tape, model, gb_n, f"{base}.w_v", f"{base}.b_v")
            else:
                with tape.no_grad():
                    q_gb = affine(tape, model, gb_n, f"{base}.w_q", f"{base}.b_q")
                    k_gb = affine(tape, model, gb_n, f"{base}.w_k", f"{base}.b_k")
                    v_gb = affine(tape, model, gb_n, f"{base}.w_v", f"{base}.b_v")

        if k_gb is not None:
            keys = tape.concat_rows([k_gb, k_g])
            vals = tape.concat_rows([v_gb, v_g])
            key_positions = np.concatenate([split.positions_gbar,
                                            split.positions_g])
        else:
            keys = tape.concat_rows([k_g])
            vals = tape.concat_rows([v_g])
            key_positions = split.positions_g

        qpos_g, qpos_gbar, kpos = _mask_positions(split, key_positions,
                                                  inject_bug)
        all_real = np.ones(len(key_positions), dtype=bool)
        dtype = split.h_g.value.dtype
        n_heads = model.config.n_heads

        mask_g = attention_mask(qpos_g, kpos, all_real, causal, dtype)
        mixed_g = attend_heads(tape, q_g, keys, vals, mask_g, n_heads)
        out_g = affine(tape, model, mixed_g, f"{base}.w_o", f"{base}.b_o")
        new_g = tape.add(split.h_g, out_g)

        new_gbar = None
        if split.h_gbar is not None:
            with tape.no_grad():
                mask_gb = attention_mask(qpos_gbar, kpos, all_real, causal,
                                         dtype)
                mixed_gb = attend_heads(tape, q_gb, keys, vals, mask_gb,
                                        n_heads)
                out_gb = affine(tape, model, mixed_gb, f"{base}.w_o",
                                f"{base}.b_o")
                new_gbar = tape.add(split.h_gbar, out_gb)
    return split.with_blocks(new_g, new_gbar)


def tokentune_ffn(tape: Tape, model: TransformerModel, layer: int,
                  split: SplitHidden,
                  inject_bug: str | None = None) -> SplitHidden:
    """Residual feed-forward update; normalization follows the same split."""
    with tape.region(f"layer.{layer}.ffn"):
        f_g = ffn_block(tape, model, layer,
                        norm_block(tape, model, layer, 2, split.h_g))
        new_g = tape.add(split.h_g, f_g)
        new_gbar = None
        if split.h_gbar is not None:
            with tape.no_grad():
                f_gb = ffn_block(tape, model, layer,
                                 norm_block(tape, model, layer, 2,
                                            split.h_gbar))
                new_gbar = tape.add(split.h_gbar, f_gb)
    return split.with_blocks(new_g, new_gbar)


def tokentune_forward(tape: Tape, model: TransformerModel,
                      seq: TokenSequence, partition: TokenPartition,
                      inject_bug: str | None = None) -> SplitHidden:
    """Embed, split, then run every layer with the two-group update."""
    if inject_bug is not None and inject_bug not in BUG_NAMES:
        raise ValueError(f"unknown injected bug '{inject_bug}'")
    h = embed(tape, model, seq)
    split = split_hidden(tape, h, partition, seq.positions)
    for i in range(model.config.n_layers):
        split = tokentune_attention(tape, model, i, split,
                                    model.config.causal, inject_bug)
        split = tokentune_ffn(tape, model, i, split, inject_bug)
    return split


# ---- objectives ------------------------------------------------------------

def loss_classification(tape: Tape, model: TransformerModel,
                        split: SplitHidden, label: int) -> Node:
    """Cross-entropy on the class distribution pooled over selected rows."""
    return loss_classification_rows(tape, model, split.h_g, label)


def loss_lm(tape: Tape, model: TransformerModel, split: SplitHidden,
            targets_by_position: np.ndarray) -> tuple[Node, int]:
    """Summed next-token cross-entropy over selected rows with targets.

    `targets_by_position[p]` is the token at original position p+1, or -1
    when there is none (last row, or next token padded). A selected row
    with no target simply contributes no term. Returns (loss node, number
    of contributing rows).
    """
    targets_by_position = np.asarray(targets_by_position)
    t = targets_by_position[split.positions_g]
    valid = t >= 0
    if not valid.any():
        raise ModelError("no selected position has a next-token target")
    rows = np.flatnonzero(valid)
    h_rows = tape.select_rows(split.h_g, rows)
    return loss_lm_rows(tape, model, h_rows, t[valid]), int(rows.size)
