"""Engine-accounted memory decomposition and sweeps.

Memory is attributed from the engine's own ledgers, not process RSS: the
parameter, gradient, and optimizer-state categories come from element
counts of the model and Adam state, the activation category from the tape's
cache ledger, and the peak from a liveness replay of each recorded tape
(see engine.simulate_peak_bytes). Bytes are exact integers.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .adapters import attach
from .config import ModelConfig, TrainConfig
from .data import Example
from .model import TokenSequence, TransformerModel, build_model
from .optimize import Trainer

PROFILE_REGIMES = ("full", "tokentune", "lora", "tokentune+lora")


@dataclass
class MemoryReport:
    params_bytes: int
    grads_bytes: int
    optimizer_bytes: int
    activations_bytes: int
    peak_bytes: int
    per_layer: dict = field(default_factory=dict)
    per_op: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "params_bytes": int(self.params_bytes),
            "grads_bytes": int(self.grads_bytes),
            "optimizer_bytes": int(self.optimizer_bytes),
            "activations_bytes": int(self.activations_bytes),
            "peak_bytes": int(self.peak_bytes),
            "per_layer": {k: int(v) for k, v in sorted(self.per_layer.items())},
            "per_op": {k: int(v) for k, v in sorted(self.per_op.items())},
        }


def profile_model_config(n: int, d_model: int = 64, n_layers: int = 4,
                         n_heads: int = 8) -> ModelConfig:
    """Causal byte-vocabulary model sized for memory studies."""
    return ModelConfig(vocab_size=257, max_positions=n, d_model=d_model,
                       n_heads=n_heads, d_ff=4 * d_model, n_layers=n_layers,
                       causal=True, n_classes=None)


def build_regime_model(regime: str, cfg: ModelConfig, seed: int = 0,
                       dtype: str = "float32",
                       lora_targets=("w1", "w2"), lora_r: int = 8,
                       lora_alpha: float = 16.0) -> TransformerModel:
    model = build_model(cfg, seed=seed, dtype=dtype)
    if regime in ("lora", "tokentune+lora"):
        attach(model, lora_targets, lora_r, lora_alpha, seed=seed)
    return model


def lm_profile_batch(n: int, batch: int, seed: int = 0) -> list[Example]:
    """Deterministic random byte windows with shifted targets."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x3E3]))
    out = []
    for _ in range(batch):
        ids = rng.integers(0, 256, size=n)
        targets = np.full(n, -1, dtype=np.intp)
        targets[:-1] = ids[1:]
        out.append(Example(seq=TokenSequence.from_ids(ids), targets=targets))
    return out


def profile_step(model: TransformerModel, batch: list[Example],
                 train_cfg: TrainConfig, task_kind: str) -> MemoryReport:
    """One accounted train step (forward, backward, Adam update)."""
    trainer = Trainer(model, train_cfg, task_kind)
    per_layer: dict[str, int] = {}
    per_op: dict[str, int] = {}
    width = np.dtype(model.dtype).itemsize

    def hook(tape):
        for (label, op), count in tape.cache_breakdown().items():
            layer_key = label.split(".attn")[0].split(".ffn")[0] or "other"
            per_layer[layer_key] = per_layer.get(layer_key, 0) + count * width
            per_op[op] = per_op.get(op, 0) + count * width

    metrics = trainer.train_step(batch, tape_hook=hook)
    params_bytes = model.total_param_elements() * width
    grads_bytes = model.trainable_elements() * width
    optimizer_bytes = trainer.state.element_count() * width
    return MemoryReport(
        params_bytes=params_bytes,
        grads_bytes=grads_bytes,
        optimizer_bytes=optimizer_bytes,
        activations_bytes=metrics["cached_elements"] * width,
        peak_bytes=metrics["peak_bytes"],
        per_layer=per_layer,
        per_op=per_op,
    )


def report_from_step(model: TransformerModel, trainer: Trainer,
                     metrics: dict | None) -> dict:
    """Summary report assembled from the final training-step metrics."""
    width = np.dtype(model.dtype).itemsize
    cached = metrics["cached_elements"] if metrics else 0
    peak = metrics["peak_bytes"] if metrics else 0
    return MemoryReport(
        params_bytes=model.total_param_elements() * width,
        grads_bytes=model.trainable_elements() * width,
        optimizer_bytes=trainer.state.element_count() * width,
        activations_bytes=cached * width,
        peak_bytes=peak,
    ).to_dict()


SWEEP_COLUMNS = ("regime", "n", "k", "batch", "params_bytes", "grads_bytes",
                 "optimizer_bytes", "activations_bytes", "peak_bytes")


def sweep_report(grid, out_path=None, seed: int = 0,
                 d_model: int = 64, n_layers: int = 4,
                 dtype: str = "float32") -> list[dict]:
    """Profile every grid point {regime, n, k, batch}; k of None or n means
    no selection constraint for non-selective regimes. Writes a CSV table
    when out_path is given (header always, even for an empty grid)."""
    rows = []
    for point in grid:
        regime = point["regime"]
        if regime not in PROFILE_REGIMES:
            raise ValueError(f"unknown regime '{regime}'")
        n = int(point["n"])
        batch = int(point.get("batch", 1))
        k = point.get("k")
        cfg = profile_model_config(n, d_model=d_model, n_layers=n_layers)
        model = build_regime_model(regime, cfg, seed=seed, dtype=dtype)
        selective = regime in ("tokentune", "tokentune+lora")
        train_cfg = TrainConfig(regime=regime,
                                k=int(k) if (selective and k) else None,
                                selection_ratio=None if (k or not selective)
                                else 0.25,
                                batch_size=batch, accumulation_steps=1,
                                learning_rate=1e-3, seed=seed, dtype=dtype)
        batch_examples = lm_profile_batch(n, batch, seed=seed)
        report = profile_step(model, batch_examples, train_cfg, "lm")
        row = {"regime": regime, "n": n,
               "k": int(k) if k is not None else n, "batch": batch,
               "params_bytes": report.params_bytes,
               "grads_bytes": report.grads_bytes,
               "optimizer_bytes": report.optimizer_bytes,
               "activations_bytes": report.activations_bytes,
               "peak_bytes": report.peak_bytes}
        rows.append(row)
    if out_path is not None:
        with open(out_path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.DictWriter(fh, fieldnames=SWEEP_COLUMNS)
            writer.writeheader()
            for row in rows:
                writer.writerow(row)
    return rows
