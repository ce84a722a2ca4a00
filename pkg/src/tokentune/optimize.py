"""Adam, gradient accumulation, the training loop, and evaluation.

Every regime runs per-example tapes with gradients accumulated in a fixed
order; the optimizer applies once per accumulation window. Losses are
normalized per example (classification) or per contributing target token
(language modeling) so magnitudes stay comparable across selection sizes.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass

import numpy as np

from .config import RunConfig, TrainConfig
from .engine import Tape, simulate_peak_bytes
from .model import (TokenSequence, TransformerModel, classify_pool_eval,
                    forward_hidden, log_softmax, loss_classification_rows,
                    loss_lm_rows)
from .partition import TokenPartition, resolve_k, select_positions
from .selective import (loss_classification, loss_lm, tokentune_forward)

BETA1 = 0.9
BETA2 = 0.999
EPSILON = 1e-8

SELECTIVE_REGIMES = ("tokentune", "tokentune+lora")
ADAPTER_REGIMES = ("lora", "tokentune+lora")


class StepError(RuntimeError):
    pass


class AdamState:
    """First/second moments for every trainable array; nothing is kept for
    frozen parameters, which is what makes adapter runs cheap to optimize."""

    def __init__(self, model: TransformerModel):
        self.m = {name: np.zeros_like(arr)
                  for name, arr in model.trainable_arrays()}
        self.v = {name: np.zeros_like(arr)
                  for name, arr in model.trainable_arrays()}
        self.t = 0

    def element_count(self) -> int:
        return sum(a.size for a in self.m.values()) + \
            sum(a.size for a in self.v.values())


def adam_step(model: TransformerModel, grads: dict[str, np.ndarray],
              state: AdamState, lr: float, weight_decay: float = 0.0) -> None:
    """Bias-corrected Adam update in place; decoupled weight decay."""
    state.t += 1
    bc1 = 1.0 - BETA1 ** state.t
    bc2 = 1.0 - BETA2 ** state.t
    for name, arr in model.trainable_arrays():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(arr)
        if not np.isfinite(g).all():
            raise StepError(f"non-finite gradient for parameter '{name}'")
        if g.shape != arr.shape:
            raise StepError(f"gradient shape {g.shape} != parameter shape "
                            f"{arr.shape} for '{name}'")
        m = state.m[name]
        v = state.v[name]
        m *= BETA1
        m += (1.0 - BETA1) * g
        v *= BETA2
        v += (1.0 - BETA2) * (g * g)
        update = (m / bc1) / (np.sqrt(v / bc2) + EPSILON)
        if weight_decay:
            update = update + weight_decay * arr
        arr -= lr * update


def _derived_seed(base_seed: int, stream: int, index: int) -> int:
    ss = np.random.SeedSequence([base_seed, stream, index])
    return int(ss.generate_state(1)[0])


class Trainer:
    """Owns the optimizer state and the accumulation window."""

    def __init__(self, model: TransformerModel, cfg: TrainConfig,
                 task_kind: str):
        self.model = model
        self.cfg = cfg
        self.task_kind = task_kind
        self.state = AdamState(model)
        self.accum = {name: np.zeros_like(arr)
                      for name, arr in model.trainable_arrays()}
        self.micro_step = 0
        self.example_counter = 0
        self._window_examples = 0
        self._window_targets = 0

    @property
    def selective(self) -> bool:
        return self.cfg.regime in SELECTIVE_REGIMES

    def partition_for(self, seq: TokenSequence,
                      example_index: int) -> TokenPartition:
        """Fresh uniform selection per example, seeded from the run seed."""
        k = resolve_k(self.cfg.k, self.cfg.selection_ratio, seq.n_unpadded)
        mode = "classification" if self.task_kind == "classification" else "lm"
        seed = _derived_seed(self.cfg.seed, 0x5E7EC7, example_index)
        return select_positions(len(seq), k, mode, seq.pad_mask, seed)

    def _example_loss(self, tape: Tape, example) -> tuple[object, int]:
        """Record forward+loss for one example; returns (loss node, #terms)."""
        seq = example.seq
        if self.selective:
            partition = self.partition_for(seq, self.example_counter)
            split = tokentune_forward(tape, self.model, seq, partition)
            if self.task_kind == "classification":
                return loss_classification(tape, self.model, split,
                                           example.label), 1
            return loss_lm(tape, self.model, split, example.targets)
        h = forward_hidden(tape, self.model, seq)
        if self.task_kind == "classification":
            rows = np.flatnonzero(seq.pad_mask)
            return loss_classification_rows(
                tape, self.model, tape.select_rows(h, rows), example.label), 1
        targets = np.asarray(example.targets)
        t = targets[seq.positions]
        valid = (t >= 0) & seq.pad_mask
        rows = np.flatnonzero(valid)
        if rows.size == 0:
            raise StepError("example has no predictable positions")
        h_rows = tape.select_rows(h, rows)
        return loss_lm_rows(tape, self.model, h_rows, t[rows]), int(rows.size)

    def train_step(self, batch, tape_hook=None) -> dict:
        """One micro-batch: per-example forward/backward, ordered gradient
        accumulation, and an Adam update when the window closes."""
        if not batch:
            raise StepError("empty batch")
        t0 = time.perf_counter()
        cached_elements = 0
        peak_tape = 0
        loss_sum = 0.0
        term_sum = 0
        for i, example in enumerate(batch):
            tape = Tape()
            try:
                loss_node, n_terms = self._example_loss(tape, example)
            except Exception:
                self.example_counter += 1
                raise
            loss_value = float(loss_node.value[0, 0])
            if not np.isfinite(loss_value):
                raise StepError(f"non-finite loss at example {i} of batch "
                                f"(global example {self.example_counter})")
            grads = tape.backward(loss_node)
            for name in self.accum:
                g = grads.get(name)
                if g is not None:
                    self.accum[name] += g
            cached_elements += tape.cached_activation_elements()
            peak_tape = max(peak_tape, simulate_peak_bytes(tape)[0])
            if tape_hook is not None:
                tape_hook(tape)
            loss_sum += loss_value
            term_sum += n_terms
            self._window_examples += 1
            self._window_targets += n_terms
            self.example_counter += 1

        self.micro_step += 1
        grad_norm = 0.0
        if self.micro_step % self.cfg.accumulation_steps == 0:
            if self.task_kind == "classification":
                scale = 1.0 / self._window_examples
            else:
                scale = 1.0 / max(self._window_targets, 1)
            scaled = {name: g * scale for name, g in self.accum.items()}
            sq = 0.0
            for g in scaled.values():
                sq += float((g.astype(np.float64) ** 2).sum())
            grad_norm = float(np.sqrt(sq))
            adam_step(self.model, scaled, self.state, self.cfg.learning_rate,
                      self.cfg.weight_decay)
            for g in self.accum.values():
                g[...] = 0.0
            self._window_examples = 0
            self._window_targets = 0

        width = np.dtype(self.model.dtype).itemsize
        persistent = (self.model.total_param_elements()
                      + self.model.trainable_elements()
                      + self.state.element_count()) * width
        if self.task_kind == "classification":
            step_loss = loss_sum / len(batch)
        else:
            step_loss = loss_sum / max(term_sum, 1)
        return {
            "step": self.micro_step,
            "loss": step_loss,
            "grad_norm": grad_norm,
            "cached_elements": cached_elements,
            "peak_bytes": persistent + peak_tape,
            "wall_ms": (time.perf_counter() - t0) * 1000.0,
        }


# ---- evaluation -------------------------------------------------------------

def eval_hidden(model: TransformerModel, seq: TokenSequence) -> np.ndarray:
    """Forward values only; nothing is tracked or cached."""
    tape = Tape()
    with tape.no_grad():
        return forward_hidden(tape, model, seq).value


def evaluate(model: TransformerModel, dataset, task_kind: str) -> dict:
    """Classification accuracy (pooled over all unpadded rows) or language
    model perplexity over every predictable position; no selection."""
    if not dataset:
        raise StepError("empty evaluation dataset")
    if task_kind == "classification":
        correct = 0
        for example in dataset:
            h = eval_hidden(model, example.seq)
            logp = classify_pool_eval(h, example.seq.pad_mask, model)
            if int(np.argmax(logp[0])) == example.label:
                correct += 1
        return {"accuracy": correct / len(dataset), "n": len(dataset)}
    total_nll = 0.0
    total_terms = 0
    w_lm = model.param("head.w_lm").value
    for example in dataset:
        seq = example.seq
        h = eval_hidden(model, seq)
        t = np.asarray(example.targets)[seq.positions]
        valid = (t >= 0) & seq.pad_mask
        rows = np.flatnonzero(valid)
        if rows.size == 0:
            continue
        logp = log_softmax(h[rows].astype(np.float64) @ w_lm.astype(np.float64))
        total_nll += float(-logp[np.arange(rows.size), t[rows]].sum())
        total_terms += int(rows.size)
    if total_terms == 0:
        raise StepError("no predictable positions in evaluation dataset")
    return {"perplexity": float(np.exp(total_nll / total_terms)),
            "nll": total_nll / total_terms, "n_terms": total_terms}


# ---- full run orchestration --------------------------------------------------

@dataclass
class RunResult:
    metrics_path: str
    checkpoint_path: str
    eval_metrics: dict
    steps: int


def _epoch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xDA7A, epoch]))
    return rng.permutation(n)


def run_training(cfg: RunConfig, out_dir) -> RunResult:
    """Train per the config; writes metrics.jsonl, timings.jsonl, the final
    checkpoint, a memory report, and the resolved config into out_dir."""
    from pathlib import Path

    from . import __version__
    from .adapters import attach
    from .checkpoint import save_model
    from .data import build_task_datasets
    from .memprofile import report_from_step

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    from .model import build_model
    model = build_model(cfg.model, seed=cfg.train.seed, dtype=cfg.train.dtype)
    if cfg.train.regime in ADAPTER_REGIMES:
        attach(model, cfg.train.lora_targets, cfg.train.lora_r,
               cfg.train.lora_alpha, seed=cfg.train.seed)

    train_set, test_set = build_task_datasets(cfg.task, cfg.model)
    task_kind = cfg.task.kind
    trainer = Trainer(model, cfg.train, task_kind)

    resolved = cfg.to_dict()
    resolved["code_version"] = __version__
    (out / "config.json").write_text(json.dumps(resolved, indent=2) + "\n",
                                     encoding="utf-8")

    metrics_path = out / "metrics.jsonl"
    timings_path = out / "timings.jsonl"
    last_metrics = None
    stop = False
    with open(metrics_path, "w", encoding="utf-8") as mfh, \
            open(timings_path, "w", encoding="utf-8") as tfh:
        for epoch in range(cfg.train.epochs):
            order = _epoch_order(len(train_set), cfg.train.seed, epoch)
            for start in range(0, len(order), cfg.train.batch_size):
                batch = [train_set[j]
                         for j in order[start:start + cfg.train.batch_size]]
                metrics = trainer.train_step(batch)
                last_metrics = metrics
                wall_ms = metrics.pop("wall_ms")
                mfh.write(json.dumps(metrics, sort_keys=True) + "\n")
                tfh.write(json.dumps({"step": metrics["step"],
                                      "wall_ms": wall_ms}) + "\n")
                if (cfg.train.max_steps is not None
                        and trainer.micro_step >= cfg.train.max_steps):
                    stop = True
                    break
            if stop:
                break

    eval_metrics = evaluate(model, test_set, task_kind)
    ckpt_path = out / "model.ckpt"
    save_model(model, ckpt_path)
    if model.adapters:
        from .checkpoint import save_adapters
        save_adapters(model, out / "adapters.ckpt")
    report = report_from_step(model, trainer, last_metrics)
    (out / "memory.json").write_text(json.dumps(report, indent=2) + "\n",
                                     encoding="utf-8")
    (out / "eval.json").write_text(json.dumps(eval_metrics, indent=2) + "\n",
                                   encoding="utf-8")
    return RunResult(str(metrics_path), str(ckpt_path), eval_metrics,
                     trainer.micro_step)
