"""Low-rank adapters: frozen base weights plus trainable rank-r factors.

The adapted forward computes x @ W + (alpha/r) * (x @ A) @ B without ever
materializing the combined weight, so the extra activation cache per adapted
matrix stays at the rank-r intermediate. B starts at zero, making the
initial delta exactly zero.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import TransformerModel

ADAPTER_INIT_STD = 0.02

#: target keyword -> per-layer parameter suffix
TARGET_SUFFIXES = {
    "w1": "ffn.w1",
    "w2": "ffn.w2",
    "w_q": "attn.w_q",
    "w_k": "attn.w_k",
    "w_v": "attn.w_v",
    "w_o": "attn.w_o",
}


class AdapterError(ValueError):
    pass


@dataclass
class LoraAdapter:
    target: str
    a: np.ndarray       # d_in x r
    b: np.ndarray       # r x d_out
    scaling: float
    r: int
    alpha: float

    def astype(self, dtype) -> "LoraAdapter":
        return LoraAdapter(self.target, self.a.astype(dtype),
                           self.b.astype(dtype), self.scaling, self.r,
                           self.alpha)

    def delta(self) -> np.ndarray:
        return (self.a @ self.b) * np.asarray(self.scaling,
                                              dtype=self.a.dtype)


def attach(model: TransformerModel, targets=("w1", "w2"), r: int = 8,
           alpha: float = 16.0, seed: int = 0) -> TransformerModel:
    """Freeze every base parameter and add trainable factors on `targets`."""
    if r < 1:
        raise AdapterError("rank must be >= 1")
    if model.adapters:
        raise AdapterError("adapters already attached")
    unknown = [t for t in targets if t not in TARGET_SUFFIXES]
    if unknown:
        raise AdapterError(f"unknown adapter target(s) {unknown}; "
                           f"expected a subset of {sorted(TARGET_SUFFIXES)}")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x10BA]))
    dtype = model.dtype
    for p in model.params.values():
        p.frozen = True
    for i in range(model.config.n_layers):
        for t in targets:
            name = f"layers.{i}.{TARGET_SUFFIXES[t]}"
            base = model.param(name).value
            d_in, d_out = base.shape
            model.adapters[name] = LoraAdapter(
                target=name,
                a=rng.normal(0.0, ADAPTER_INIT_STD, (d_in, r)).astype(dtype),
                b=np.zeros((r, d_out), dtype=dtype),
                scaling=float(alpha) / float(r),
                r=int(r),
                alpha=float(alpha),
            )
    return model


def merge(model: TransformerModel) -> TransformerModel:
    """Fold every adapter delta into its frozen base weight."""
    if not model.adapters:
        raise AdapterError("no adapters attached (already merged?)")
    for name, ad in model.adapters.items():
        p = model.param(name)
        p.value = p.value + ad.delta()
    model.adapters.clear()
    return model
