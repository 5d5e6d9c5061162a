"""Image losses and a minimal Adam optimizer."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class AdamState:
    """Bias-corrected Adam state for one parameter array."""

    lr: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: np.ndarray = field(default=None, repr=False)
    v: np.ndarray = field(default=None, repr=False)

    def update(self, params: np.ndarray, grads: np.ndarray) -> np.ndarray:
        """One Adam step; returns the updated parameters (in place)."""
        if self.m is None:
            self.m = np.zeros_like(params)
            self.v = np.zeros_like(params)
        if params.shape != grads.shape:
            raise ValueError("params/grads shape mismatch")
        self.step += 1
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * grads
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * grads**2
        mhat = self.m / (1.0 - self.beta1**self.step)
        vhat = self.v / (1.0 - self.beta2**self.step)
        params -= self.lr * mhat / (np.sqrt(vhat) + self.eps)
        return params


def adam_step(state: AdamState, params: np.ndarray, grads: np.ndarray) -> np.ndarray:
    return state.update(params, grads)


def image_loss(rendered: np.ndarray, target: np.ndarray, kind: str = "L1"):
    """Mean L1 or L2 loss on linear radiance and its adjoint d(loss)/d(pixel).

    Returns ``(loss, adjoint)`` with the adjoint shaped like the images.
    """
    rendered = np.asarray(rendered, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if rendered.shape != target.shape:
        raise ValueError(f"image shape mismatch: {rendered.shape} vs {target.shape}")
    n = rendered.size
    diff = rendered - target
    if kind == "L1":
        return float(np.abs(diff).mean()), np.sign(diff) / n
    if kind == "L2":
        return float((diff**2).mean()), 2.0 * diff / n
    raise ValueError(f"unknown loss kind {kind!r}")


def psnr(rendered: np.ndarray, target: np.ndarray, peak: float = 1.0) -> float:
    mse = float(np.mean((np.asarray(rendered) - np.asarray(target)) ** 2))
    if mse <= 0:
        return float("inf")
    return float(10.0 * np.log10(peak**2 / mse))
