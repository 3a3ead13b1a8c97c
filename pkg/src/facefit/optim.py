"""Bias-corrected Adam, written out so every step is reproducible."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch


@dataclass
class AdamState:
    m: object
    v: object
    t: int = 0

    @classmethod
    def zeros_like(cls, params):
        if isinstance(params, torch.Tensor):
            return cls(torch.zeros_like(params), torch.zeros_like(params))
        p = np.asarray(params, dtype=np.float64)
        return cls(np.zeros_like(p), np.zeros_like(p))


def adam_step(params, grads, state: AdamState, lr, betas=(0.9, 0.999), eps=1e-8):
    """One Adam update. Works on numpy arrays or torch tensors.

    Returns ``(new_params, new_state)``; inputs are not modified.
    """
    is_torch = isinstance(params, torch.Tensor)
    lib = torch if is_torch else np
    if not is_torch:
        params = np.asarray(params, dtype=np.float64)
        grads = np.asarray(grads, dtype=np.float64)
    if params.shape != grads.shape:
        raise ValueError(f"params {tuple(params.shape)} and grads {tuple(grads.shape)} differ")
    if bool(lib.isnan(grads).any()):
        raise FloatingPointError("NaN in gradient")
    b1, b2 = betas
    t = state.t + 1
    m = b1 * state.m + (1 - b1) * grads
    v = b2 * state.v + (1 - b2) * grads * grads
    m_hat = m / (1 - b1 ** t)
    v_hat = v / (1 - b2 ** t)
    new = params - lr * m_hat / (lib.sqrt(v_hat) + eps)
    return new, AdamState(m, v, t)


class Adam:
    """Adam over named torch tensors, each with its own learning rate."""

    def __init__(self, params: dict, lrs: dict, betas=(0.9, 0.999), eps=1e-8):
        self.params = params
        self.lrs = lrs
        self.betas = betas
        self.eps = eps
        self.scale = 1.0  # schedule multiplier applied to every group
        self.state = {k: AdamState.zeros_like(p.detach()) for k, p in params.items()}

    def step(self, grads: dict):
        # fixed key order keeps updates reproducible
        for name in sorted(self.params):
            p = self.params[name]
            g = grads.get(name)
            if g is None:
                continue
            try:
                new, self.state[name] = adam_step(p.detach(), g, self.state[name],
                                                  self.lrs[name] * self.scale, self.betas, self.eps)
            except FloatingPointError as exc:
                raise FloatingPointError(f"{exc} for parameter {name}") from None
            with torch.no_grad():
                p.copy_(new)
