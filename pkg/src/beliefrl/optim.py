from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import ContractError


@dataclass
class AdamState:
    lr: float = 3e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    m: np.ndarray | None = None
    v: np.ndarray | None = None
    step: int = 0


def adam_step(params: np.ndarray, grads: np.ndarray, state: AdamState) -> None:
    """In-place Adam update of `params` with bias-corrected moments."""
    if params.shape != grads.shape:
        raise ContractError(f"adam: grad shape {grads.shape} != param shape {params.shape}")
    if state.m is None:
        state.m = np.zeros_like(params)
        state.v = np.zeros_like(params)
    elif state.m.shape != params.shape:
        raise ContractError("adam: moment vectors do not match parameter dimension")
    state.step += 1
    state.m *= state.beta1
    state.m += (1.0 - state.beta1) * grads
    state.v *= state.beta2
    state.v += (1.0 - state.beta2) * (grads * grads)
    m_hat = state.m / (1.0 - state.beta1**state.step)
    v_hat = state.v / (1.0 - state.beta2**state.step)
    params -= state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
