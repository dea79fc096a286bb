"""Adam with a geometrically decaying step size, shared by kernel and parameter fitting."""

from __future__ import annotations

from typing import Tuple

import jax
import numpy as np
import optax

jax.config.update("jax_enable_x64", True)


def decayed_adam(
    lr: float,
    steps: int,
    final_ratio: float = 1e-2,
    beta1: float = 0.9,
    beta2: float = 0.999,
) -> optax.GradientTransformation:
    """Step size falls from ``lr`` to ``lr * final_ratio`` over ``steps`` updates."""

    if not lr > 0.0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    if not 0.0 < final_ratio <= 1.0:
        raise ValueError(f"final_ratio must lie in (0, 1], got {final_ratio}")
    schedule = optax.exponential_decay(
        init_value=lr,
        transition_steps=max(1, int(steps) - 1),
        decay_rate=final_ratio,
    )
    return optax.adam(learning_rate=schedule, b1=beta1, b2=beta2)


def adam_step(
    optimizer: optax.GradientTransformation,
    state: optax.OptState,
    params: np.ndarray,
    grads: np.ndarray,
) -> Tuple[np.ndarray, optax.OptState]:
    updates, state = optimizer.update(np.asarray(grads, dtype=np.float64), state, params)
    return np.array(optax.apply_updates(params, updates), dtype=np.float64), state


__all__ = ["adam_step", "decayed_adam"]
