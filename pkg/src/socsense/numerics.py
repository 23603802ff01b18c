"""Dense linear-algebra helpers, activations, seeded init, and Adam.

Matrices are 2-D float64 numpy arrays (row-major), vectors 1-D. Every
routine is a pure function of its inputs; the optimizer returns fresh
parameter and state objects instead of mutating.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NonFiniteError, ShapeError

Array = np.ndarray


def affine(w: Array, x: Array, b: Array) -> Array:
    """Return w @ x + b, validating shapes first."""
    w = np.asarray(w, dtype=float)
    x = np.asarray(x, dtype=float)
    b = np.asarray(b, dtype=float)
    if w.ndim != 2:
        raise ShapeError(f"affine: weight must be a matrix, got shape {w.shape}")
    if x.ndim != 1:
        raise ShapeError(f"affine: input must be a vector, got shape {x.shape}")
    if b.ndim != 1:
        raise ShapeError(f"affine: bias must be a vector, got shape {b.shape}")
    if w.shape[1] != x.shape[0]:
        raise ShapeError(
            f"affine: weight is {w.shape[0]}x{w.shape[1]} but input has length {x.shape[0]}"
        )
    if w.shape[0] != b.shape[0]:
        raise ShapeError(
            f"affine: weight is {w.shape[0]}x{w.shape[1]} but bias has length {b.shape[0]}"
        )
    return w @ x + b


def sigmoid(x: Array) -> Array:
    """Logistic function via the tanh half-angle identity.

    Stable for large |x| (tanh saturates, nothing overflows) and exactly
    symmetric: sigmoid(x) + sigmoid(-x) == 1.0 in floating point.
    """
    x = np.asarray(x, dtype=float)
    return 0.5 * np.tanh(0.5 * x) + 0.5


def tanh_act(x: Array) -> Array:
    """Hyperbolic tangent activation."""
    return np.tanh(np.asarray(x, dtype=float))


def uniform_init(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> Array:
    """Uniform draw in [-1/sqrt(fan_in), +1/sqrt(fan_in)], seeded via rng."""
    bound = 1.0 / np.sqrt(float(fan_in))
    return rng.uniform(-bound, bound, size=shape)


Params = dict[str, Array]


@dataclass(frozen=True)
class AdamState:
    """Optimizer moments plus hyperparameters; step counts completed updates."""

    m: Params
    v: Params
    step: int
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    @classmethod
    def init(
        cls,
        params: Params,
        learning_rate: float = 1e-3,
        beta1: float = 0.9,
        beta2: float = 0.999,
        epsilon: float = 1e-8,
    ) -> "AdamState":
        m = {k: np.zeros_like(p) for k, p in params.items()}
        v = {k: np.zeros_like(p) for k, p in params.items()}
        return cls(m=m, v=v, step=0, learning_rate=learning_rate,
                   beta1=beta1, beta2=beta2, epsilon=epsilon)


def _check_aligned(params: Params, grads: Params, state: AdamState) -> None:
    if params.keys() != grads.keys() or params.keys() != state.m.keys():
        missing = sorted(set(params) ^ set(grads)) or sorted(set(params) ^ set(state.m))
        raise ShapeError(f"adam_update: parameter blocks do not match: {missing}")
    for name, p in params.items():
        if grads[name].shape != p.shape:
            raise ShapeError(
                f"adam_update: block '{name}' has shape {p.shape} but gradient {grads[name].shape}"
            )
        if state.m[name].shape != p.shape:
            raise ShapeError(
                f"adam_update: block '{name}' has shape {p.shape} but moment {state.m[name].shape}"
            )


def adam_update(params: Params, grads: Params, state: AdamState) -> tuple[Params, AdamState]:
    """One Adam step with bias correction; returns (new params, new state)."""
    _check_aligned(params, grads, state)
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"adam_update: non-finite gradient in block '{name}'")
    t = state.step + 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** t
    bc2 = 1.0 - b2 ** t
    new_params: Params = {}
    new_m: Params = {}
    new_v: Params = {}
    for name, p in params.items():
        g = grads[name]
        m = b1 * state.m[name] + (1.0 - b1) * g
        v = b2 * state.v[name] + (1.0 - b2) * g * g
        m_hat = m / bc1
        v_hat = v / bc2
        new_p = p - state.learning_rate * m_hat / (np.sqrt(v_hat) + state.epsilon)
        if not np.all(np.isfinite(new_p)):
            raise NonFiniteError(f"adam_update: non-finite parameter in block '{name}' at step {t}")
        new_params[name] = new_p
        new_m[name] = m
        new_v[name] = v
    return new_params, AdamState(m=new_m, v=new_v, step=t,
                                 learning_rate=state.learning_rate,
                                 beta1=b1, beta2=b2, epsilon=state.epsilon)


def global_norm(grads: Params) -> float:
    return float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))


def clip_global_norm(grads: Params, max_norm: float) -> tuple[Params, float]:
    """Scale all gradient blocks so their joint L2 norm is at most max_norm."""
    norm = global_norm(grads)
    if max_norm <= 0 or norm <= max_norm:
        return grads, norm
    scale = max_norm / norm
    return {k: g * scale for k, g in grads.items()}, norm
