"""Tensor helpers, initialization, Adam with L2 + global-norm clipping, and a
finite-difference gradient checker.

Tensors are plain ``numpy.ndarray`` values. Training and inference run in
float32; :func:`grad_check` promotes everything to float64.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict, Mapping, Tuple

import numpy as np

DTYPE = np.float32

Params = Dict[str, np.ndarray]


class NonFiniteError(FloatingPointError):
    """Raised when a NaN or Inf shows up where a finite value is required."""


class NotDifferentiableError(ValueError):
    """Raised by :func:`grad_check` when a probe point sits on a kink."""

    def __init__(self, coords):
        self.coords = coords
        super().__init__(f"operation not differentiable at {len(coords)} coordinate(s), e.g. {coords[:3]}")


def make_rng(seed: int) -> np.random.Generator:
    """Seeded generator. PCG64 (numpy's default bit generator) gives the same
    stream on every platform for a given seed."""
    return np.random.Generator(np.random.PCG64(seed))


def check_finite(name: str, arr: np.ndarray) -> None:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite values in {name}")


def glorot_bound(fan_in: int, fan_out: int) -> float:
    return float(np.sqrt(6.0 / (fan_in + fan_out)))


def uniform_init(shape, fan_in: int, fan_out: int, rng: np.random.Generator) -> np.ndarray:
    if fan_in < 1 or fan_out < 1:
        raise ValueError(f"fan dimensions must be >= 1, got ({fan_in}, {fan_out})")
    bound = glorot_bound(fan_in, fan_out)
    return rng.uniform(-bound, bound, size=shape).astype(DTYPE)


def normalized_init(fan_in: int, fan_out: int, rng: np.random.Generator) -> np.ndarray:
    """Glorot/Xavier uniform matrix of shape ``(fan_in, fan_out)``."""
    return uniform_init((fan_in, fan_out), fan_in, fan_out, rng)


def zeros(*shape) -> np.ndarray:
    return np.zeros(shape, dtype=DTYPE)


@dataclass
class AdamState:
    m: Params = field(default_factory=dict)
    v: Params = field(default_factory=dict)
    step: int = 0

    @classmethod
    def fresh(cls, params: Mapping[str, np.ndarray]) -> "AdamState":
        return cls(
            m={k: np.zeros_like(p) for k, p in params.items()},
            v={k: np.zeros_like(p) for k, p in params.items()},
            step=0,
        )


def _check_keys(params: Mapping, grads: Mapping) -> None:
    if set(params) != set(grads):
        raise ValueError(f"parameter/gradient name mismatch: {sorted(set(params) ^ set(grads))}")
    for k in params:
        if params[k].shape != grads[k].shape:
            raise ValueError(f"shape mismatch for {k}: {params[k].shape} vs {grads[k].shape}")


def add_weight_decay(grads: Mapping[str, np.ndarray], params: Mapping[str, np.ndarray], l2: float) -> Params:
    """Coupled L2: returns ``grad + l2 * param`` for every tensor."""
    _check_keys(params, grads)
    if l2 == 0:
        return dict(grads)
    return {k: grads[k] + np.asarray(l2, grads[k].dtype) * params[k] for k in grads}


def adam_step(
    params: Mapping[str, np.ndarray],
    grads: Mapping[str, np.ndarray],
    state: AdamState,
    lr: float = 1e-3,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    l2: float = 0.0,
) -> Tuple[Params, AdamState]:
    """One bias-corrected Adam update; inputs are not modified.

    ``l2`` is folded into the gradient before the moment updates. Callers that
    clip (the training loop) add the decay themselves with
    :func:`add_weight_decay` and pass ``l2=0`` here.
    """
    _check_keys(params, grads)
    if state.m and set(state.m) != set(params):
        raise ValueError("Adam state does not match parameter set")
    for k, g in grads.items():
        check_finite(f"gradient {k}", g)

    t = state.step + 1
    bc1 = 1.0 - beta1**t
    bc2 = 1.0 - beta2**t
    new_params, new_m, new_v = {}, {}, {}
    for k, p in params.items():
        g = grads[k] + l2 * p if l2 else grads[k]
        m_prev = state.m.get(k, np.zeros_like(p))
        v_prev = state.v.get(k, np.zeros_like(p))
        if m_prev.shape != p.shape or v_prev.shape != p.shape:
            raise ValueError(f"Adam accumulator shape mismatch for {k}")
        m = beta1 * m_prev + (1.0 - beta1) * g
        v = beta2 * v_prev + (1.0 - beta2) * g * g
        m_hat = m / bc1
        v_hat = v / bc2
        new_params[k] = (p - lr * m_hat / (np.sqrt(v_hat) + eps)).astype(p.dtype, copy=False)
        new_m[k] = m.astype(p.dtype, copy=False)
        new_v[k] = v.astype(p.dtype, copy=False)
    return new_params, AdamState(m=new_m, v=new_v, step=t)


def global_norm(grads: Mapping[str, np.ndarray]) -> float:
    return float(np.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values())))


def clip_global_norm(grads: Mapping[str, np.ndarray], max_norm: float) -> Params:
    """Scale all gradients by ``max_norm / norm`` when the joint L2 norm exceeds ``max_norm``."""
    if max_norm <= 0:
        raise ValueError("max_norm must be positive")
    norm = global_norm(grads)
    if not np.isfinite(norm):
        raise NonFiniteError("gradient norm is not finite")
    if norm <= max_norm:
        return dict(grads)
    scale = max_norm / norm
    return {k: (g * scale).astype(g.dtype, copy=False) for k, g in grads.items()}


LossAndGrads = Callable[[Mapping[str, np.ndarray]], Tuple[float, Mapping[str, np.ndarray]]]


def grad_check(
    op: LossAndGrads,
    inputs: Mapping[str, np.ndarray],
    eps: float = 1e-5,
    kink_tol: float = 1e-3,
    dtype=np.float64,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``op`` maps a dict of ``dtype`` arrays (float64 by default) to ``(scalar_loss, grads)`` with one
    gradient per input name. Each coordinate ``x`` is perturbed by
    ``eps * (|x| + 1)``. The error per coordinate is
    ``|a - n| / max(|a|, |n|, 1e-8)``.

    A coordinate whose left and right one-sided slopes disagree by more than
    ``kink_tol`` (relative) is treated as a kink and raises
    :class:`NotDifferentiableError` instead of being folded into the error.

    The float64 finite-difference noise floor is about ``1e-16 * |loss| / h``;
    coordinates whose true gradient is below ~1e-7 can exceed a 1e-4 relative
    error from that noise alone. ``dtype=np.longdouble`` lowers the floor.
    """
    x = {k: np.array(v, dtype=dtype, copy=True) for k, v in inputs.items()}
    f0, analytic = op(x)
    f0 = dtype(f0)
    worst = 0.0
    kinks = []
    for name, arr in x.items():
        a_grad = np.asarray(analytic[name], dtype=dtype)
        if a_grad.shape != arr.shape:
            raise ValueError(f"gradient for {name} has shape {a_grad.shape}, expected {arr.shape}")
        flat = arr.reshape(-1)
        a_flat = a_grad.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            h = eps * (abs(orig) + 1)
            flat[i] = orig + h
            up = flat[i]
            fp = dtype(op(x)[0])
            flat[i] = orig - h
            down = flat[i]
            fm = dtype(op(x)[0])
            flat[i] = orig
            numeric = (fp - fm) / (up - down)
            right = (fp - f0) / (up - orig)
            left = (f0 - fm) / (orig - down)
            if abs(right - left) > kink_tol * max(1.0, abs(numeric)):
                kinks.append((name, i))
                continue
            a = a_flat[i]
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, float(err))
    if kinks:
        raise NotDifferentiableError(kinks)
    return worst
