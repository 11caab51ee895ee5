"""Optimizers (AdamW, RAdam) and learning-rate scheduling.

Both optimizers use decoupled weight decay. The schedule is linear decay to
zero after an optional linear warmup, optionally scaled per parameter by
``layer_decay ** depth`` where depth counts layers from the output side
(heads at depth 0, embeddings deepest).
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from .params import ParameterStore


class LinearSchedule:
    """lr(t) = base * t/warmup while warming up, then linear decay to 0 at total_steps."""

    def __init__(self, base_lr: float, total_steps: int, warmup_steps: int = 0):
        if warmup_steps >= total_steps:
            raise ValueError("warmup_steps must be smaller than total_steps")
        self.base_lr = base_lr
        self.total_steps = total_steps
        self.warmup_steps = warmup_steps

    def lr_at(self, step: int) -> float:
        if self.total_steps <= 0:
            return self.base_lr
        if self.warmup_steps > 0 and step < self.warmup_steps:
            return self.base_lr * (step + 1) / self.warmup_steps
        frac = (self.total_steps - step) / max(self.total_steps - self.warmup_steps, 1)
        return self.base_lr * max(frac, 0.0)


class ConstantSchedule:
    def __init__(self, base_lr: float):
        self.base_lr = base_lr

    def lr_at(self, step: int) -> float:
        return self.base_lr


class _AdamBase:
    def __init__(self, store: ParameterStore, schedule, weight_decay: float = 0.0,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
                 layer_decay: float = 1.0, depth_fn: Callable[[str], int] | None = None,
                 check_finite: bool = False):
        self.store = store
        self.schedule = schedule
        self.weight_decay = weight_decay
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.layer_decay = layer_decay
        self.depth_fn = depth_fn or (lambda name: 0)
        self.check = check_finite
        self.step_count = 0
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}

    def _lr_for(self, name: str, base: float) -> float:
        if self.layer_decay == 1.0:
            return base
        return base * (self.layer_decay ** self.depth_fn(name))

    def _moments(self, name: str, like: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        if name not in self._m:
            self._m[name] = np.zeros_like(like)
            self._v[name] = np.zeros_like(like)
        return self._m[name], self._v[name]

    def _update(self, name: str, param, grad: np.ndarray, lr: float) -> None:
        raise NotImplementedError

    def step(self) -> None:
        """Apply one update using each parameter's accumulated gradient."""
        base_lr = self.schedule.lr_at(self.step_count)
        self.step_count += 1
        for name, param in self.store.items():
            if param.grad is None:
                raise ValueError(f"parameter {name!r} has no gradient; run backward first")
            lr = self._lr_for(name, base_lr)
            self._update(name, param, param.grad, lr)
            if self.weight_decay != 0.0:
                param.data -= lr * self.weight_decay * param.data
            if self.check and not np.all(np.isfinite(param.data)):
                raise FloatingPointError(f"non-finite values in parameter {name!r} after update")

    def state_arrays(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {"step": np.array([float(self.step_count)])}
        for name, m in self._m.items():
            out[f"m.{name}"] = m
            out[f"v.{name}"] = self._v[name]
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        if "step" in arrays:
            self.step_count = int(arrays["step"][0])
        for key, arr in arrays.items():
            if key.startswith("m."):
                self._m[key[2:]] = arr.copy()
            elif key.startswith("v."):
                self._v[key[2:]] = arr.copy()


class AdamW(_AdamBase):
    def _update(self, name, param, grad, lr):
        m, v = self._moments(name, param.data)
        t = self.step_count
        m += (1.0 - self.beta1) * (grad - m)
        v += (1.0 - self.beta2) * (grad * grad - v)
        mhat = m / (1.0 - self.beta1 ** t)
        vhat = v / (1.0 - self.beta2 ** t)
        param.data -= lr * mhat / (np.sqrt(vhat) + self.eps)


class RAdam(_AdamBase):
    """Rectified Adam: variance rectification kicks in once rho_t > 4;
    earlier steps fall back to an un-adapted momentum update."""

    def _update(self, name, param, grad, lr):
        m, v = self._moments(name, param.data)
        t = self.step_count
        m += (1.0 - self.beta1) * (grad - m)
        v += (1.0 - self.beta2) * (grad * grad - v)
        mhat = m / (1.0 - self.beta1 ** t)
        rho_inf = 2.0 / (1.0 - self.beta2) - 1.0
        beta2_t = self.beta2 ** t
        rho_t = rho_inf - 2.0 * t * beta2_t / (1.0 - beta2_t)
        if rho_t > 4.0:
            vhat = np.sqrt(v / (1.0 - beta2_t))
            rect = np.sqrt(
                ((rho_t - 4.0) * (rho_t - 2.0) * rho_inf)
                / ((rho_inf - 4.0) * (rho_inf - 2.0) * rho_t)
            )
            param.data -= lr * rect * mhat / (vhat + self.eps)
        else:
            param.data -= lr * mhat


def make_optimizer(kind: str, store: ParameterStore, schedule, weight_decay: float,
                   layer_decay: float = 1.0, depth_fn=None, check_finite: bool = False):
    kind = kind.lower()
    if kind == "adamw":
        cls = AdamW
    elif kind == "radam":
        cls = RAdam
    else:
        raise ValueError(f"unknown optimizer {kind!r} (use adamw or radam)")
    return cls(store, schedule, weight_decay=weight_decay, layer_decay=layer_decay,
               depth_fn=depth_fn, check_finite=check_finite)
