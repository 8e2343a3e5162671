"""Kernel-regime analytics for knowledge distillation and co-distillation.

In the over-parameterized limit a student trained on ``a * ||y - f||^2``
plus a ``lam``-weighted logit penalty settles at a convex combination of
the labels and the teacher's prediction. Co-distillation iterates that map
with each worker's teacher being the leave-one-out mean of its peers.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np


class InstabilityError(RuntimeError):
    pass


@dataclass
class KernelRegimeSystem:
    y: np.ndarray
    a: float = 1.0
    lam: float = 1.0
    C: int = 2
    teacher_pred: Optional[np.ndarray] = None
    initial_outputs: Optional[np.ndarray] = None  # shape (C, n)

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=np.float64).ravel()
        if not (self.a > 0 and self.lam > 0):
            raise ValueError("a and lam must be positive")
        if self.C < 2:
            raise ValueError("co-distillation needs C >= 2 workers")
        n = self.y.size
        if self.teacher_pred is not None:
            self.teacher_pred = np.asarray(self.teacher_pred, dtype=np.float64).ravel()
            if self.teacher_pred.size != n:
                raise ValueError("teacher_pred length differs from y")
        if self.initial_outputs is not None:
            self.initial_outputs = np.asarray(self.initial_outputs, dtype=np.float64).reshape(-1, n)
            if self.initial_outputs.shape[0] != self.C:
                raise ValueError(f"expected {self.C} initial output vectors, "
                                 f"got {self.initial_outputs.shape[0]}")
        # both geometric factors of the co-distillation recurrence are contractions
        assert abs(self.self_factor) < 1 and abs(self.cross_factor) < 1

    @property
    def self_factor(self) -> float:
        """lam / (a + lam): the rate at which the worker mean approaches y."""
        return self.lam / (self.a + self.lam)

    @property
    def cross_factor(self) -> float:
        """-lam / ((C - 1)(a + lam)): the rate at which worker disagreement decays."""
        return -self.lam / ((self.C - 1) * (self.a + self.lam))


def _require_teacher(sys):
    if sys.teacher_pred is None:
        raise ValueError("system has no teacher_pred")
    return sys.teacher_pred


def kd_fixed_point(sys: KernelRegimeSystem) -> np.ndarray:
    phi = _require_teacher(sys)
    return (sys.a * sys.y + sys.lam * phi) / (sys.a + sys.lam)


def kd_error(sys: KernelRegimeSystem) -> float:
    phi = _require_teacher(sys)
    return sys.self_factor * float(np.linalg.norm(sys.y - phi))


def cd_update(sys: KernelRegimeSystem, outputs) -> np.ndarray:
    """One co-distillation round: every worker moves to its KD fixed point."""
    f = np.asarray(outputs, dtype=np.float64)
    if f.ndim != 2 or f.shape != (sys.C, sys.y.size):
        raise ValueError(f"outputs must have shape ({sys.C}, {sys.y.size}), got {f.shape}")
    teachers = (f.sum(axis=0, keepdims=True) - f) / (sys.C - 1)
    return (sys.a * sys.y + sys.lam * teachers) / (sys.a + sys.lam)


def cd_iterate(sys: KernelRegimeSystem, rounds: int) -> np.ndarray:
    """Stack of outputs for rounds ``0..rounds``; shape ``(rounds + 1, C, n)``."""
    if sys.initial_outputs is None:
        raise ValueError("system has no initial_outputs")
    traj = [sys.initial_outputs.copy()]
    for _ in range(rounds):
        traj.append(cd_update(sys, traj[-1]))
    return np.stack(traj)


def peer_sum(sys: KernelRegimeSystem, outputs) -> np.ndarray:
    """``lam/(C-1) * sum_{c>=2} f^c``, the quantity the closed form tracks."""
    f = np.asarray(outputs, dtype=np.float64)
    return sys.lam / (sys.C - 1) * f[1:].sum(axis=0)


def cd_closed_form(sys: KernelRegimeSystem, r: int) -> np.ndarray:
    """Closed-form ``v_r`` with ``v_r = lam/(C-1) * sum_{c>=2} f^c(r)``."""
    if r < 0:
        raise ValueError("round index must be >= 0")
    if sys.initial_outputs is None:
        raise ValueError("system has no initial_outputs")
    f0 = sys.initial_outputs
    C, lam = sys.C, sys.lam
    alpha = lam / C * f0.sum(axis=0) - lam * sys.y
    beta = lam / (C * (C - 1)) * f0[1:].sum(axis=0) - lam / C * f0[0]
    return alpha * sys.self_factor ** r + beta * sys.cross_factor ** r + lam * sys.y


def cd_limit(sys: KernelRegimeSystem) -> np.ndarray:
    return sys.y.copy()


def gradient_flow_oracle(sys: KernelRegimeSystem, step: float, iters: int,
                         start=None, kernel=None) -> np.ndarray:
    """Explicit-Euler gradient descent on the linearized KD objective.

    The outputs are free variables driven by ``H (a (y - f) + lam (phi - f))``
    with a fixed positive-definite kernel ``H`` (identity by default). The
    limit does not depend on ``H``.
    """
    phi = _require_teacher(sys)
    f = np.zeros_like(sys.y) if start is None else np.array(start, dtype=np.float64)
    drive = sys.a * sys.y + sys.lam * phi
    c = sys.a + sys.lam
    if kernel is None:
        decay = 1.0 - step * c
        push = step * drive
        for i in range(iters):
            f = decay * f + push
            if i % 32 == 0 and not np.linalg.norm(f) < 1e6:
                raise InstabilityError(f"gradient flow diverged at iteration {i}; use a smaller step")
    else:
        H = np.asarray(kernel, dtype=np.float64)
        for i in range(iters):
            f = f + step * (H @ (drive - c * f))
            if i % 32 == 0 and not np.linalg.norm(f) < 1e6:
                raise InstabilityError(f"gradient flow diverged at iteration {i}; use a smaller step")
    if not np.linalg.norm(f) < 1e6:
        raise InstabilityError("gradient flow diverged; use a smaller step")
    return f


def residual_curve(sys: KernelRegimeSystem, r_max: int) -> np.ndarray:
    """``max_i |f^c_i(r) - y_i|`` for every round and worker; shape ``(r_max + 1, C)``."""
    traj = cd_iterate(sys, r_max)
    return np.max(np.abs(traj - sys.y), axis=2)


def rounds_to_tolerance(sys: KernelRegimeSystem, tol: float, r_max: int = 10_000) -> int:
    """First round at which every worker's sup-norm residual is at most ``tol``."""
    f = sys.initial_outputs.copy()
    for r in range(r_max + 1):
        if np.max(np.abs(f - sys.y)) <= tol:
            return r
        f = cd_update(sys, f)
    raise RuntimeError(f"residual did not reach {tol} within {r_max} rounds")


def warm_start_system(y, C, a=1.0, lam=1.0, noise=1.0, seed=0) -> KernelRegimeSystem:
    """Co-distillation system whose workers start as noisy estimates of ``y``.

    Mirrors workers that have each done a short local warm-up: initial
    outputs are ``y`` plus independent Gaussian noise per worker.
    """
    rng = np.random.default_rng(seed)
    y = np.asarray(y, dtype=np.float64)
    f0 = y + noise * rng.standard_normal((C, y.size))
    return KernelRegimeSystem(y=y, a=a, lam=lam, C=C, initial_outputs=f0)
