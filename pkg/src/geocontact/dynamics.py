"""Varying-parameter mass-damper-spring contact model

    a0(s) F'' + a1(s) F' + a2(s) F = b0(s) u,    s = |u|

integrated with classical RK4 on the trajectory grid. Every step is recorded
on the active tape so gradients flow through the unrolled integration.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .local_models import LocalModelSet, eval_profile


class NumericalInstabilityError(ArithmeticError):
    """The simulated state became non-finite."""

    def __init__(self, step: int):
        super().__init__(f"non-finite force state at integration step {step}")
        self.step = step


@dataclass
class Trajectory:
    dt: float
    u: np.ndarray
    F_meas: np.ndarray | None = None

    def __post_init__(self):
        self.u = np.asarray(self.u, dtype=np.float64)
        if self.F_meas is not None:
            self.F_meas = np.asarray(self.F_meas, dtype=np.float64)
            if self.F_meas.shape != self.u.shape:
                raise ValueError("force and excitation lengths differ")
        if len(self.u) < 2 or not self.dt > 0:
            raise ValueError("trajectory needs >= 2 samples and dt > 0")

    def __len__(self) -> int:
        return len(self.u)

    @property
    def t(self) -> np.ndarray:
        return np.arange(len(self.u)) * self.dt

    @property
    def s_max(self) -> float:
        return float(np.max(np.abs(self.u)))


@dataclass
class LpvSecondOrder:
    profile: LocalModelSet
    parameter_floor: float = 1e-6


@dataclass
class ForceResponse:
    F_hat: np.ndarray
    dt: float

    def to_csv(self, path, traj: Trajectory | None = None) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            has_meas = traj is not None and traj.F_meas is not None
            w.writerow(["t", "u", "F_hat"] + (["F_meas"] if has_meas else []))
            for i, f in enumerate(self.F_hat):
                row = [repr(float(i * self.dt)), repr(float(traj.u[i])) if traj is not None else "",
                       repr(float(f))]
                if has_meas:
                    row.append(repr(float(traj.F_meas[i])))
                w.writerow(row)


def stage_points(u: np.ndarray) -> np.ndarray:
    """Excitation at whole and half steps, interleaved: (..., 2T - 1)."""
    u = np.asarray(u, dtype=np.float64)
    out = np.empty(u.shape[:-1] + (2 * u.shape[-1] - 1,))
    out[..., 0::2] = u
    out[..., 1::2] = 0.5 * (u[..., :-1] + u[..., 1:])
    return out


def simulate_batch(model: LpvSecondOrder, u, dt, F0=0.0, dF0=0.0) -> Tensor:
    """Integrate a batch of excitations u: (B, T); returns F_hat as a (B, T) Tensor.

    ``dt`` may be a scalar or one step per row.
    """
    u = np.atleast_2d(np.asarray(u, dtype=np.float64))
    n_rows, n_steps = u.shape
    if len(model.profile) != n_rows:
        raise ValueError(f"{len(model.profile)} parameter rows for {n_rows} trajectories")
    h = np.broadcast_to(np.asarray(dt, dtype=np.float64), (n_rows,)).copy()
    ue = stage_points(u)
    theta = eval_profile(model.profile, np.abs(ue))
    if np.any(theta.data <= 0):
        raise ValueError("contact model coefficients must be strictly positive")
    # rows indexed by stage point: (2T - 1, B)
    theta = ad.transpose(theta, (1, 2, 0))
    inv_a0 = 1.0 / (theta[:, 0] + model.parameter_floor)
    forcing = theta[:, 3] * ue.T * inv_a0
    damping = theta[:, 1] * inv_a0
    stiffness = theta[:, 2] * inv_a0

    def accel(j, f, v):
        return forcing[j] - damping[j] * v - stiffness[j] * f

    f = ad.as_tensor(np.broadcast_to(np.asarray(F0, float), (n_rows,)).copy())
    v = ad.as_tensor(np.broadcast_to(np.asarray(dF0, float), (n_rows,)).copy())
    hh, h6 = 0.5 * h, h / 6.0
    out = [f]
    for n in range(n_steps - 1):
        j0, jh, j1 = 2 * n, 2 * n + 1, 2 * n + 2
        k1v = accel(j0, f, v)
        f2 = f + v * hh
        v2 = v + k1v * hh
        k2v = accel(jh, f2, v2)
        f3 = f + v2 * hh
        v3 = v + k2v * hh
        k3v = accel(jh, f3, v3)
        f4 = f + v3 * h
        v4 = v + k3v * h
        k4v = accel(j1, f4, v4)
        f = f + (v + (v2 + v3) * 2.0 + v4) * h6
        v = v + (k1v + (k2v + k3v) * 2.0 + k4v) * h6
        if not (np.all(np.isfinite(f.data)) and np.all(np.isfinite(v.data))):
            raise NumericalInstabilityError(n + 1)
        out.append(f)
    return ad.stack(out, axis=1)


def simulate(model: LpvSecondOrder, traj: Trajectory, F0: float = 0.0,
             dF0: float = 0.0) -> ForceResponse:
    """Single-trajectory convenience wrapper returning plain arrays."""
    with ad.no_grad():
        F = simulate_batch(model, traj.u[None, :], traj.dt, F0, dF0)
    return ForceResponse(F.data[0].copy(), traj.dt)


def steady_state_gain(models: LocalModelSet, s) -> np.ndarray:
    """b0(s) / a2(s): static force per unit excitation at frozen depth ``s``."""
    with ad.no_grad():
        theta = eval_profile(models, s).data
    return theta[..., 3] / theta[..., 2]
