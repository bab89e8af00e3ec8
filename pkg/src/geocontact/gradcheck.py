"""Finite-difference verification of every differentiable operation.

Each check draws random inputs from a seed, contracts the operation's output
with a random weight tensor to get a scalar, and compares the taped gradient
with central differences (h = 1e-5) using the norm-relative error of
``autodiff.gradient_relative_error``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor, gradient_relative_error, numerical_gradient
from .dynamics import LpvSecondOrder, simulate_batch
from .geometry import chamfer
from .local_models import (LocalModelHead, LocalModelSet, centers_from_sections, eval_profile,
                           scale_sections, squash_variance)
from .training import regression_loss
from .vae import LatentCode, PointCloudVAE, kl_divergence, reparameterize, vae_loss

H = 1e-5
TOL = 1e-4
TOL_SIMULATE = 1e-3


@dataclass
class CheckResult:
    op: str
    seed: int
    error: float
    tol: float

    @property
    def passed(self) -> bool:
        return bool(self.error < self.tol)


def check_function(fn: Callable[..., Tensor], arrays: list[np.ndarray], h: float = H,
                   max_entries: int | None = None, rng=None) -> float:
    """Worst relative error over all inputs of scalar ``fn(*tensors)``."""
    leaves = [Tensor(np.array(a, dtype=np.float64), requires_grad=True) for a in arrays]
    return check_tensors(lambda: fn(*leaves), leaves, h, max_entries, rng)


def check_tensors(fn: Callable[[], Tensor], leaves: list[Tensor], h: float = H,
                  max_entries: int | None = None, rng=None) -> float:
    """Worst relative error of d fn() / d leaf over ``leaves`` (perturbed in place).

    With ``max_entries`` only that many randomly chosen entries per tensor are
    differenced and compared.
    """
    with Tape() as tape:
        out = fn()
    grads = tape.backward(out)

    def value():
        with ad.no_grad():
            return float(fn().data)

    # central differences cannot resolve gradients much below eps * |f| / h
    floor = max(1e-6, 1e5 * np.finfo(float).eps * max(1.0, abs(float(out.data))) / h)
    rng = np.random.default_rng(rng)
    worst = 0.0
    for leaf in leaves:
        arr = leaf.data
        indices = None
        if max_entries is not None and arr.size > max_entries:
            flat = rng.choice(arr.size, max_entries, replace=False)
            indices = [np.unravel_index(i, arr.shape) for i in flat]
        num = numerical_gradient(value, arr, h, indices)
        ana = grads[leaf]
        if indices is not None:
            ana = np.where(np.isnan(num), 0.0, ana)
            num = np.nan_to_num(num)
        worst = max(worst, gradient_relative_error(ana, num, floor))
    return worst


def _contract(out: Tensor, w: np.ndarray) -> Tensor:
    return ad.tsum(out * w)


# ---------------------------------------------------------------- individual checks

def _linear(rng):
    x, W, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 5)), rng.normal(size=5)
    w = rng.normal(size=(3, 5))
    return check_function(lambda x, W, b: _contract(ad.linear(x, W, b), w), [x, W, b])


def _shared_pointwise(rng):
    x, W, b = rng.normal(size=(2, 3, 6)), rng.normal(size=(3, 4)), rng.normal(size=4)
    w = rng.normal(size=(2, 4, 6))
    return check_function(lambda x, W, b: _contract(ad.shared_pointwise(x, W, b), w), [x, W, b])


def _batchnorm(rng):
    x = rng.normal(size=(3, 4, 5))
    g, b = rng.normal(size=4), rng.normal(size=4)
    w = rng.normal(size=x.shape)

    def fn(x, g, b):
        return _contract(ad.batchnorm(x, g, b, np.zeros(4), np.ones(4), train=True), w)

    return check_function(fn, [x, g, b])


def _elementwise(op):
    def check(rng):
        x = rng.normal(size=(4, 5)) * 2.0
        x[np.abs(x) < 1e-3] += 0.01
        w = rng.normal(size=x.shape)
        return check_function(lambda x: _contract(op(x), w), [x])
    return check


def _max_over_points(rng):
    x = rng.normal(size=(2, 3, 7))
    w = rng.normal(size=(2, 3))
    return check_function(lambda x: _contract(ad.max_over_points(x), w), [x])


def _reparameterize(rng):
    mu, lv, eps = rng.normal(size=(2, 5)), rng.normal(size=(2, 5)) * 0.5, rng.normal(size=(2, 5))
    w = rng.normal(size=(2, 5))
    return check_function(lambda m, l: _contract(reparameterize(LatentCode(m, l), eps), w),
                          [mu, lv])


def _kl(rng):
    mu, lv = rng.normal(size=(3, 4)), rng.normal(size=(3, 4)) * 0.5
    w = rng.normal(size=3)
    return check_function(lambda m, l: _contract(kl_divergence(LatentCode(m, l)), w), [mu, lv])


def _chamfer(rng):
    x, y = rng.normal(size=(12, 3)), rng.normal(size=(9, 3))
    return check_function(lambda x, y: chamfer(x, y), [x, y])


def _scale_sections(rng):
    d = rng.uniform(0.2, 2.0, size=(2, 6))
    s_max = rng.uniform(0.5, 3.0, size=2)
    w = rng.normal(size=(2, 6))
    return check_function(lambda d: _contract(scale_sections(d, s_max), w), [d])


def _centers(rng):
    d = rng.uniform(0.1, 1.0, size=(3, 6))
    w = rng.normal(size=(3, 6))
    return check_function(lambda d: _contract(centers_from_sections(d), w), [d])


def _variance(rng):
    c_raw, d = rng.normal(size=(2, 5)), rng.uniform(0.1, 1.0, size=(2, 5))
    w = rng.normal(size=(2, 5))
    return check_function(lambda c, d: _contract(squash_variance(c, d), w), [c_raw, d])


def _random_models(rng, rows=2, n=4, s_max=0.01):
    sec = rng.uniform(0.5, 1.5, size=(rows, n))
    sec = sec / sec.sum(axis=1, keepdims=True) * s_max
    b = np.cumsum(sec, axis=1) - 0.5 * sec
    c = sec * rng.uniform(0.25, 0.4, size=(rows, n))
    a = np.empty((rows, 4, n))
    a[:, 0] = rng.uniform(0.8, 1.2, size=(rows, n))
    a[:, 1] = rng.uniform(15, 25, size=(rows, n))
    a[:, 2] = rng.uniform(300, 500, size=(rows, n))
    a[:, 3] = a[:, 2] * rng.uniform(200, 1200, size=(rows, n))
    return a, b, c, np.full(rows, s_max)


def _eval_profile(rng):
    # unit depth scale: h = 1e-5 must be small against the widths
    a, b, c, s_max = _random_models(rng, s_max=1.0)
    s = rng.uniform(-0.2, 1.2, size=(2, 7))
    w = rng.normal(size=(2, 7, 4))

    def fn(a, b, c):
        return _contract(eval_profile(LocalModelSet(a, b, c, s_max), s), w)

    return check_function(fn, [a, b, c])


def _ramp(rows=2, T=60, depth=0.01):
    u = np.minimum(np.linspace(0.0, 1.4, T), 1.0) * depth
    return np.tile(u, (rows, 1)), 1.0 / (T - 1)


def _simulate(rng):
    # unit depth scale as for eval_profile: at millimetre widths the O(h^2)
    # truncation of central differences alone reaches the tolerance
    a, b, c, s_max = _random_models(rng, s_max=1.0)
    a[:, 3] = a[:, 2] * rng.uniform(2, 12, size=a[:, 3].shape)
    u, dt = _ramp(depth=1.0)
    w = rng.normal(size=u.shape)

    def fn(a, b, c):
        F = simulate_batch(LpvSecondOrder(LocalModelSet(a, b, c, s_max)), u, dt)
        return _contract(F, w)

    return check_function(fn, [a, b, c])


def _regression_loss(rng):
    head = LocalModelHead(latent_dim=3, n_models=4, hidden=8, n_blocks=3,
                          amplitude_scale=(1.0, 20.0, 400.0, 400.0 * 800.0),
                          seed=int(rng.integers(1 << 31)))
    for p in head.parameters():
        p.data = p.data + rng.normal(scale=0.05, size=p.shape)
    u, dt = _ramp()
    z = rng.normal(size=(2, 3))
    F = u * rng.uniform(600, 900) + rng.normal(scale=0.05, size=u.shape)
    s_max = np.full(2, 0.01)
    return check_tensors(lambda: regression_loss(head, z, u, F, dt, s_max)[0],
                         head.parameters(), max_entries=6, rng=rng)


def _vae_loss(rng):
    vae = PointCloudVAE(latent_dim=3, n_points=8, encoder_widths=(4, 5), decoder_widths=(6,),
                        output_scale=1.0, seed=int(rng.integers(1 << 31)))
    x = rng.normal(size=(3, 8, 3))
    eps = rng.normal(size=(3, 3))
    buffers = {k: v.copy() for k, v in vae.named_buffers().items()}

    def fn():
        code = vae.encode(x, train=True)
        out = vae_loss(x, vae.decode(reparameterize(code, eps)), code, beta=0.3)
        for k, v in vae.named_buffers().items():
            v[...] = buffers[k]
        return out

    return check_tensors(fn, vae.parameters(), max_entries=6, rng=rng)


CHECKS: dict[str, tuple[Callable, float]] = {
    "linear": (_linear, TOL),
    "shared_pointwise": (_shared_pointwise, TOL),
    "batchnorm": (_batchnorm, TOL),
    "relu": (_elementwise(ad.relu), TOL),
    "softplus": (_elementwise(ad.softplus), TOL),
    "sigmoid": (_elementwise(ad.sigmoid), TOL),
    "max_over_points": (_max_over_points, TOL),
    "reparameterize": (_reparameterize, TOL),
    "chamfer": (_chamfer, TOL),
    "kl_divergence": (_kl, TOL),
    "scale_sections": (_scale_sections, TOL),
    "centers_from_sections": (_centers, TOL),
    "variance_squash": (_variance, TOL),
    "eval_profile": (_eval_profile, TOL),
    "simulate": (_simulate, TOL_SIMULATE),
    "regression_loss": (_regression_loss, TOL_SIMULATE),
    "vae_loss": (_vae_loss, TOL),
}


def run_suite(seeds: int = 20, ops=None, base_seed: int = 0) -> list[CheckResult]:
    results = []
    for name in ops or CHECKS:
        fn, tol = CHECKS[name]
        for s in range(seeds):
            rng = np.random.default_rng([base_seed, s, len(name)])
            results.append(CheckResult(name, s, fn(rng), tol))
    return results
