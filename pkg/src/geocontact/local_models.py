"""Gaussian local-model regression head producing the parameter profile Theta(s).

Centers are midpoints of positive sections that tile [0, s_max]; each
variance is squashed between the widths at which the Gaussian falls to 1/20
and to 1/3 at its section edges; the profile is the normalised (softmax)
mixture of per-coefficient amplitudes.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .layers import Linear, Module

COEFFICIENTS = ("a0", "a1", "a2", "b0")
EDGE_RATIO_MIN = 20.0
EDGE_RATIO_MAX = 3.0


def scale_sections(delta, s_max) -> Tensor:
    """Rescale positive sections so each row sums to ``s_max``. delta: (..., N)."""
    delta = ad.as_tensor(delta)
    total = ad.tsum(delta, axis=-1, keepdims=True)
    if np.any(total.data <= 0):
        raise ValueError("sections must have a positive sum")
    s_max = np.asarray(s_max, dtype=np.float64)
    return delta / total * s_max[..., None]


def section_matrix(n: int) -> np.ndarray:
    """Upper-triangular ones with 1/2 on the diagonal."""
    return np.triu(np.ones((n, n))) - 0.5 * np.eye(n)


def centers_from_sections(delta_s) -> Tensor:
    """b = delta_s^T Q: the midpoint of every section."""
    delta_s = ad.as_tensor(delta_s)
    q = section_matrix(delta_s.shape[-1])
    if delta_s.ndim == 1:
        return ad.reshape(ad.matmul(ad.reshape(delta_s, (1, -1)), q), (-1,))
    return ad.matmul(delta_s, q)


def section_midpoints(delta_s: np.ndarray) -> np.ndarray:
    """Plain-array midpoint formula, independent of the matrix route."""
    delta_s = np.asarray(delta_s, float)
    return np.cumsum(delta_s, axis=-1) - 0.5 * delta_s


def _edge_width(half_section, ratio):
    return half_section / np.sqrt(2.0 * np.log(ratio))


def variance_bounds(delta_s_i):
    """(c_min, c_max) such that the Gaussian drops to 1/20 resp. 1/3 at the section edge."""
    half = np.asarray(delta_s_i, dtype=np.float64) / 2.0
    return _edge_width(half, EDGE_RATIO_MIN), _edge_width(half, EDGE_RATIO_MAX)


def squash_variance(c_raw, delta_s) -> Tensor:
    """c = c_min + sigmoid(c_raw) * (c_max - c_min), differentiable in both arguments."""
    half = ad.as_tensor(delta_s) * 0.5
    lo = half * (1.0 / np.sqrt(2.0 * np.log(EDGE_RATIO_MIN)))
    hi = half * (1.0 / np.sqrt(2.0 * np.log(EDGE_RATIO_MAX)))
    return lo + ad.sigmoid(c_raw) * (hi - lo)


@dataclass
class LocalModelSet:
    """Batched local models: a (B, 4, N), b (B, N), c (B, N), s_max (B,)."""

    a: Tensor
    b: Tensor
    c: Tensor
    s_max: np.ndarray

    @classmethod
    def from_arrays(cls, a, b, c, s_max) -> "LocalModelSet":
        a = np.asarray(a, float)
        b = np.asarray(b, float)
        c = np.asarray(c, float)
        if a.ndim == 2:
            a, b, c = a[None], b[None], c[None]
        return cls(Tensor(a), Tensor(b), Tensor(c), np.atleast_1d(np.asarray(s_max, float)))

    @property
    def n_models(self) -> int:
        return self.b.shape[-1]

    def __len__(self) -> int:
        return self.b.shape[0]

    def row(self, i: int) -> "LocalModelSet":
        return LocalModelSet.from_arrays(self.a.data[i], self.b.data[i], self.c.data[i],
                                         self.s_max[i])

    def to_csv(self, path, row: int = 0) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["model", "b", "c", *COEFFICIENTS, "s_max"])
            for i in range(self.n_models):
                w.writerow([i, repr(float(self.b.data[row, i])), repr(float(self.c.data[row, i])),
                            *(repr(float(self.a.data[row, k, i])) for k in range(4)),
                            repr(float(self.s_max[row]))])

    @classmethod
    def from_csv(cls, path) -> "LocalModelSet":
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.DictReader(fh))
        if not rows:
            raise ValueError(f"{path}: no local models")
        b = [float(r["b"]) for r in rows]
        c = [float(r["c"]) for r in rows]
        a = [[float(r[k]) for r in rows] for k in COEFFICIENTS]
        return cls.from_arrays(a, b, c, float(rows[0]["s_max"]))


def eval_profile(models: LocalModelSet, s) -> Tensor:
    """Theta(s) for every row of ``models``.

    s: (B, S) insertion coordinates (a 1-D array is used for every row).
    Returns (B, S, 4) ordered as a0, a1, a2, b0.
    """
    s = np.asarray(s, dtype=np.float64)
    if s.ndim == 0:
        s = s.reshape(1)
    if s.ndim == 1:
        s = np.broadcast_to(s, (len(models), len(s)))
    diff = ad.sub(s[:, :, None], ad.reshape(models.b, (models.b.shape[0], 1, -1)))
    c = ad.reshape(models.c, (models.c.shape[0], 1, -1))
    logits = ad.square(diff) / (ad.square(c) * -2.0)
    weights = ad.softmax(logits, axis=-1)
    return ad.matmul(weights, ad.transpose(models.a, (0, 2, 1)))


def basis_weights(models: LocalModelSet, s) -> np.ndarray:
    """Normalised Gaussian weights (B, S, N) as plain arrays."""
    s = np.atleast_1d(np.asarray(s, float))
    if s.ndim == 1:
        s = np.broadcast_to(s, (len(models), len(s)))
    b, c = models.b.data[:, None, :], models.c.data[:, None, :]
    logits = -((s[:, :, None] - b) ** 2) / (2.0 * c ** 2)
    logits -= logits.max(axis=-1, keepdims=True)
    w = np.exp(logits)
    return w / w.sum(axis=-1, keepdims=True)


class ResidualBlock(Module):
    def __init__(self, width: int, rng):
        self.fc1 = Linear(width, width, rng)
        self.fc2 = Linear(width, width, rng)

    def __call__(self, x):
        return ad.relu(x + self.fc2(ad.relu(self.fc1(x))))


_SOFTPLUS_INV_ONE = float(np.log(np.expm1(1.0)))


class LocalModelHead(Module):
    """Latent code -> (amplitudes, sections, variance logits) -> LocalModelSet.

    Amplitudes are ``amplitude_scale[k] * softplus(raw)``; the output biases
    start at softplus^-1(1) so the initial amplitudes equal the scale, and the
    initial sections are equal.
    """

    def __init__(self, latent_dim: int = 32, n_models: int = 10, hidden: int = 128,
                 n_blocks: int = 3, amplitude_scale=(1.0, 1.0, 1.0, 1.0), seed: int = 0,
                 out_init_scale: float = 0.1):
        rng = np.random.default_rng(seed)
        self.inp = Linear(latent_dim, hidden, rng)
        self.blocks = [ResidualBlock(hidden, rng) for _ in range(n_blocks)]
        self.amp_out = Linear(hidden, 4 * n_models, rng, scale=out_init_scale)
        self.sec_out = Linear(hidden, n_models, rng, scale=out_init_scale)
        self.var_out = Linear(hidden, n_models, rng, scale=out_init_scale)
        self.amp_out.bias.data[:] = _SOFTPLUS_INV_ONE
        self.sec_out.bias.data[:] = _SOFTPLUS_INV_ONE
        self.var_out.bias.data[:] = 0.0
        self.n_models = n_models
        self.latent_dim = latent_dim
        self.amplitude_scale = np.asarray(amplitude_scale, dtype=np.float64).reshape(4)

    def _buffers(self):
        return {"amplitude_scale": self.amplitude_scale}

    def raw(self, z):
        h = ad.relu(self.inp(z))
        for block in self.blocks:
            h = block(h)
        return self.amp_out(h), self.sec_out(h), self.var_out(h)

    def __call__(self, z, s_max) -> LocalModelSet:
        return predict_local_models(z, s_max, self)


def predict_local_models(z, s_max, head: LocalModelHead) -> LocalModelSet:
    """Map latent codes (B, l) and per-row ``s_max`` (B,) to constrained local models."""
    z = ad.as_tensor(z)
    if z.ndim == 1:
        z = ad.reshape(z, (1, -1))
    s_max = np.broadcast_to(np.asarray(s_max, dtype=np.float64), (z.shape[0],)).copy()
    if np.any(s_max <= 0):
        raise ValueError("s_max must be positive")
    a_raw, d_raw, c_raw = head.raw(z)
    n = head.n_models
    amp = ad.softplus(ad.reshape(a_raw, (-1, 4, n))) * head.amplitude_scale.reshape(1, 4, 1)
    delta_s = scale_sections(ad.softplus(d_raw), s_max)
    centers = centers_from_sections(delta_s)
    var = squash_variance(c_raw, delta_s)
    return LocalModelSet(amp, centers, var, s_max)
