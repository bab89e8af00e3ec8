"""Parameter containers for the networks (weights live in ``Tensor`` leaves)."""
from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


class Module:
    """Minimal parameter registry: attributes that are Tensors, Modules or lists of Modules."""

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for key, val in vars(self).items():
            if isinstance(val, Tensor):
                out[prefix + key] = val
            elif isinstance(val, Module):
                out.update(val.named_parameters(f"{prefix}{key}."))
            elif isinstance(val, list):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        out.update(item.named_parameters(f"{prefix}{key}.{i}."))
        return out

    def named_buffers(self, prefix: str = "") -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        for key, val in vars(self).items():
            if isinstance(val, Module):
                out.update(val.named_buffers(f"{prefix}{key}."))
            elif isinstance(val, list):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        out.update(item.named_buffers(f"{prefix}{key}.{i}."))
        out.update({prefix + k: v for k, v in self._buffers().items()})
        return out

    def _buffers(self) -> dict[str, np.ndarray]:
        return {}

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {k: v.data for k, v in self.named_parameters().items()}
        state.update(self.named_buffers())
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = self.named_parameters()
        buffers = self.named_buffers()
        missing = (set(params) | set(buffers)) - set(state)
        if missing:
            raise KeyError(f"missing tensors: {sorted(missing)[:5]}")
        for k, p in params.items():
            if state[k].shape != p.shape:
                raise ValueError(f"shape mismatch for {k}: {state[k].shape} vs {p.shape}")
            p.data = np.array(state[k], dtype=np.float64)
        for k, b in buffers.items():
            if state[k].shape != b.shape:
                raise ValueError(f"shape mismatch for {k}: {state[k].shape} vs {b.shape}")
            b[...] = state[k]


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, scale: float = 1.0):
        bound = scale / np.sqrt(n_in)
        self.weight = Tensor(rng.uniform(-bound, bound, (n_in, n_out)), requires_grad=True)
        self.bias = Tensor(rng.uniform(-bound, bound, n_out), requires_grad=True)

    def __call__(self, x) -> Tensor:
        return ad.linear(x, self.weight, self.bias)


class PointwiseConv(Module):
    """Kernel-size-1 convolution with batch normalisation and ReLU."""

    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator,
                 momentum: float = 0.1, eps: float = 1e-5):
        bound = 1.0 / np.sqrt(c_in)
        self.weight = Tensor(rng.uniform(-bound, bound, (c_in, c_out)), requires_grad=True)
        self.bias = Tensor(rng.uniform(-bound, bound, c_out), requires_grad=True)
        self.gamma = Tensor(np.ones(c_out), requires_grad=True)
        self.beta = Tensor(np.zeros(c_out), requires_grad=True)
        self.running_mean = np.zeros(c_out)
        self.running_var = np.ones(c_out)
        self.momentum, self.eps = momentum, eps

    def _buffers(self):
        return {"running_mean": self.running_mean, "running_var": self.running_var}

    def __call__(self, x, train: bool) -> Tensor:
        h = ad.shared_pointwise(x, self.weight, self.bias)
        h = ad.batchnorm(h, self.gamma, self.beta, self.running_mean, self.running_var,
                         train, self.momentum, self.eps)
        return ad.relu(h)
