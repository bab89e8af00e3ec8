"""PointNet-style variational autoencoder over fixed-size point clouds."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .geometry import chamfer
from .layers import Linear, Module, PointwiseConv


@dataclass
class LatentCode:
    mu: Tensor
    log_var: Tensor

    @property
    def sigma(self) -> np.ndarray:
        return np.exp(0.5 * self.log_var.data)


class Encoder(Module):
    """Shared per-point MLP (conv1d k=1 + BN + ReLU), max pooling, two linear heads."""

    def __init__(self, latent_dim: int = 32, widths=(64, 64, 64, 128, 1024), rng=None):
        rng = np.random.default_rng(rng)
        chans = (3,) + tuple(widths)
        self.blocks = [PointwiseConv(chans[i], chans[i + 1], rng) for i in range(len(widths))]
        self.mu_head = Linear(chans[-1], latent_dim, rng)
        self.log_var_head = Linear(chans[-1], latent_dim, rng)
        self.latent_dim = latent_dim

    def __call__(self, clouds, train: bool = False) -> LatentCode:
        """clouds: (batch, points, 3) array or Tensor."""
        x = ad.transpose(ad.as_tensor(clouds), (0, 2, 1))
        for block in self.blocks:
            x = block(x, train)
        feat = ad.max_over_points(x)
        return LatentCode(self.mu_head(feat), self.log_var_head(feat))


class Decoder(Module):
    """Fully connected l -> 256 -> 512 -> 3n; output multiplied by ``output_scale`` metres."""

    def __init__(self, latent_dim: int = 32, n_points: int = 4096, widths=(256, 512),
                 output_scale: float = 0.01, rng=None):
        rng = np.random.default_rng(rng)
        dims = (latent_dim,) + tuple(widths) + (3 * n_points,)
        self.layers = [Linear(dims[i], dims[i + 1], rng) for i in range(len(dims) - 1)]
        self.n_points = n_points
        self.output_scale = output_scale

    def __call__(self, z) -> Tensor:
        h = ad.as_tensor(z)
        for i, layer in enumerate(self.layers):
            h = layer(h)
            if i < len(self.layers) - 1:
                h = ad.relu(h)
        return ad.reshape(h * self.output_scale, (-1, self.n_points, 3))


class PointCloudVAE(Module):
    def __init__(self, latent_dim: int = 32, n_points: int = 4096,
                 encoder_widths=(64, 64, 64, 128, 1024), decoder_widths=(256, 512),
                 output_scale: float = 0.01, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.encoder = Encoder(latent_dim, encoder_widths, rng)
        self.decoder = Decoder(latent_dim, n_points, decoder_widths, output_scale, rng)
        self.latent_dim = latent_dim
        self.n_points = n_points

    def encode(self, clouds, train: bool = False) -> LatentCode:
        clouds = ad.as_tensor(clouds)
        if clouds.ndim == 2:
            clouds = ad.reshape(clouds, (1,) + clouds.shape)
        if clouds.shape[1] != self.n_points:
            raise ValueError(f"expected {self.n_points} points, got {clouds.shape[1]}")
        return self.encoder(clouds, train)

    def decode(self, z) -> Tensor:
        return self.decoder(z)


def reparameterize(code: LatentCode, eps) -> Tensor:
    """z = mu + exp(log_var / 2) * eps."""
    return code.mu + ad.exp(code.log_var * 0.5) * eps


def kl_divergence(code: LatentCode) -> Tensor:
    """KL(q || N(0, I)) summed over latent dimensions; one value per batch row."""
    lv = code.log_var
    terms = 1.0 + lv - ad.square(code.mu) - ad.exp(lv)
    return ad.tsum(terms, axis=-1) * -0.5


def vae_loss(clouds, reconstruction, code: LatentCode, beta: float) -> Tensor:
    """Batch mean of chamfer(cloud, reconstruction) + beta * KL."""
    clouds = ad.as_tensor(clouds)
    if clouds.ndim == 2:
        clouds = ad.reshape(clouds, (1,) + clouds.shape)
    rec = chamfer(clouds, reconstruction)
    return ad.mean(rec + kl_divergence(code) * beta)
