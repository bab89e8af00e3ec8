"""Two-stage training (VAE pretraining, then the local-model head) and checkpoints."""
from __future__ import annotations

import csv
import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Adam, AdamState, Tape
from .config import TrainConfig
from .data import AssemblyTask
from .dynamics import LpvSecondOrder, simulate_batch
from .geometry import chamfer
from .layers import Module
from .local_models import LocalModelHead, predict_local_models
from .vae import PointCloudVAE, kl_divergence, reparameterize, vae_loss

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
CHECKPOINT_MAGIC = "GEOCONTACT-CHECKPOINT"

STAGE_VAE, STAGE_HEAD = 1, 2
_PURPOSE_SHUFFLE, _PURPOSE_PAD, _PURPOSE_NOISE = 0, 1, 2


class CheckpointError(ValueError):
    """Unreadable, truncated or incompatible checkpoint."""


# ---------------------------------------------------------------- randomness

def counter_rng(seed: int, *counter: int) -> np.random.Generator:
    """Philox stream keyed by ``seed`` starting at the given counter words."""
    words = (list(counter) + [0, 0, 0, 0])[:4]
    return np.random.Generator(np.random.Philox(key=int(seed) % (1 << 64), counter=words))


def fisher_yates(n: int, rng: np.random.Generator) -> np.ndarray:
    order = np.arange(n)
    for i in range(n - 1, 0, -1):
        j = int(rng.integers(0, i + 1))
        order[i], order[j] = order[j], order[i]
    return order


def epoch_batches(n: int, batch: int, seed: int, stage: int, epoch: int) -> list[np.ndarray]:
    """Shuffled mini-batches; a short final batch is padded by resampling."""
    order = fisher_yates(n, counter_rng(seed, stage, epoch, _PURPOSE_SHUFFLE))
    batches = [order[i:i + batch] for i in range(0, n, batch)]
    if len(batches[-1]) < batch:
        pad_rng = counter_rng(seed, stage, epoch, _PURPOSE_PAD)
        extra = pad_rng.integers(0, n, batch - len(batches[-1]))
        batches[-1] = np.concatenate([batches[-1], order[extra]])
    return batches


# ---------------------------------------------------------------- model construction

def build_vae(config: TrainConfig) -> PointCloudVAE:
    m = config.model
    return PointCloudVAE(m.latent_dim, m.n_points, tuple(m.encoder_widths),
                         tuple(m.decoder_widths), m.decoder_output_scale, seed=config.seed)


def build_head(config: TrainConfig, amplitude_scale) -> LocalModelHead:
    m = config.model
    return LocalModelHead(m.latent_dim, m.n_models, m.head_hidden, m.head_blocks,
                          amplitude_scale, seed=config.seed + 1)


def resolve_amplitude_scale(config: TrainConfig, tasks: list[AssemblyTask]) -> np.ndarray:
    """Fill ``null`` entries of the configured amplitude scale from the data.

    a0/a1/a2 default to 1; b0 defaults to a2_scale times the median ratio of
    peak force to peak excitation (a static-gain guess).
    """
    scale = list(config.model.amplitude_scale)
    for k in range(3):
        if scale[k] is None:
            scale[k] = 1.0
    if scale[3] is None:
        ratios = [np.max(np.abs(r.F_meas)) / max(r.s_max, 1e-12)
                  for t in tasks for r in t.repeats]
        scale[3] = float(scale[2] * np.median(ratios)) if ratios else float(scale[2])
    return np.asarray(scale, dtype=np.float64)


def freeze(module: Module) -> None:
    for p in module.parameters():
        p.requires_grad = False


def state_checksum(state: dict[str, np.ndarray]) -> str:
    h = hashlib.sha256()
    for key in sorted(state):
        h.update(key.encode())
        h.update(np.ascontiguousarray(state[key], dtype="<f8").tobytes())
    return h.hexdigest()


def encoder_checksum(vae: PointCloudVAE) -> str:
    return state_checksum(vae.encoder.state_dict())


# ---------------------------------------------------------------- stage 1

@dataclass
class VaeRun:
    vae: PointCloudVAE
    optimizer: Adam
    history: list[dict] = field(default_factory=list)


def _samples(tasks: list[AssemblyTask]) -> list[tuple[int, int]]:
    return [(ti, ri) for ti, t in enumerate(tasks) for ri in range(len(t.repeats))]


def train_vae(tasks: list[AssemblyTask], config: TrainConfig,
              val_tasks: list[AssemblyTask] = (), vae: PointCloudVAE | None = None,
              progress=None) -> VaeRun:
    """Adam on chamfer + beta * KL over shuffled mini-batches.

    One sample per recorded repeat, so each task's cloud appears once per
    repeat per epoch. History rows: epoch, train_loss, val_loss, kl.
    """
    if not tasks:
        raise ValueError("train_vae needs at least one training task")
    cfg = config.stage1
    vae = vae or build_vae(config)
    opt = Adam(vae.parameters(), lr=cfg.lr)
    clouds = np.stack([t.cloud.points for t in tasks])
    samples = _samples(tasks)
    run = VaeRun(vae, opt)
    for epoch in range(cfg.epochs):
        losses, kls = [], []
        for bi, batch in enumerate(epoch_batches(len(samples), cfg.batch, config.seed,
                                                 STAGE_VAE, epoch)):
            x = clouds[[samples[i][0] for i in batch]]
            eps = counter_rng(config.seed, STAGE_VAE, epoch, _PURPOSE_NOISE + bi + 1) \
                .standard_normal((len(batch), vae.latent_dim))
            with Tape() as tape:
                code = vae.encode(x, train=True)
                rec = vae.decode(reparameterize(code, eps))
                loss = vae_loss(x, rec, code, cfg.beta)
            grads = tape.backward(loss)
            opt.step(grads)
            losses.append(loss.item())
            kls.append(float(kl_divergence(code).data.mean()))
        row = {"epoch": epoch, "train_loss": float(np.mean(losses)),
               "val_loss": vae_validation(vae, val_tasks), "kl": float(np.mean(kls))}
        run.history.append(row)
        if progress:
            progress(row)
    return run


def vae_validation(vae: PointCloudVAE, tasks: list[AssemblyTask]) -> float:
    """Mean chamfer of mean-latent reconstructions (eval mode); NaN without tasks."""
    if not tasks:
        return float("nan")
    with ad.no_grad():
        x = np.stack([t.cloud.points for t in tasks])
        rec = vae.decode(vae.encode(x, train=False).mu)
        return float(chamfer(x, rec).data.mean())


# ---------------------------------------------------------------- stage 2

@dataclass
class HeadRun:
    head: LocalModelHead
    optimizer: Adam
    history: list[dict] = field(default_factory=list)


def latent_means(vae: PointCloudVAE, tasks: list[AssemblyTask]) -> np.ndarray:
    """Encoder means in eval mode (frozen statistics); no tape is recorded."""
    if not tasks:
        return np.zeros((0, vae.latent_dim))
    with ad.no_grad():
        return vae.encode(np.stack([t.cloud.points for t in tasks]), train=False).mu.data.copy()


def _stack_batch(tasks, samples, batch):
    u = np.stack([tasks[samples[i][0]].repeats[samples[i][1]].u for i in batch])
    F = np.stack([tasks[samples[i][0]].repeats[samples[i][1]].F_meas for i in batch])
    dt = np.array([tasks[samples[i][0]].dt for i in batch])
    s_max = np.array([tasks[samples[i][0]].s_max for i in batch])
    return u, F, dt, s_max


def regression_loss(head: LocalModelHead, z, u, F, dt, s_max,
                    parameter_floor: float = 1e-6):
    """Batch mean of (1/n) e^T e with e = F - F_hat."""
    models = predict_local_models(z, s_max, head)
    F_hat = simulate_batch(LpvSecondOrder(models, parameter_floor), u, dt)
    return ad.mean(ad.square(F - F_hat)), F_hat


def train_head(tasks: list[AssemblyTask], vae: PointCloudVAE, config: TrainConfig,
               val_tasks: list[AssemblyTask] = (), head: LocalModelHead | None = None,
               progress=None) -> HeadRun:
    """Freeze the encoder and fit the head through the simulated contact model."""
    if not tasks:
        raise ValueError("train_head needs at least one training task")
    lengths = {len(r) for t in list(tasks) + list(val_tasks) for r in t.repeats}
    if len(lengths) != 1:
        raise ValueError(f"all trajectories must share one length, got {sorted(lengths)}")
    cfg = config.stage2
    freeze(vae.encoder)
    if head is None:
        head = build_head(config, resolve_amplitude_scale(config, tasks))
    if head.latent_dim != vae.latent_dim:
        raise ValueError("head and encoder latent dimensions differ")
    opt = Adam(head.parameters(), lr=cfg.lr)
    mu = latent_means(vae, tasks)
    samples = _samples(tasks)
    run = HeadRun(head, opt)
    floor = config.model.parameter_floor
    for epoch in range(cfg.epochs):
        losses = []
        for batch in epoch_batches(len(samples), cfg.batch, config.seed, STAGE_HEAD, epoch):
            u, F, dt, s_max = _stack_batch(tasks, samples, batch)
            z = mu[[samples[i][0] for i in batch]]
            with Tape() as tape:
                loss, _ = regression_loss(head, z, u, F, dt, s_max, floor)
            opt.step(tape.backward(loss))
            losses.append(loss.item())
        row = {"epoch": epoch, "train_loss": float(np.mean(losses)),
               "val_loss": head_validation(head, vae, val_tasks, floor)}
        run.history.append(row)
        if progress:
            progress(row)
    return run


def head_validation(head: LocalModelHead, vae: PointCloudVAE, tasks: list[AssemblyTask],
                    parameter_floor: float = 1e-6) -> float:
    """L_reg over every repeat of ``tasks`` using latent means; NaN without tasks."""
    if not tasks:
        return float("nan")
    mu = latent_means(vae, tasks)
    samples = _samples(tasks)
    u, F, dt, s_max = _stack_batch(tasks, samples, range(len(samples)))
    z = mu[[ti for ti, _ in samples]]
    with ad.no_grad():
        loss, _ = regression_loss(head, z, u, F, dt, s_max, parameter_floor)
    return loss.item()


# ---------------------------------------------------------------- history files

def write_history(path, history: list[dict]) -> None:
    keys = list(history[0]) if history else ["epoch", "train_loss", "val_loss"]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(keys)
        for row in history:
            w.writerow([repr(float(row[k])) if isinstance(row[k], float) else row[k] for k in keys])


# ---------------------------------------------------------------- checkpoints

@dataclass
class Checkpoint:
    config: TrainConfig
    tensors: dict[str, np.ndarray]
    meta: dict = field(default_factory=dict)
    version: int = CHECKPOINT_VERSION

    def has(self, prefix: str) -> bool:
        return any(k.startswith(prefix + ".") for k in self.tensors)

    def section(self, prefix: str) -> dict[str, np.ndarray]:
        n = len(prefix) + 1
        return {k[n:]: v for k, v in self.tensors.items() if k.startswith(prefix + ".")}

    def vae(self) -> PointCloudVAE:
        vae = build_vae(self.config)
        _load_into(vae, self.section("vae"), "vae")
        return vae

    def head(self) -> LocalModelHead:
        state = self.section("head")
        if "amplitude_scale" not in state:
            raise CheckpointError("checkpoint holds no local-model head")
        head = build_head(self.config, state["amplitude_scale"])
        _load_into(head, state, "head")
        return head


def _load_into(module: Module, state: dict[str, np.ndarray], what: str) -> None:
    try:
        module.load_state_dict(state)
    except (KeyError, ValueError) as err:
        raise CheckpointError(f"{what} tensors do not match the configuration: {err}") from err


def make_checkpoint(config: TrainConfig, vae: PointCloudVAE | None = None,
                    head: LocalModelHead | None = None,
                    optimizers: dict[str, Adam] | None = None,
                    history: dict[str, list] | None = None) -> Checkpoint:
    tensors: dict[str, np.ndarray] = {}
    meta: dict = {"history": history or {}, "optimizers": {}}
    for prefix, module in (("vae", vae), ("head", head)):
        if module is not None:
            for k, v in module.state_dict().items():
                tensors[f"{prefix}.{k}"] = np.array(v, dtype=np.float64)
    for name, opt in (optimizers or {}).items():
        st = opt.state
        meta["optimizers"][name] = {"step_count": st.step_count, "lr": opt.lr,
                                    "beta1": st.beta1, "beta2": st.beta2,
                                    "epsilon": st.epsilon}
        for i, (m, v) in enumerate(zip(st.first_moment, st.second_moment)):
            tensors[f"adam.{name}.m.{i}"] = m.copy()
            tensors[f"adam.{name}.v.{i}"] = v.copy()
    return Checkpoint(config, tensors, meta)


def restore_optimizer(ckpt: Checkpoint, name: str, params) -> Adam:
    info = ckpt.meta["optimizers"][name]
    params = list(params)
    state = AdamState([ckpt.tensors[f"adam.{name}.m.{i}"].copy() for i in range(len(params))],
                      [ckpt.tensors[f"adam.{name}.v.{i}"].copy() for i in range(len(params))],
                      info["step_count"], info["beta1"], info["beta2"], info["epsilon"])
    return Adam(params, info["lr"], state)


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    """Text header line + JSON metadata line, then little-endian float64 blobs."""
    directory, offset = [], 0
    for name, arr in ckpt.tensors.items():
        directory.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.size
    header = {"version": ckpt.version, "config": ckpt.config.to_dict(), "meta": ckpt.meta,
              "tensors": directory, "total": offset}
    with open(path, "wb") as fh:
        fh.write(f"{CHECKPOINT_MAGIC} {ckpt.version}\n".encode())
        fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        for arr in ckpt.tensors.values():
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path) -> Checkpoint:
    try:
        blob = Path(path).read_bytes()
    except OSError as err:
        raise CheckpointError(f"cannot read checkpoint {path}: {err}") from err
    first = blob.find(b"\n")
    second = blob.find(b"\n", first + 1)
    if first < 0 or second < 0:
        raise CheckpointError(f"{path}: missing checkpoint header")
    magic = blob[:first].decode(errors="replace").split()
    if len(magic) != 2 or magic[0] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a geocontact checkpoint")
    version = int(magic[1])
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version} "
                              f"(this build reads version {CHECKPOINT_VERSION})")
    header = json.loads(blob[first + 1:second])
    data = blob[second + 1:]
    if len(data) != 8 * header["total"]:
        raise CheckpointError(f"{path}: tensor data is {len(data)} bytes, "
                              f"expected {8 * header['total']}")
    values = np.frombuffer(data, dtype="<f8")
    tensors = {}
    for entry in header["tensors"]:
        count = int(np.prod(entry["shape"], dtype=np.int64))
        start = entry["offset"]
        if start + count > header["total"]:
            raise CheckpointError(f"{path}: tensor {entry['name']} exceeds data block")
        tensors[entry["name"]] = values[start:start + count].reshape(entry["shape"]).astype(
            np.float64)
    try:
        config = TrainConfig.from_dict(header["config"])
    except (TypeError, ValueError) as err:
        raise CheckpointError(f"{path}: bad configuration block ({err})") from err
    return Checkpoint(config, tensors, header.get("meta", {}), version)
