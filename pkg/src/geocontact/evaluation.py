"""Fit metrics, per-task inference and evaluation reports."""
from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import autodiff as ad
from .data import AssemblyTask
from .dynamics import LpvSecondOrder, simulate_batch
from .geometry import mean_nn_distance
from .local_models import LocalModelHead, LocalModelSet, predict_local_models
from .vae import PointCloudVAE


def nmse(F, F_hat) -> float:
    """sum (F - F_hat)^2 / sum (F - mean F)^2."""
    F = np.asarray(F, dtype=np.float64)
    F_hat = np.asarray(F_hat, dtype=np.float64)
    if F.shape != F_hat.shape or F.size < 2:
        raise ValueError("nmse needs two equal-length signals with >= 2 samples")
    denom = np.sum((F - F.mean()) ** 2)
    if denom == 0:
        raise ValueError("nmse is undefined for a constant reference signal")
    return float(np.sum((F - F_hat) ** 2) / denom)


def fit_ratio(F, F_hat) -> float:
    """(1 - nmse) * 100; negative for fits worse than the mean."""
    return (1.0 - nmse(F, F_hat)) * 100.0


def derivative(F, dt: float) -> np.ndarray:
    """Central differences inside, one-sided at both ends."""
    F = np.asarray(F, dtype=np.float64)
    d = np.empty_like(F)
    d[1:-1] = (F[2:] - F[:-2]) / (2.0 * dt)
    d[0] = (F[1] - F[0]) / dt
    d[-1] = (F[-1] - F[-2]) / dt
    return d


def fit_ratio_derivative(F, F_hat, dt: float) -> float:
    if len(F) < 3:
        raise ValueError("derivative fit needs >= 3 samples")
    return fit_ratio(derivative(F, dt), derivative(F_hat, dt))


def rms(F, F_hat) -> float:
    e = np.asarray(F, dtype=np.float64) - np.asarray(F_hat, dtype=np.float64)
    return float(np.sqrt(np.mean(e * e)))


def rms_rel(F, F_hat) -> float:
    """RMS error after dividing by the peak absolute measured force."""
    F = np.asarray(F, dtype=np.float64)
    peak = np.max(np.abs(F))
    if peak == 0:
        raise ValueError("rms_rel needs a non-zero measured force")
    e = (F - np.asarray(F_hat, dtype=np.float64)) / peak
    return float(np.sqrt(np.mean(e * e)))


# ---------------------------------------------------------------- inference

@dataclass
class Prediction:
    F_hat: np.ndarray
    models: LocalModelSet
    reconstruction_error: float = float("nan")


def predict(vae: PointCloudVAE, head: LocalModelHead, clouds: np.ndarray, u: np.ndarray,
            dt, s_max, parameter_floor: float = 1e-6, reconstruct: bool = False) -> list[Prediction]:
    """Encode clouds (B, n, 3) with latent means and simulate each excitation row."""
    with ad.no_grad():
        code = vae.encode(clouds, train=False)
        models = predict_local_models(code.mu, s_max, head)
        F_hat = simulate_batch(LpvSecondOrder(models, parameter_floor), u, dt).data
        recon = vae.decode(code.mu).data if reconstruct else None
    out = []
    for i in range(len(F_hat)):
        err = mean_nn_distance(clouds[i], recon[i]) if reconstruct else float("nan")
        out.append(Prediction(F_hat[i].copy(), models.row(i), err))
    return out


def simulate_truth(task: AssemblyTask, parameter_floor: float = 1e-6) -> np.ndarray:
    if task.truth is None:
        raise ValueError(f"task {task.id} has no ground-truth model")
    with ad.no_grad():
        return simulate_batch(LpvSecondOrder(task.truth, parameter_floor),
                              task.u[None], task.dt).data[0].copy()


# ---------------------------------------------------------------- reports

@dataclass
class TaskResult:
    task: str
    split: str
    fit_F: float
    fit_dF: float
    rms: float
    rms_rel: float
    chamfer_mean_distance: float = float("nan")


def score(task: AssemblyTask, F_hat: np.ndarray, recon_error: float = float("nan")) -> TaskResult:
    F = task.reference_force()
    return TaskResult(task.id, task.split, fit_ratio(F, F_hat),
                      fit_ratio_derivative(F, F_hat, task.dt), rms(F, F_hat), rms_rel(F, F_hat),
                      recon_error)


@dataclass
class EvalReport:
    rows: list[TaskResult] = field(default_factory=list)

    def aggregates(self) -> dict[str, dict[str, float]]:
        out = {}
        for split in dict.fromkeys(r.split for r in self.rows):
            sel = [r for r in self.rows if r.split == split]
            out[split] = {k: float(np.mean([getattr(r, k) for r in sel]))
                          for k in ("fit_F", "fit_dF", "rms", "rms_rel", "chamfer_mean_distance")}
        return out

    def to_csv(self, path) -> None:
        names = [f.name for f in fields(TaskResult)]
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(names)
            for r in self.rows:
                w.writerow([v if isinstance(v, str) else repr(float(v))
                            for v in asdict(r).values()])

    @classmethod
    def from_csv(cls, path) -> "EvalReport":
        with open(path, newline="", encoding="utf-8") as fh:
            rows = []
            for item in csv.DictReader(fh):
                rows.append(TaskResult(item["task"], item["split"],
                                       *(float(item[f.name]) for f in fields(TaskResult)[2:])))
        return cls(rows)

    def summary(self) -> str:
        lines = [f"{'task':<16}{'split':<7}{'FIT(F) %':>10}{'FIT(dF) %':>11}"
                 f"{'rms N':>10}{'rms_rel':>9}{'recon m':>11}"]
        for r in self.rows:
            recon = "-" if math.isnan(r.chamfer_mean_distance) else f"{r.chamfer_mean_distance:.3e}"
            lines.append(f"{r.task:<16}{r.split:<7}{r.fit_F:>10.2f}{r.fit_dF:>11.2f}"
                         f"{r.rms:>10.4f}{r.rms_rel:>9.4f}{recon:>11}")
        for split, agg in self.aggregates().items():
            lines.append(f"[{split}] mean FIT(F) {agg['fit_F']:.2f} %, FIT(dF) {agg['fit_dF']:.2f} %, "
                         f"rms {agg['rms']:.4f} N, rms_rel {agg['rms_rel']:.4f}")
        return "\n".join(lines)


def evaluate_tasks(tasks: list[AssemblyTask], vae: PointCloudVAE | None = None,
                   head: LocalModelHead | None = None, parameter_floor: float = 1e-6,
                   ground_truth: bool = False) -> EvalReport:
    """Score each task against its reference force, in manifest order.

    With ``ground_truth`` the stored true local models replace the network.
    """
    report = EvalReport()
    for task in tasks:
        if ground_truth:
            report.rows.append(score(task, simulate_truth(task, parameter_floor)))
            continue
        pred = predict(vae, head, task.cloud.points[None], task.u[None], task.dt,
                       task.s_max, parameter_floor, reconstruct=True)[0]
        report.rows.append(score(task, pred.F_hat, pred.reconstruction_error))
    return report
