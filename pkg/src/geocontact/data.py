"""Assembly-task datasets: trajectory preprocessing, manifests and synthetic part families."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

from .dynamics import LpvSecondOrder, Trajectory, simulate
from .geometry import (PointCloud, TriangleMesh, center_cloud, eliminate_samples,
                       load_cloud, load_mesh, preprocess_mesh, save_cloud, save_mesh)
from .local_models import LocalModelSet, variance_bounds

SPLITS = ("train", "val", "test")
MANIFEST_VERSION = 1


class DataError(ValueError):
    """Malformed dataset input (manifest, trajectory, mesh)."""


# ---------------------------------------------------------------- trajectories

def tail_length(T: int, tail_fraction: float = 0.1) -> int:
    return int(math.ceil(tail_fraction * T))


def preprocess_trajectory(t, p_z, F_z, T: int = 512, tail_fraction: float = 0.1) -> Trajectory:
    """Zero-start, resample to ``T`` uniform samples, append a constant tail.

    The final sample of both signals is repeated ceil(tail_fraction * T)
    times so the model sees the steady state.
    """
    t = np.asarray(t, dtype=np.float64)
    p_z = np.asarray(p_z, dtype=np.float64)
    F_z = np.asarray(F_z, dtype=np.float64)
    if len(t) < 2:
        raise DataError("a trajectory needs at least 2 samples")
    if not (len(t) == len(p_z) == len(F_z)):
        raise DataError("t, p_z and F_z lengths differ")
    if np.any(np.diff(t) <= 0):
        raise DataError("timestamps must be strictly increasing")
    u = p_z - p_z[0]
    F = F_z - F_z[0]
    grid = np.linspace(t[0], t[-1], T)
    u = np.interp(grid, t, u)
    F = np.interp(grid, t, F)
    u[-1], F[-1] = p_z[-1] - p_z[0], F_z[-1] - F_z[0]
    k = tail_length(T, tail_fraction)
    u = np.concatenate([u, np.full(k, u[-1])])
    F = np.concatenate([F, np.full(k, F[-1])])
    return Trajectory((t[-1] - t[0]) / (T - 1), u, F)


def read_trajectory_csv(path) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Read ``t,p_z,F_z`` columns (SI units, header required)."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = [h.strip() for h in next(reader, [])]
        if header[:3] != ["t", "p_z", "F_z"]:
            raise DataError(f"{path}: expected header t,p_z,F_z, got {header}")
        rows = []
        for lineno, row in enumerate(reader, 2):
            if not row:
                continue
            try:
                rows.append([float(v) for v in row[:3]])
            except ValueError as err:
                raise DataError(f"{path}:{lineno}: non-numeric value") from err
    if not rows:
        raise DataError(f"{path}: no samples")
    arr = np.array(rows)
    return arr[:, 0], arr[:, 1], arr[:, 2]


def write_trajectory_csv(path, traj: Trajectory, force=None) -> None:
    force = traj.F_meas if force is None else force
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "p_z", "F_z"])
        for i in range(len(traj)):
            w.writerow([repr(float(i * traj.dt)), repr(float(traj.u[i])), repr(float(force[i]))])


def load_trajectory(path, preprocessed: bool, T: int = 512,
                    tail_fraction: float = 0.1) -> Trajectory:
    t, p, f = read_trajectory_csv(path)
    if preprocessed:
        if len(t) < 2:
            raise DataError(f"{path}: too short")
        return Trajectory(float(t[1] - t[0]), p, f)
    return preprocess_trajectory(t, p, f, T, tail_fraction)


# ---------------------------------------------------------------- tasks

@dataclass
class AssemblyTask:
    id: str
    domain: str
    cloud: PointCloud
    repeats: list[Trajectory]
    split: str = "train"
    reference: np.ndarray | None = None
    truth: LocalModelSet | None = None
    geometry_value: float | None = None

    def __post_init__(self):
        if not self.repeats:
            raise DataError(f"task {self.id}: needs at least one trajectory")
        n, dt = len(self.repeats[0]), self.repeats[0].dt
        for r in self.repeats:
            if len(r) != n or not np.isclose(r.dt, dt, rtol=1e-9, atol=0):
                raise DataError(f"task {self.id}: repeats differ in length or dt")

    @property
    def s_max(self) -> float:
        return max(r.s_max for r in self.repeats)

    @property
    def dt(self) -> float:
        return self.repeats[0].dt

    @property
    def u(self) -> np.ndarray:
        return self.repeats[0].u

    def reference_force(self) -> np.ndarray:
        """Noise-free force when known (synthetic), else the mean over repeats."""
        if self.reference is not None:
            return self.reference
        return np.mean([r.F_meas for r in self.repeats], axis=0)


@dataclass
class ManifestEntry:
    id: str
    domain: str
    split: str
    mesh: str | None = None
    cloud: str | None = None
    trajectories: list[str] = field(default_factory=list)
    preprocessed: bool = False
    reference: str | None = None
    truth: str | None = None
    geometry_value: float | None = None


@dataclass
class DatasetManifest:
    entries: list[ManifestEntry]
    root: Path = Path(".")

    def __post_init__(self):
        ids = [e.id for e in self.entries]
        if len(set(ids)) != len(ids):
            raise DataError("manifest task ids must be unique")
        for e in self.entries:
            if e.split not in SPLITS:
                raise DataError(f"task {e.id}: split must be one of {SPLITS}, got {e.split!r}")
            if e.mesh is None and e.cloud is None:
                raise DataError(f"task {e.id}: needs a mesh or a cloud")
            if not e.trajectories:
                raise DataError(f"task {e.id}: no trajectories")

    def split(self, name: str) -> list[ManifestEntry]:
        return [e for e in self.entries if e.split == name]

    def save(self, path) -> None:
        doc = {"version": MANIFEST_VERSION, "tasks": []}
        for e in self.entries:
            item = {k: v for k, v in vars(e).items() if v is not None}
            doc["tasks"].append(item)
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("# geocontact dataset manifest\n")
            yaml.safe_dump(doc, fh, sort_keys=False)

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        path = Path(path)
        try:
            doc = yaml.safe_load(path.read_text(encoding="utf-8"))
        except (OSError, yaml.YAMLError) as err:
            raise DataError(f"{path}: cannot read manifest ({err})") from err
        if not isinstance(doc, dict) or "tasks" not in doc:
            raise DataError(f"{path}: manifest needs a 'tasks' list")
        if doc.get("version", MANIFEST_VERSION) != MANIFEST_VERSION:
            raise DataError(f"{path}: unsupported manifest version {doc.get('version')}")
        entries = []
        for item in doc["tasks"]:
            try:
                entries.append(ManifestEntry(**item))
            except TypeError as err:
                raise DataError(f"{path}: bad task entry {item!r}") from err
        return cls(entries, path.parent)


def load_task(entry: ManifestEntry, root: Path, n_points: int = 4096, T: int = 512,
              tail_fraction: float = 0.1, oversample: int = 10, seed: int = 0) -> AssemblyTask:
    root = Path(root)
    if entry.cloud is not None:
        cloud = load_cloud(root / entry.cloud)
        if cloud.n != n_points:
            if cloud.n < n_points:
                raise DataError(f"task {entry.id}: cloud has {cloud.n} < {n_points} points")
            cloud = eliminate_samples(cloud, n_points)
        cloud = center_cloud(cloud)
    else:
        cloud = preprocess_mesh(load_mesh(root / entry.mesh), n_points, oversample, seed)
    repeats = [load_trajectory(root / p, entry.preprocessed, T, tail_fraction)
               for p in entry.trajectories]
    reference = truth = None
    if entry.reference is not None:
        reference = load_trajectory(root / entry.reference, True).F_meas
    if entry.truth is not None:
        truth = LocalModelSet.from_csv(root / entry.truth)
    return AssemblyTask(entry.id, entry.domain, cloud, repeats, entry.split, reference, truth,
                        entry.geometry_value)


def load_tasks(manifest: DatasetManifest, split: str | None = None, **kw) -> list[AssemblyTask]:
    entries = manifest.entries if split is None else manifest.split(split)
    return [load_task(e, manifest.root, **kw) for e in entries]


# ---------------------------------------------------------------- part generators

def _ring(radius, z, segments, cx=0.0, cy=0.0):
    ang = 2.0 * np.pi * np.arange(segments) / segments
    return np.column_stack([cx + radius * np.cos(ang), cy + radius * np.sin(ang),
                            np.full(segments, z)])


def _cylinder(r_bottom, r_top, z0, z1, segments, cx=0.0, cy=0.0):
    verts = np.vstack([_ring(r_bottom, z0, segments, cx, cy), _ring(r_top, z1, segments, cx, cy),
                       [[cx, cy, z0], [cx, cy, z1]]])
    bc, tc = 2 * segments, 2 * segments + 1
    tris = []
    for i in range(segments):
        j = (i + 1) % segments
        tris += [(i, j, segments + j), (i, segments + j, segments + i),
                 (bc, j, i), (tc, segments + i, segments + j)]
    return verts, np.array(tris)


def _box(x0, x1, y0, y1, z0, z1):
    v = np.array([[x, y, z] for z in (z0, z1) for y in (y0, y1) for x in (x0, x1)])
    quads = [(0, 2, 3, 1), (4, 5, 7, 6), (0, 1, 5, 4), (2, 6, 7, 3), (0, 4, 6, 2), (1, 3, 7, 5)]
    tris = [t for a, b, c, d in quads for t in ((a, b, c), (a, c, d))]
    return v, np.array(tris)


def _merge(parts) -> TriangleMesh:
    verts, tris, off = [], [], 0
    for v, t in parts:
        verts.append(v)
        tris.append(t + off)
        off += len(v)
    return TriangleMesh(np.vstack(verts), np.vstack(tris))


def generate_pin(diameter_mm: float, length_mm: float, taper: float = 0.0,
                 segments: int = 64) -> TriangleMesh:
    """Closed (optionally tapered) cylinder along z, in metres.

    ``taper`` is the fractional radius reduction at the tip.
    """
    if diameter_mm <= 0 or length_mm <= 0:
        raise ValueError("pin diameter and length must be positive")
    r = diameter_mm / 2000.0
    return _merge([_cylinder(r, r * (1.0 - taper), 0.0, length_mm / 1000.0, segments)])


CONNECTOR_PITCH = 2.77e-3
CONNECTOR_ROW_GAP = 2.84e-3


def generate_connector(contact_count: int, pin_diameter_mm: float = 1.0,
                       pin_length_mm: float = 6.0, segments: int = 16) -> TriangleMesh:
    """Rectangular shell with ``contact_count`` pins in two staggered rows (D-sub like)."""
    if contact_count < 1:
        raise ValueError("contact count must be >= 1")
    top = (contact_count + 1) // 2
    bottom = contact_count - top
    width = top * CONNECTOR_PITCH + 4e-3
    height = CONNECTOR_ROW_GAP + 5e-3
    parts = [_box(-width / 2, width / 2, -height / 2, height / 2, 0.0, 8e-3)]
    r = pin_diameter_mm / 2000.0
    z0, z1 = -pin_length_mm / 1000.0, 0.0
    for row, count, y in ((0, top, CONNECTOR_ROW_GAP / 2), (1, bottom, -CONNECTOR_ROW_GAP / 2)):
        xs = (np.arange(count) - (count - 1) / 2.0) * CONNECTOR_PITCH
        for x in xs:
            parts.append(_cylinder(r, r, z0, z1, segments, x, y))
    return _merge(parts)


def mesh_components(mesh: TriangleMesh) -> int:
    """Number of vertex-connected components."""
    t = mesh.triangles
    rows = np.concatenate([t[:, 0], t[:, 1], t[:, 2]])
    cols = np.concatenate([t[:, 1], t[:, 2], t[:, 0]])
    adj = coo_matrix((np.ones(len(rows)), (rows, cols)), shape=(len(mesh.vertices),) * 2)
    return int(connected_components(adj, directed=False)[0])


def edge_use_counts(mesh: TriangleMesh) -> np.ndarray:
    t = mesh.triangles
    edges = np.sort(np.vstack([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]]), axis=1)
    _, counts = np.unique(edges, axis=0, return_counts=True)
    return counts


# ---------------------------------------------------------------- synthetic families

@dataclass
class SyntheticFamily:
    """Parametric part family with a known ground-truth contact model.

    Ground truth (N=4 equal sections over the insertion depth, shared
    mid-range widths): a0 = 1, a1 = 2 zeta omega, a2 = omega^2 constant and
    b0 = omega^2 * kappa * g * level(s) with level rising 0.25 -> 1 in three
    steps, so the static gain is kappa * g * level(s) newtons per metre.
    """

    kind: str = "pin"
    grid: tuple[float, ...] = (4.0, 5.0, 6.0, 8.0, 9.0, 10.0, 12.0, 14.0)
    kappa: float = 100.0
    omega: float = 20.0
    zeta: float = 0.5
    levels: tuple[float, ...] = (0.25, 0.5, 0.75, 1.0)
    depth: float = 0.01
    ramp_time: float = 2.0
    hold_time: float = 0.5
    noise_fraction: float = 0.01
    repeats: int = 10
    pin_length_mm: float = 30.0
    taper: float = 0.0

    @property
    def domain(self) -> str:
        return {"pin": "pins", "connector": "dsub"}.get(self.kind, self.kind)

    def mesh(self, g: float) -> TriangleMesh:
        if self.kind == "pin":
            return generate_pin(g, self.pin_length_mm, self.taper)
        if self.kind == "connector":
            return generate_connector(int(round(g)))
        raise ValueError(f"unknown family kind {self.kind!r}")

    def truth(self, g: float) -> LocalModelSet:
        n = len(self.levels)
        sec = self.depth / n
        b = (np.arange(n) + 0.5) * sec
        c_min, c_max = variance_bounds(sec)
        c = np.full(n, 0.5 * (c_min + c_max))
        w2 = self.omega ** 2
        a = np.vstack([np.ones(n), np.full(n, 2.0 * self.zeta * self.omega), np.full(n, w2),
                       w2 * self.kappa * g * np.asarray(self.levels)])
        return LocalModelSet.from_arrays(a, b, c, self.depth)

    def excitation(self, T: int = 512, tail_fraction: float = 0.1) -> Trajectory:
        """Depth ramp then hold, preprocessed onto the training grid."""
        t = np.linspace(0.0, self.ramp_time + self.hold_time, T)
        p = self.depth * np.clip(t / self.ramp_time, 0.0, 1.0)
        return preprocess_trajectory(t, p, np.zeros(T), T, tail_fraction)


def synthesize_task(family: SyntheticFamily, g: float, seed: int = 0, n_points: int = 4096,
                    T: int = 512, tail_fraction: float = 0.1, oversample: int = 10,
                    split: str = "train", task_id: str | None = None) -> AssemblyTask:
    """Build a task whose measured forces come from the family's true model plus noise.

    Noise is zero-mean Gaussian with sigma = noise_fraction * peak force,
    drawn independently per repeat; the first sample stays exactly 0.
    """
    cloud = preprocess_mesh(family.mesh(g), n_points, oversample, seed=[seed, 0])
    truth = family.truth(g)
    template = family.excitation(T, tail_fraction)
    clean = simulate(LpvSecondOrder(truth), template).F_hat
    sigma = family.noise_fraction * np.max(np.abs(clean))
    repeats = []
    for r in range(family.repeats):
        noise = np.random.default_rng([seed, 1, r]).normal(0.0, 1.0, len(clean)) * sigma
        noise[0] = 0.0
        repeats.append(Trajectory(template.dt, template.u.copy(), clean + noise))
    tid = task_id or f"{family.kind}{g:g}"
    return AssemblyTask(tid, family.domain, cloud, repeats, split, clean, truth, float(g))


def write_synthetic_dataset(out_dir, family: SyntheticFamily, splits: dict[str, list[float]],
                            seed: int = 0, n_points: int = 4096, T: int = 512,
                            tail_fraction: float = 0.1, oversample: int = 10) -> DatasetManifest:
    """Generate every task in ``splits`` and write meshes, clouds, CSVs and a manifest."""
    out = Path(out_dir)
    for sub in ("meshes", "clouds", "trajectories", "truth"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    entries = []
    for split, values in splits.items():
        for g in values:
            task = synthesize_task(family, g, seed, n_points, T, tail_fraction, oversample, split)
            tid = task.id
            save_mesh(family.mesh(g), out / "meshes" / f"{tid}.obj")
            save_cloud(task.cloud, out / "clouds" / f"{tid}.csv")
            paths = []
            for r, traj in enumerate(task.repeats):
                p = Path("trajectories") / f"{tid}_r{r}.csv"
                write_trajectory_csv(out / p, traj)
                paths.append(str(p))
            ref = Path("trajectories") / f"{tid}_reference.csv"
            write_trajectory_csv(out / ref, task.repeats[0], task.reference)
            truth = Path("truth") / f"{tid}.csv"
            task.truth.to_csv(out / truth)
            entries.append(ManifestEntry(tid, task.domain, split, f"meshes/{tid}.obj",
                                         f"clouds/{tid}.csv", paths, True, str(ref), str(truth),
                                         float(g)))
    manifest = DatasetManifest(entries, out)
    manifest.save(out / "manifest.yaml")
    return manifest
