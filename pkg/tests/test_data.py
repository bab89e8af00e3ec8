import numpy as np
import pytest

from geocontact.data import (AssemblyTask, DataError, DatasetManifest, ManifestEntry,
                             SyntheticFamily, edge_use_counts, generate_connector, generate_pin,
                             load_task, load_tasks, mesh_components, preprocess_trajectory,
                             read_trajectory_csv, synthesize_task, tail_length,
                             write_synthetic_dataset, write_trajectory_csv)
from geocontact.dynamics import LpvSecondOrder, Trajectory, simulate
from geocontact.evaluation import fit_ratio
from geocontact.geometry import chamfer, preprocess_mesh

FAST = dict(n_points=64, T=64)


def test_preprocess_zero_started_uniform_input():
    t = np.linspace(0, 1, 512)
    u = np.linspace(0, 0.01, 512)
    F = u * 100
    traj = preprocess_trajectory(t, u, F)
    k = tail_length(512)
    assert k == 52 and len(traj) == 512 + k
    assert np.allclose(traj.u[:512], u, atol=1e-18) and np.allclose(traj.F_meas[:512], F)
    assert traj.dt == pytest.approx(1 / 511)


def test_preprocess_zero_start_and_tail():
    rng = np.random.default_rng(0)
    t = np.sort(rng.uniform(0, 3, 300))
    p = 0.2 + np.cumsum(rng.random(300)) * 1e-4
    F = 5.0 + rng.normal(size=300)
    traj = preprocess_trajectory(t, p, F, T=100)
    k = tail_length(100)
    assert traj.u[0] == 0.0 and traj.F_meas[0] == 0.0
    assert np.all(traj.u[-(k + 1):] == traj.u[-1]) and np.all(traj.F_meas[-(k + 1):] == traj.F_meas[-1])
    assert traj.u[-1] == p[-1] - p[0] and traj.F_meas[-1] == F[-1] - F[0]


def test_preprocess_errors():
    with pytest.raises(DataError):
        preprocess_trajectory([0.0], [0.0], [0.0])
    with pytest.raises(DataError):
        preprocess_trajectory([0.0, 2.0, 1.0], [0.0, 1.0, 2.0], [0.0, 1.0, 2.0])


def test_trajectory_csv_round_trip(tmp_path):
    traj = preprocess_trajectory(np.linspace(0, 1, 20), np.linspace(0, 0.01, 20), np.arange(20.0), T=16)
    write_trajectory_csv(tmp_path / "t.csv", traj)
    assert (tmp_path / "t.csv").read_text().splitlines()[0] == "t,p_z,F_z"
    t, p, f = read_trajectory_csv(tmp_path / "t.csv")
    assert np.array_equal(p, traj.u) and np.array_equal(f, traj.F_meas)


def test_trajectory_csv_needs_header(tmp_path):
    (tmp_path / "bad.csv").write_text("0,0,0\n1,1,1\n")
    with pytest.raises(DataError):
        read_trajectory_csv(tmp_path / "bad.csv")


def test_pin_geometry():
    mesh = generate_pin(8.0, 30.0)
    lo, hi = mesh.bounds()
    assert np.allclose(hi - lo, [0.008, 0.008, 0.030], rtol=1e-12)
    r, L = 0.004, 0.030
    assert abs(mesh.area - (2 * np.pi * r * L + 2 * np.pi * r * r)) / mesh.area < 0.01
    assert np.all(edge_use_counts(mesh) == 2)


def test_connector_geometry():
    small, large = generate_connector(9), generate_connector(25)
    width = lambda m: np.ptp(m.vertices[:, 0])
    assert width(large) > width(small)
    # one shell plus one component per contact
    assert mesh_components(small) == 10 and mesh_components(generate_connector(37)) == 38
    a = preprocess_mesh(small, 256, seed=0)
    b = preprocess_mesh(large, 256, seed=0)
    assert chamfer(a, b).item() > 0


def test_zero_noise_repeats_are_identical():
    task = synthesize_task(SyntheticFamily(noise_fraction=0.0), 8.0, **FAST)
    assert len(task.repeats) == 10
    assert all(np.array_equal(r.F_meas, task.repeats[0].F_meas) for r in task.repeats)


def test_truth_reproduces_reference():
    task = synthesize_task(SyntheticFamily(), 6.0, **FAST)
    F = simulate(LpvSecondOrder(task.truth), task.repeats[0]).F_hat
    assert fit_ratio(task.reference, F) == 100.0


def test_synthesis_is_reproducible():
    a = synthesize_task(SyntheticFamily(), 5.0, seed=3, **FAST)
    b = synthesize_task(SyntheticFamily(), 5.0, seed=3, **FAST)
    assert np.array_equal(a.cloud.points, b.cloud.points)
    assert all(np.array_equal(x.F_meas, y.F_meas) for x, y in zip(a.repeats, b.repeats))


def test_noise_level():
    task = synthesize_task(SyntheticFamily(), 10.0, T=512, n_points=64)
    resid = np.concatenate([r.F_meas - task.reference for r in task.repeats])
    assert np.std(resid) == pytest.approx(0.01 * np.max(np.abs(task.reference)), rel=0.05)


def test_larger_pins_push_harder():
    fam = SyntheticFamily()
    finals = [synthesize_task(fam, g, **FAST).reference[-1] for g in (4.0, 8.0, 14.0)]
    assert finals[0] < finals[1] < finals[2]
    lo = fam.truth(8.0)
    assert np.all(lo.a.data > 0)


def test_task_requires_consistent_repeats():
    cloud = synthesize_task(SyntheticFamily(), 8.0, **FAST).cloud
    with pytest.raises(DataError):
        AssemblyTask("x", "pins", cloud, [Trajectory(0.1, np.zeros(5)), Trajectory(0.1, np.zeros(6))])
    with pytest.raises(DataError):
        AssemblyTask("x", "pins", cloud, [])


def test_manifest_validation(tmp_path):
    e = ManifestEntry("a", "pins", "train", mesh="a.obj", trajectories=["a.csv"])
    with pytest.raises(DataError):
        DatasetManifest([e, e])
    with pytest.raises(DataError):
        DatasetManifest([ManifestEntry("b", "pins", "holdout", mesh="b.obj", trajectories=["b.csv"])])
    (tmp_path / "m.yaml").write_text("tasks: [{id: a, domain: pins, split: train, bogus: 1}]\n")
    with pytest.raises(DataError):
        DatasetManifest.load(tmp_path / "m.yaml")


def test_written_dataset_loads_back(tmp_path):
    fam = SyntheticFamily(repeats=2)
    manifest = write_synthetic_dataset(tmp_path, fam, {"train": [4.0, 6.0], "test": [8.0]}, **FAST)
    again = DatasetManifest.load(tmp_path / "manifest.yaml")
    assert [e.id for e in again.entries] == ["pin4", "pin6", "pin8"]
    assert [e.id for e in again.split("test")] == ["pin8"]
    tasks = load_tasks(again, "train", **FAST)
    direct = synthesize_task(fam, 4.0, **FAST)
    assert np.array_equal(tasks[0].repeats[1].F_meas, direct.repeats[1].F_meas)
    assert np.allclose(tasks[0].cloud.points, direct.cloud.points, atol=1e-15)
    assert np.array_equal(tasks[0].reference, direct.reference)
    assert np.array_equal(tasks[0].truth.a.data, direct.truth.a.data)


def test_raw_trajectories_are_preprocessed_on_load(tmp_path):
    from geocontact.geometry import save_mesh
    save_mesh(generate_pin(6.0, 20.0), tmp_path / "p.obj")
    t = np.linspace(0.0, 1.0, 200)
    np.savetxt(tmp_path / "r.csv", np.column_stack([t, 0.1 + 0.01 * t, 2.0 + t]), delimiter=",",
               header="t,p_z,F_z", comments="")
    entry = ManifestEntry("p", "pins", "train", mesh="p.obj", trajectories=["r.csv"])
    task = load_task(entry, tmp_path, n_points=64, T=32)
    assert len(task.repeats[0]) == 32 + tail_length(32) and task.repeats[0].u[0] == 0.0
    assert task.s_max == pytest.approx(0.01)
