"""On-disk trajectory format: flat little-endian binary arrays with a JSON
sidecar describing dtype/shape, plus an observer CSV and a run manifest."""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

from .dynamics import OrbitalState, Trajectory
from .lattice import Grid

ARRAY_DTYPE = "<c16"


def _write_array(path: Path, values: np.ndarray) -> dict:
    arr = np.ascontiguousarray(values.astype(np.dtype(ARRAY_DTYPE)))
    path.write_bytes(arr.tobytes())
    return {"file": path.name, "dtype": ARRAY_DTYPE, "shape": list(arr.shape)}


def _read_array(dirpath: Path, entry: dict) -> np.ndarray:
    raw = (dirpath / entry["file"]).read_bytes()
    return np.frombuffer(raw, dtype=np.dtype(entry["dtype"])).reshape(entry["shape"]).copy()


def format_float(x: float) -> str:
    """Shortest decimal that round-trips to the same binary value."""
    return repr(float(x))


def write_observers_csv(path: Path, rows) -> None:
    lines = ["time,observable,value"]
    for t, name, value in rows:
        lines.append(f"{format_float(t)},{name},{format_float(value)}")
    path.write_text("\n".join(lines) + "\n")


def read_observers_csv(path: Path):
    rows = []
    for line in path.read_text().splitlines()[1:]:
        t, name, value = line.split(",")
        rows.append((float(t), name, float(value)))
    return rows


def sha256_text(text: str) -> str:
    return hashlib.sha256(text.encode()).hexdigest()


def sha256_file(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_trajectory(
    dirpath,
    traj: Trajectory,
    config_text: str = "",
    seed: int | None = None,
    vkernels: np.ndarray | None = None,
    separations=None,
    extra_meta: dict | None = None,
) -> Path:
    """Persist checkpoints, observers and the manifest into a directory."""
    from . import __version__

    dirpath = Path(dirpath)
    dirpath.mkdir(parents=True, exist_ok=True)
    grid = traj.grid
    arrays = {}
    for i, state in enumerate(traj.states):
        arrays[f"orbitals_{i:06d}"] = _write_array(
            dirpath / f"orbitals_{i:06d}.bin", state.fields
        )
    if vkernels is not None:
        for i in range(vkernels.shape[0]):
            arrays[f"vkernel_{i:06d}"] = _write_array(
                dirpath / f"vkernel_{i:06d}.bin", vkernels[i]
            )
    first = traj.states[0]
    sidecar = {
        "arrays": arrays,
        "times": [format_float(t) for t in traj.times],
        "occupations": [format_float(v) for v in np.atleast_1d(first.occupations)],
        "eq_modes": [list(m) if m is not None else None for m in getattr(first, "eq_modes", ())],
        "separations": [list(z) for z in separations] if separations else None,
    }
    (dirpath / "arrays.json").write_text(json.dumps(sidecar, indent=1))
    write_observers_csv(dirpath / "observers.csv", traj.observer_rows)
    manifest = {
        "version": __version__,
        "grid": {"d": grid.d, "N": grid.N, "L": grid.L},
        "seed": seed,
        "config_sha256": sha256_text(config_text) if config_text else None,
        "config_text": config_text or None,
        "observers_sha256": sha256_file(dirpath / "observers.csv"),
        "meta": dict(traj.meta),
    }
    if extra_meta:
        manifest.update(extra_meta)
    (dirpath / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return dirpath


def read_trajectory(dirpath):
    """Reload checkpointed states (and V kernels when stored) from a directory."""
    dirpath = Path(dirpath)
    manifest = json.loads((dirpath / "manifest.json").read_text())
    sidecar = json.loads((dirpath / "arrays.json").read_text())
    gmeta = manifest["grid"]
    grid = Grid(int(gmeta["d"]), int(gmeta["N"]), float(gmeta["L"]))
    times = [float(t) for t in sidecar["times"]]
    occupations = np.array([float(v) for v in sidecar["occupations"]])
    eq_modes = tuple(
        tuple(m) if m is not None else None for m in sidecar.get("eq_modes") or ()
    )
    states = []
    for i, t in enumerate(times):
        fields = _read_array(dirpath, sidecar["arrays"][f"orbitals_{i:06d}"])
        states.append(OrbitalState(grid, t, fields, occupations, eq_modes or None))
    vkernels = None
    if f"vkernel_{0:06d}" in sidecar["arrays"]:
        vkernels = np.stack(
            [
                _read_array(dirpath, sidecar["arrays"][f"vkernel_{i:06d}"])
                for i in range(len(times))
            ]
        )
    separations = sidecar.get("separations")
    if separations is not None:
        separations = tuple(tuple(z) for z in separations)
    return states, manifest, vkernels, separations
