"""Trajectory files: compressed .npz columns plus a JSON sidecar."""
import json
import logging
from pathlib import Path
from typing import Union

import numpy as np
import pandas as pd

from emus.sampling.chains import Trajectory

logger = logging.getLogger(__name__)


def save_trajectory(traj: Trajectory, directory: Union[str, Path], name: str = None) -> Path:
    """Write ``<name>.npz`` and ``<name>.json``; returns the .npz path"""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    if name is None:
        name = f"stratum_{traj.stratum:05d}" if traj.stratum is not None else "direct"
    path = directory / f"{name}.npz"
    np.savez_compressed(path, states=traj.states)
    with open(directory / f"{name}.json", "w") as f:
        json.dump(traj.metadata(), f, indent=2, default=str)
    logger.info(f"Saved trajectory {name} ({len(traj)} states) to {directory}")
    return path


def load_trajectory(path: Union[str, Path]) -> Trajectory:
    path = Path(path)
    sidecar = path.with_suffix(".json")
    try:
        with open(sidecar, "r") as f:
            meta = json.load(f)
    except json.JSONDecodeError as e:
        raise ValueError(f"Invalid JSON in {sidecar}: {e}")
    with np.load(path) as data:
        states = data["states"]
    return Trajectory(
        states=states,
        stratum=meta.get("stratum"),
        sampler=meta.get("sampler", "unknown"),
        seed=meta.get("seed"),
        acceptance_rate=meta.get("acceptance_rate", 1.0),
        burn_in=meta.get("burn_in", 0),
        thin=meta.get("thin", 1),
        n_walkers=meta.get("n_walkers", 1),
        params=meta.get("params", {}),
    )


def export_csv(traj: Trajectory, path: Union[str, Path]) -> Path:
    """Debug export: one row per state, columns x0..x{d-1}"""
    path = Path(path)
    frame = pd.DataFrame(traj.states, columns=[f"x{a}" for a in range(traj.dim)])
    if traj.n_walkers > 1:
        frame.insert(0, "walker", np.tile(np.arange(traj.n_walkers), traj.n_sweeps))
        frame.insert(0, "sweep", np.repeat(np.arange(traj.n_sweeps), traj.n_walkers))
    frame.to_csv(path, index=False)
    return path
