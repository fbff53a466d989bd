"""Dataset generation, train/calibration splitting and trajectory files."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import rng as rngmod
from .sim import BatchWorld, Episode, PedestrianParams, WorldConfig, separation, VehicleState, PedestrianState, WorldState

TRAJECTORY_HEADER = ["episode", "step", "veh_par", "veh_speed", "ped_par", "ped_perp", "dvel_par", "dvel_perp"]
FORMAT_VERSION = 1


class TrajectoryFormatError(ValueError):
    pass


def simulate_constant_speed(cfg: WorldConfig, params: PedestrianParams, seed: int, indices) -> list[Episode]:
    """Episodes where the vehicle holds its sampled reference speed throughout."""
    bw = BatchWorld.start(cfg, params, seed, rngmod.DATA, indices)
    T, n = cfg.episode_steps, len(bw)
    rec = np.empty((6, T, n))
    while not bw.done:
        t = bw.step
        rec[0, t], rec[1, t], rec[2, t], rec[3, t] = bw.veh_par, bw.veh_speed, bw.ped_par, bw.ped_perp
        dvel = bw.advance(bw.veh_par + bw.ref_speed * cfg.dt, bw.ref_speed)
        rec[4, t], rec[5, t] = dvel[:, 0], dvel[:, 1]
    return [
        Episode(int(i), *(rec[f, : bw.lengths[k], k].copy() for f in range(6)), collided=bool(bw.collided[k]))
        for k, i in enumerate(bw.indices)
    ]


def generate_dataset(
    n_samples_target: int,
    cfg: WorldConfig,
    params: PedestrianParams,
    seed: int,
    chunk: int = 2048,
) -> list[Episode]:
    """Constant-speed episodes until at least ``n_samples_target`` steps exist."""
    if n_samples_target <= 0:
        raise ValueError("n_samples_target must be positive")
    episodes: list[Episode] = []
    total = 0
    start = 0
    while total < n_samples_target:
        for ep in simulate_constant_speed(cfg, params, seed, range(start, start + chunk)):
            episodes.append(ep)
            total += len(ep)
            if total >= n_samples_target:
                break
        start += chunk
    return episodes


def split(episodes, cal_fraction: float, seed: int):
    """Random episode-level partition into ``(train, cal)``, each in input order."""
    episodes = list(episodes)
    if not 0 < cal_fraction < 1:
        raise ValueError("cal_fraction must lie strictly between 0 and 1")
    if len(episodes) < 2:
        raise ValueError("need at least two episodes to split")
    n_cal = min(max(int(round(cal_fraction * len(episodes))), 1), len(episodes) - 1)
    perm = rngmod.stream(seed, rngmod.SPLIT).permutation(len(episodes))
    is_cal = np.zeros(len(episodes), dtype=bool)
    is_cal[perm[:n_cal]] = True
    train = [ep for ep, c in zip(episodes, is_cal) if not c]
    cal = [ep for ep, c in zip(episodes, is_cal) if c]
    return train, cal


def n_samples(episodes) -> int:
    return sum(len(ep) for ep in episodes)


def write_trajectories(episodes, path) -> None:
    buf = io.StringIO()
    buf.write(",".join(TRAJECTORY_HEADER) + "\n")
    for ep in episodes:
        cols = np.column_stack([getattr(ep, f) for f in Episode.FIELDS])
        for i, row in enumerate(cols):
            buf.write(f"{ep.episode_id},{i}," + ",".join(format(v, ".17g") for v in row) + "\n")
    Path(path).write_text(buf.getvalue())


def _final_collision(ep: Episode, cfg: WorldConfig) -> bool:
    # collision is evaluated after each step: rows 1.. are post-step states of
    # the previous row, and the last post-step state is reconstructed
    seps = np.hypot(ep.veh_par[1:] - ep.ped_par[1:], cfg.vehicle_lane_perp - ep.ped_perp[1:])
    if np.any(seps < cfg.d_safe):
        return True
    last = WorldState(
        VehicleState(ep.veh_par[-1] + ep.veh_speed[-1] * cfg.dt, ep.veh_speed[-1]),
        PedestrianState(ep.ped_par[-1] + ep.dvel_par[-1] * cfg.dt, ep.ped_perp[-1] + ep.dvel_perp[-1] * cfg.dt),
    )
    return separation(last, cfg) < cfg.d_safe


def read_trajectories(path, cfg: WorldConfig | None = None) -> list[Episode]:
    """Parse a trajectory CSV.  The per-episode collision flag is recomputed
    from the stored states."""
    cfg = cfg or WorldConfig()
    text = Path(path).read_text()
    if not text.strip():
        return []
    reader = csv.reader(io.StringIO(text))
    header = next(reader)
    if header != TRAJECTORY_HEADER:
        raise TrajectoryFormatError(f"{path}: line 1: expected header {','.join(TRAJECTORY_HEADER)}")
    groups: dict[int, list] = {}
    order: list[int] = []
    for lineno, row in enumerate(reader, start=2):
        if not row:
            continue
        if len(row) != len(TRAJECTORY_HEADER):
            raise TrajectoryFormatError(f"{path}: line {lineno}: expected {len(TRAJECTORY_HEADER)} fields, got {len(row)}")
        try:
            eid, step = int(row[0]), int(row[1])
            vals = [float(v) for v in row[2:]]
        except ValueError as e:
            raise TrajectoryFormatError(f"{path}: line {lineno}: {e}") from None
        if eid not in groups:
            groups[eid] = []
            order.append(eid)
        if step != len(groups[eid]):
            raise TrajectoryFormatError(f"{path}: line {lineno}: episode {eid} step {step} is not contiguous")
        groups[eid].append(vals)
    episodes = []
    for eid in order:
        cols = np.array(groups[eid]).T
        ep = Episode(eid, *(c.copy() for c in cols))
        ep.collided = _final_collision(ep, cfg)
        episodes.append(ep)
    return episodes


def manifest(train, cal, seed: int, cfg: WorldConfig, params: PedestrianParams) -> dict:
    return {
        "format_version": FORMAT_VERSION,
        "seed": seed,
        "n_train_samples": n_samples(train),
        "n_cal_samples": n_samples(cal),
        "n_train_episodes": len(train),
        "n_cal_episodes": len(cal),
        "world": asdict(cfg),
        "pedestrian": asdict(params),
    }


def write_manifest(doc: dict, path) -> None:
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def read_manifest(path) -> dict:
    return json.loads(Path(path).read_text())
