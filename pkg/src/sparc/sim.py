"""Vehicle kinematics, the coupled pedestrian model and the episode simulator.

The vehicle drives along the road axis (``par``) at a fixed lateral offset;
the pedestrian moves in the plane with a velocity drawn from a Gaussian whose
mean depends on both agents.  Two implementations share the same arithmetic:
the scalar :func:`step_world` / :func:`run_episode` pair and the vectorised
:class:`BatchWorld` used for bulk data generation and closed-loop trials.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from . import rng as rngmod


class InputRejected(ValueError):
    """Control input outside the admissible speed range."""


@dataclass(frozen=True)
class WorldConfig:
    road_length: float = 84.0
    road_width: float = 25.0
    crosswalk_center_par: float = 42.0
    crosswalk_half_width: float = 2.0
    dt: float = 0.1
    episode_steps: int = 100
    speed_min: float = 0.0
    speed_max: float = 15.0
    d_safe: float = 1.0
    vehicle_lane_perp: float = 12.5

    def __post_init__(self):
        if not self.road_length > 0:
            raise ValueError("road_length must be positive")
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if self.episode_steps < 1:
            raise ValueError("episode_steps must be at least 1")
        if self.speed_min > self.speed_max:
            raise ValueError("speed_min must not exceed speed_max")
        lo = self.crosswalk_center_par - self.crosswalk_half_width
        hi = self.crosswalk_center_par + self.crosswalk_half_width
        if self.crosswalk_half_width <= 0 or lo < 0 or hi > self.road_length:
            raise ValueError("crosswalk must lie inside the road")
        if not 0 <= self.vehicle_lane_perp <= self.road_width:
            raise ValueError("vehicle_lane_perp must lie inside the road")
        if self.d_safe < 0:
            raise ValueError("d_safe must be non-negative")


@dataclass(frozen=True)
class PedestrianParams:
    """Parameters of the pedestrian's mean velocity and noise.

    ``evade_base`` blends the along-road evasion between a purely
    speed-driven response (0.0) and a purely proximity-driven one (1.0).
    """

    walk_speed: float = 1.4
    caution_gain: float = 1.0
    evade_gain: float = 3.0
    evade_base: float = 1.0
    center_gain: float = 0.3
    proximity_scale: float = 10.0
    sigma_par: float = 0.5
    sigma_perp: float = 2.0

    def __post_init__(self):
        for name in ("walk_speed", "caution_gain", "evade_gain", "center_gain"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if not 0.0 <= self.evade_base <= 1.0:
            raise ValueError("evade_base must lie in [0, 1]")
        if not self.proximity_scale > 0:
            raise ValueError("proximity_scale must be positive")
        # zero noise is allowed for deterministic test worlds
        if self.sigma_par < 0 or self.sigma_perp < 0:
            raise ValueError("noise scales must be non-negative")


@dataclass(frozen=True)
class VehicleState:
    par: float = 0.0
    speed: float = 0.0


@dataclass(frozen=True)
class PedestrianState:
    par: float
    perp: float
    cross_dir: int = 1  # +1 when crossing away from perp=0, -1 otherwise


@dataclass(frozen=True)
class WorldState:
    vehicle: VehicleState
    pedestrian: PedestrianState
    step: int = 0
    terminal: bool = False


@dataclass(eq=False)
class Episode:
    """Recorded steps ``(X_i, Y_i, dY_i)`` of one simulated episode.

    ``dvel`` holds the realised pedestrian velocity ``(Y_{i+1} - Y_i) / dt``.
    """

    episode_id: int
    veh_par: np.ndarray
    veh_speed: np.ndarray
    ped_par: np.ndarray
    ped_perp: np.ndarray
    dvel_par: np.ndarray
    dvel_perp: np.ndarray
    collided: bool = False

    FIELDS = ("veh_par", "veh_speed", "ped_par", "ped_perp", "dvel_par", "dvel_perp")

    def __len__(self):
        return len(self.veh_par)

    def states(self) -> np.ndarray:
        """Raw per-step features ``(veh_par, veh_speed, ped_par, ped_perp)``."""
        return np.column_stack([self.veh_par, self.veh_speed, self.ped_par, self.ped_perp])

    def dvel(self) -> np.ndarray:
        return np.column_stack([self.dvel_par, self.dvel_perp])

    def same_as(self, other: "Episode") -> bool:
        return (
            self.episode_id == other.episode_id
            and self.collided == other.collided
            and all(np.array_equal(getattr(self, f), getattr(other, f)) for f in self.FIELDS)
        )


def past_end_line(v: VehicleState, cfg: WorldConfig) -> bool:
    return v.par > cfg.road_length


def step_vehicle(v: VehicleState, u: float, cfg: WorldConfig, dt: float | None = None) -> VehicleState:
    if not cfg.speed_min <= u <= cfg.speed_max:
        raise InputRejected(f"speed {u!r} outside [{cfg.speed_min}, {cfg.speed_max}]")
    h = cfg.dt if dt is None else dt
    return VehicleState(par=v.par + u * h, speed=float(u))


def phi(veh_par, veh_speed, ped_par, ped_perp, cross_dir, params: PedestrianParams, cfg: WorldConfig):
    """Mean pedestrian velocity; broadcasts over array arguments."""
    d = np.hypot(ped_par - veh_par, ped_perp - cfg.vehicle_lane_perp)
    w = np.exp(-d / params.proximity_scale)
    s = veh_speed / cfg.speed_max
    mu_perp = params.walk_speed * cross_dir * np.maximum(0.0, 1.0 - params.caution_gain * s * w)
    evade = params.evade_gain * (params.evade_base + (1.0 - params.evade_base) * s) * w
    center = np.clip((cfg.crosswalk_center_par - ped_par) / cfg.crosswalk_half_width, -1.0, 1.0)
    mu_par = evade * np.sign(ped_par - veh_par) + params.center_gain * center
    return mu_par, mu_perp


def pedestrian_mean_velocity(
    v: VehicleState, p: PedestrianState, params: PedestrianParams, cfg: WorldConfig
) -> np.ndarray:
    mu_par, mu_perp = phi(v.par, v.speed, p.par, p.perp, p.cross_dir, params, cfg)
    return np.array([mu_par, mu_perp], dtype=float)


def sample_pedestrian_velocity(mean, params: PedestrianParams, rng: np.random.Generator) -> np.ndarray:
    eps = rng.standard_normal(2)
    return np.asarray(mean, dtype=float) + np.array([params.sigma_par, params.sigma_perp]) * eps


def _clamp_pedestrian(par, perp, cfg: WorldConfig):
    return np.clip(par, 0.0, cfg.road_length), np.clip(perp, 0.0, cfg.road_width)


def step_world(
    w: WorldState, u: float, params: PedestrianParams, cfg: WorldConfig, rng: np.random.Generator
) -> WorldState:
    if w.terminal:
        raise ValueError("cannot step a terminal world state")
    mean = pedestrian_mean_velocity(w.vehicle, w.pedestrian, params, cfg)
    vehicle = step_vehicle(w.vehicle, u, cfg)
    vel = sample_pedestrian_velocity(mean, params, rng)
    p = w.pedestrian
    par, perp = _clamp_pedestrian(p.par + vel[0] * cfg.dt, p.perp + vel[1] * cfg.dt, cfg)
    step = w.step + 1
    terminal = step >= cfg.episode_steps or past_end_line(vehicle, cfg)
    return WorldState(vehicle, replace(p, par=float(par), perp=float(perp)), step, terminal)


def separation(w: WorldState, cfg: WorldConfig) -> float:
    return float(np.hypot(w.vehicle.par - w.pedestrian.par, cfg.vehicle_lane_perp - w.pedestrian.perp))


def check_collision(w: WorldState, cfg: WorldConfig) -> bool:
    return separation(w, cfg) < cfg.d_safe


def initial_state(cfg: WorldConfig, rng: np.random.Generator, initial_speed: float = 0.0) -> WorldState:
    """Vehicle on the starting line; pedestrian on a random side of the crosswalk."""
    side = int(rng.integers(2))
    par = float(
        rng.uniform(
            cfg.crosswalk_center_par - cfg.crosswalk_half_width,
            cfg.crosswalk_center_par + cfg.crosswalk_half_width,
        )
    )
    perp = 0.0 if side == 0 else cfg.road_width
    ped = PedestrianState(par=par, perp=perp, cross_dir=1 if side == 0 else -1)
    return WorldState(VehicleState(0.0, float(initial_speed)), ped)


Policy = Callable[[WorldState], float]


def run_episode(
    cfg: WorldConfig,
    params: PedestrianParams,
    policy: Policy,
    rng: np.random.Generator,
    initial_speed: float = 0.0,
    episode_id: int = 0,
) -> Episode:
    w = initial_state(cfg, rng, initial_speed)
    rows = []
    collided = False
    while not w.terminal:
        u = policy(w)
        nxt = step_world(w, u, params, cfg, rng)
        p, q = w.pedestrian, nxt.pedestrian
        rows.append(
            (
                w.vehicle.par,
                w.vehicle.speed,
                p.par,
                p.perp,
                (q.par - p.par) / cfg.dt,
                (q.perp - p.perp) / cfg.dt,
            )
        )
        collided = collided or check_collision(nxt, cfg)
        w = nxt
    cols = np.array(rows, dtype=float).reshape(-1, 6).T
    return Episode(episode_id, *cols, collided=collided)


def constant_speed_episode(cfg: WorldConfig, params: PedestrianParams, seed: int, index: int) -> Episode:
    """Scalar replay of episode ``index`` of a constant-speed dataset."""
    g = rngmod.stream(seed, rngmod.DATA, index)
    u = float(g.uniform(cfg.speed_min, cfg.speed_max))
    return run_episode(cfg, params, lambda _w: u, g, initial_speed=u, episode_id=index)


@dataclass
class BatchWorld:
    """Many independent episodes advanced in lock-step.

    Each episode ``k`` owns the stream ``stream(seed, purpose, indices[k])``
    and draws from it in the same order as the scalar path: reference speed,
    start side, start position, then one standard-normal pair per step.
    Finished episodes stay frozen while the others continue.
    """

    cfg: WorldConfig
    params: PedestrianParams
    indices: np.ndarray
    ref_speed: np.ndarray
    cross_dir: np.ndarray
    noise: np.ndarray  # (episode_steps, n, 2)
    veh_par: np.ndarray
    veh_speed: np.ndarray
    ped_par: np.ndarray
    ped_perp: np.ndarray
    step: int = 0
    active: np.ndarray = field(default=None)
    collided: np.ndarray = field(default=None)
    min_sep: np.ndarray = field(default=None)
    lengths: np.ndarray = field(default=None)

    @classmethod
    def start(cls, cfg: WorldConfig, params: PedestrianParams, seed: int, purpose: int, indices: Sequence[int]):
        idx = np.asarray(indices, dtype=np.int64)
        n = len(idx)
        ref = np.empty(n)
        side = np.empty(n, dtype=np.int64)
        par = np.empty(n)
        noise = np.empty((cfg.episode_steps, n, 2))
        lo = cfg.crosswalk_center_par - cfg.crosswalk_half_width
        hi = cfg.crosswalk_center_par + cfg.crosswalk_half_width
        for k, i in enumerate(idx):
            g = rngmod.stream(seed, purpose, int(i))
            ref[k] = g.uniform(cfg.speed_min, cfg.speed_max)
            side[k] = g.integers(2)
            par[k] = g.uniform(lo, hi)
            noise[:, k, :] = g.standard_normal((cfg.episode_steps, 2))
        return cls(
            cfg=cfg,
            params=params,
            indices=idx,
            ref_speed=ref,
            cross_dir=np.where(side == 0, 1.0, -1.0),
            noise=noise,
            veh_par=np.zeros(n),
            veh_speed=ref.copy(),
            ped_par=par,
            ped_perp=np.where(side == 0, 0.0, cfg.road_width),
            active=np.ones(n, dtype=bool),
            collided=np.zeros(n, dtype=bool),
            min_sep=np.full(n, np.inf),
            lengths=np.zeros(n, dtype=np.int64),
        )

    def __len__(self):
        return len(self.indices)

    @property
    def done(self) -> bool:
        return not self.active.any()

    def mean_velocity(self):
        return phi(self.veh_par, self.veh_speed, self.ped_par, self.ped_perp, self.cross_dir, self.params, self.cfg)

    def advance(self, veh_par_next: np.ndarray, speed_applied: np.ndarray) -> np.ndarray:
        """Apply one control period; returns the realised pedestrian velocity."""
        cfg, prm = self.cfg, self.params
        if self.done:
            raise ValueError("cannot step a finished batch")
        mu_par, mu_perp = self.mean_velocity()
        eps = self.noise[self.step]
        v_par = mu_par + prm.sigma_par * eps[:, 0]
        v_perp = mu_perp + prm.sigma_perp * eps[:, 1]
        par, perp = _clamp_pedestrian(self.ped_par + v_par * cfg.dt, self.ped_perp + v_perp * cfg.dt, cfg)
        act = self.active
        dvel = np.column_stack([(par - self.ped_par) / cfg.dt, (perp - self.ped_perp) / cfg.dt])
        self.ped_par = np.where(act, par, self.ped_par)
        self.ped_perp = np.where(act, perp, self.ped_perp)
        self.veh_par = np.where(act, veh_par_next, self.veh_par)
        self.veh_speed = np.where(act, speed_applied, self.veh_speed)
        sep = np.hypot(self.veh_par - self.ped_par, cfg.vehicle_lane_perp - self.ped_perp)
        self.min_sep = np.where(act, np.minimum(self.min_sep, sep), self.min_sep)
        self.collided |= act & (sep < cfg.d_safe)
        self.lengths += act
        self.step += 1
        self.active = act & (self.step < cfg.episode_steps) & ~(self.veh_par > cfg.road_length)
        return dvel
