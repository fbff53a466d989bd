"""Closed-loop Monte-Carlo evaluation of the safety filter.

Controllers:

* ``sparc``   -- learned prediction, conformal box, CBF filter
* ``vanilla`` -- the same loop with zero-radius boxes
* ``random``  -- the reference speed applied unfiltered

Trial ``i`` of an experiment uses the stream ``(seed, TRIAL, i)`` for every
controller, so all rows of a table share initial conditions and noise.
"""

from __future__ import annotations

import csv
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence, Union

import numpy as np

from . import rng as rngmod
from .conformal import CalibrationProfile, UnboundedRegionError
from .predictor import MlpModel, N_STATE_FEATURES, episode_features, forward
from .safety import FilterParams, HalfspaceConstraint, box_distance, filter_control
from .sim import BatchWorld, PedestrianParams, WorldConfig

CONTROLLERS = ("sparc", "vanilla", "random")
RESULTS_HEADER = ["controller", "alpha", "trials", "collisions_abs", "rate_abs", "rate_rel", "infeasible_steps_total"]
DEFAULT_CHUNK = 2048

Predictor = Union[MlpModel, Callable[[BatchWorld], np.ndarray]]


class ResultsFormatError(ValueError):
    pass


def oracle_predictor(world: BatchWorld) -> np.ndarray:
    """Noise-free mean velocity of the simulator; a reference predictor."""
    mu_par, mu_perp = world.mean_velocity()
    return np.column_stack([mu_par, mu_perp])


@dataclass
class TraceStep:
    step: int
    veh_par: float
    center_par: float
    center_perp: float
    hw_par: float
    hw_perp: float
    ped_par: float
    ped_perp: float

    @property
    def covered(self) -> bool:
        return (
            abs(self.ped_par - self.center_par) <= self.hw_par
            and abs(self.ped_perp - self.center_perp) <= self.hw_perp
        )


@dataclass
class TrialResult:
    controller: str
    alpha: float | None
    collided: bool
    min_separation: float
    infeasible_steps: int
    seed: int
    index: int = 0
    trace: list[TraceStep] | None = None


def _check_ranges(cfg: WorldConfig, fparams: FilterParams):
    if fparams.u_min < cfg.speed_min or fparams.u_max > cfg.speed_max:
        raise ValueError("filter input range must lie inside the world's speed range")


def run_trials(
    kind: str,
    indices: Sequence[int],
    predictor: Predictor | None,
    profile: CalibrationProfile | None,
    cfg: WorldConfig,
    params: PedestrianParams,
    fparams: FilterParams,
    seed: int,
    trace: bool = False,
) -> list[TrialResult]:
    """Run a batch of trials of one controller in lock-step."""
    if kind not in CONTROLLERS:
        raise ValueError(f"controller must be one of {CONTROLLERS}")
    _check_ranges(cfg, fparams)
    bw = BatchWorld.start(cfg, params, seed, rngmod.TRIAL, indices)
    n = len(bw)
    infeasible = np.zeros(n, dtype=np.int64)
    alpha = None
    radii = np.zeros(2)
    if kind == "sparc":
        if profile is None:
            raise ValueError("sparc needs a calibration profile")
        if not profile.finite:
            raise UnboundedRegionError(f"infinite radius at alpha={profile.alpha}")
        radii, alpha = profile.radii, profile.alpha
    elif kind == "vanilla":
        alpha = 1.0
    if kind != "random" and predictor is None:
        raise ValueError(f"{kind} needs a predictor")

    history = None
    if isinstance(predictor, MlpModel) and kind != "random":
        history = np.zeros((n, predictor.feature_window, N_STATE_FEATURES))
    n_sub = max(1, int(round(cfg.dt / fparams.dt_ctrl)))
    h_sub = cfg.dt / n_sub
    lane = np.full(n, cfg.vehicle_lane_perp)
    rec = [] if trace else None

    while not bw.done:
        t = bw.step
        if kind == "random":
            bw.advance(bw.veh_par + bw.ref_speed * cfg.dt, bw.ref_speed)
            continue
        if history is not None:
            state = np.column_stack([bw.veh_par, bw.veh_speed, bw.ped_par, bw.ped_perp])
            history[:, :-1] = history[:, 1:]
            history[:, -1] = predictor.feature_norm.apply(state)
            dy = forward(predictor, history.reshape(n, -1))
        else:
            dy = np.asarray(predictor(bw), dtype=float).reshape(n, 2)
        y_t = np.column_stack([bw.ped_par, bw.ped_perp])
        center = y_t + dy * cfg.dt
        hw = np.broadcast_to(radii * cfg.dt, (n, 2))
        if fparams.region_mode == "hull":
            lo = np.minimum(center - hw, y_t)
            hi = np.maximum(center + hw, y_t)
            center, hw = (lo + hi) / 2, (hi - lo) / 2

        vp = bw.veh_par.copy()
        hit = np.zeros(n, dtype=bool)
        u = bw.ref_speed
        for _ in range(n_sub):
            d, grad = box_distance(np.column_stack([vp, lane]), center, hw)
            b = np.where(bw.active, -fparams.gamma * (d - fparams.d_safe), -np.inf)
            res = filter_control(bw.ref_speed, HalfspaceConstraint(grad[:, 0], b), fparams)
            u = res.u
            hit |= res.infeasible
            vp = vp + u * h_sub
        infeasible += hit & bw.active
        was_active = bw.active.copy()
        bw.advance(vp, u)
        if trace:
            rec.append((t, was_active, bw.veh_par.copy(), center.copy(), np.array(hw), bw.ped_par.copy(), bw.ped_perp.copy()))

    out = []
    for k, i in enumerate(bw.indices):
        tr = None
        if trace:
            tr = [
                TraceStep(t, vpar[k], c[k, 0], c[k, 1], w[k, 0], w[k, 1], pp[k], pq[k])
                for t, act, vpar, c, w, pp, pq in rec
                if act[k]
            ]
        out.append(
            TrialResult(
                controller=kind,
                alpha=alpha,
                collided=bool(bw.collided[k]),
                min_separation=float(bw.min_sep[k]),
                infeasible_steps=int(infeasible[k]),
                seed=seed,
                index=int(i),
                trace=tr,
            )
        )
    return out


def run_trial(kind, alpha, model, profile, cfg, params, fparams, seed, index: int = 0, trace: bool = False) -> TrialResult:
    """Single trial; ``alpha`` is informational, the radii come from ``profile``."""
    if kind == "sparc" and profile is not None and alpha is not None and not math.isclose(alpha, profile.alpha):
        raise ValueError(f"alpha {alpha} does not match the profile's {profile.alpha}")
    return run_trials(kind, [index], model, profile, cfg, params, fparams, seed, trace)[0]


def region_trace(trial: TrialResult) -> list[TraceStep]:
    if trial.trace is None:
        raise ValueError("trial was run without tracing")
    return trial.trace


@dataclass
class ControllerRow:
    controller: str
    alpha: float | None
    trials: int
    collisions_abs: int
    infeasible_steps_total: int
    rate_rel: float | None = None

    @property
    def rate_abs(self) -> float | None:
        return self.collisions_abs / self.trials if self.trials else None

    @property
    def label(self) -> str:
        if self.controller == "sparc":
            return f"SPARC (alpha={self.alpha:.2f})"
        return {"vanilla": "Vanilla CBF", "random": "Random"}[self.controller]


@dataclass
class ExperimentTable:
    rows: list[ControllerRow]
    collided: dict[str, np.ndarray] = field(default_factory=dict)

    def row(self, controller: str, alpha: float | None = None) -> ControllerRow:
        for r in self.rows:
            if r.controller == controller and (alpha is None or (r.alpha is not None and math.isclose(r.alpha, alpha))):
                return r
        raise KeyError((controller, alpha))

    @property
    def baseline_collisions(self) -> int | None:
        try:
            return self.row("random").collisions_abs
        except KeyError:
            return None


def _thread_count(threads: int | None) -> int:
    if threads is None:
        threads = int(os.environ.get("SPARC_THREADS", "1") or 1)
    return max(1, threads)


def _run_chunked(kind, n_trials, predictor, profile, cfg, params, fparams, seed, threads, chunk):
    # chunk boundaries depend only on n_trials, so results do not depend on the thread count
    spans = [range(s, min(s + chunk, n_trials)) for s in range(0, n_trials, chunk)]

    def job(span):
        return run_trials(kind, span, predictor, profile, cfg, params, fparams, seed)

    if threads > 1 and len(spans) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(job, spans))
    else:
        parts = [job(s) for s in spans]
    return [r for part in parts for r in part]


def run_experiment(
    n_trials: int,
    profiles: Sequence[CalibrationProfile],
    model: Predictor | None,
    cfg: WorldConfig,
    params: PedestrianParams,
    fparams: FilterParams,
    seed: int,
    controllers: Sequence[str] = CONTROLLERS,
    threads: int | None = None,
    chunk: int = DEFAULT_CHUNK,
) -> ExperimentTable:
    """Paired trials of every requested controller; one row per SPARC profile."""
    threads = _thread_count(threads)
    plan: list[tuple[str, CalibrationProfile | None]] = []
    if "sparc" in controllers:
        plan += [("sparc", p) for p in sorted(profiles, key=lambda p: p.alpha)]
    if "vanilla" in controllers:
        plan.append(("vanilla", None))
    if "random" in controllers:
        plan.append(("random", None))
    rows, collided = [], {}
    for kind, prof in plan:
        results = _run_chunked(kind, n_trials, model, prof, cfg, params, fparams, seed, threads, chunk)
        flags = np.array([r.collided for r in results], dtype=bool)
        alpha = prof.alpha if prof is not None else (1.0 if kind == "vanilla" else None)
        row = ControllerRow(kind, alpha, n_trials, int(flags.sum()), int(sum(r.infeasible_steps for r in results)))
        rows.append(row)
        collided[kind if prof is None else f"sparc@{prof.alpha:g}"] = flags
    table = ExperimentTable(rows, collided)
    base = table.baseline_collisions
    if base:
        for r in rows:
            r.rate_rel = r.collisions_abs / base
    return table


def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, float):
        return repr(x)  # shortest string that round-trips
    return str(x)


def write_results(table: ExperimentTable, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(RESULTS_HEADER)
        for r in table.rows:
            w.writerow(
                [r.controller, _fmt(r.alpha), r.trials, r.collisions_abs, _fmt(r.rate_abs), _fmt(r.rate_rel), r.infeasible_steps_total]
            )


def read_results(path) -> ExperimentTable:
    text = Path(path).read_text()
    if not text.strip():
        return ExperimentTable([])
    reader = csv.reader(text.splitlines())
    if next(reader) != RESULTS_HEADER:
        raise ResultsFormatError(f"{path}: line 1: expected header {','.join(RESULTS_HEADER)}")
    rows = []
    for lineno, rec in enumerate(reader, start=2):
        if not rec:
            continue
        if len(rec) != len(RESULTS_HEADER):
            raise ResultsFormatError(f"{path}: line {lineno}: expected {len(RESULTS_HEADER)} fields, got {len(rec)}")
        try:
            ctrl = rec[0]
            if ctrl not in CONTROLLERS:
                raise ValueError(f"unknown controller {ctrl!r}")
            row = ControllerRow(
                controller=ctrl,
                alpha=float(rec[1]) if rec[1] else None,
                trials=int(rec[2]),
                collisions_abs=int(rec[3]),
                infeasible_steps_total=int(rec[6]),
                rate_rel=float(rec[5]) if rec[5] else None,
            )
        except ValueError as e:
            raise ResultsFormatError(f"{path}: line {lineno}: {e}") from None
        rows.append(row)
    return ExperimentTable(rows)


def _pct(x) -> str:
    return "n/a" if x is None else f"{100 * x:.2f}%"


def render_markdown(table: ExperimentTable) -> str:
    lines = [
        "| Controller | Trials | Collision (absolute) | Collision (relative) |",
        "|---|---|---|---|",
    ]
    for r in table.rows:
        rel = _pct(r.rate_rel)
        if r.controller == "sparc" and r.rate_rel is not None:
            rel += " < " if r.rate_rel < r.alpha else " >= "
            rel += f"{100 * r.alpha:.0f}%"
        lines.append(f"| {r.label} | {r.trials} | {_pct(r.rate_abs)} | {rel} |")
    return "\n".join(lines) + "\n"


@dataclass
class CoverageReport:
    par: float
    perp: float
    joint: float
    n: int


def coverage_audit(model: MlpModel, profile: CalibrationProfile, test_set, dt: float = 0.1) -> CoverageReport:
    """Fraction of held-out steps whose realised next position lies in the
    predicted region, per axis and jointly."""
    if not profile.finite:
        raise UnboundedRegionError(f"infinite radius at alpha={profile.alpha}")
    episodes = list(test_set)
    if not episodes:
        raise ValueError("test set is empty")
    inside = []
    for ep in episodes:
        pred = forward(model, episode_features(ep, model.feature_window, model.feature_norm))
        y_t = np.column_stack([ep.ped_par, ep.ped_perp])
        center = y_t + pred * dt
        y_next = y_t + ep.dvel() * dt
        inside.append(np.abs(y_next - center) <= profile.radii * dt)
    inside = np.concatenate(inside)
    return CoverageReport(
        par=float(inside[:, 0].mean()),
        perp=float(inside[:, 1].mean()),
        joint=float(inside.all(axis=1).mean()),
        n=len(inside),
    )


@dataclass
class Histogram:
    edges: np.ndarray
    counts: np.ndarray
    markers: dict[str, float]


def score_histogram(scores, n_bins: int, markers: dict[str, float] | None = None) -> Histogram:
    s = np.asarray(scores, dtype=float)
    if n_bins < 1:
        raise ValueError("n_bins must be at least 1")
    if s.size == 0:
        raise ValueError("no scores to bin")
    top = float(s.max()) if s.max() > 0 else 1.0
    counts, edges = np.histogram(s, bins=n_bins, range=(0.0, top))
    return Histogram(edges, counts, dict(markers or {}))


def write_histogram_csv(h: Histogram, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["bin_lo", "bin_hi", "count"])
        for lo, hi, c in zip(h.edges[:-1], h.edges[1:], h.counts):
            w.writerow([_fmt(float(lo)), _fmt(float(hi)), int(c)])


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plt.rcParams["svg.hashsalt"] = "sparc"
    return plt


def _save_svg(fig, path):
    fig.savefig(path, format="svg", metadata={"Date": None})


def plot_histogram_svg(h: Histogram, path, title: str = "") -> None:
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.stairs(h.counts, h.edges, fill=True, alpha=0.6)
    finite = {k: x for k, x in h.markers.items() if math.isfinite(x)}
    for name, x in finite.items():
        ax.axvline(x, color="red", linestyle="--", label=f"{name} = {x:.3f}")
    if finite:
        ax.legend()
    ax.set_xlabel("absolute velocity error [m/s]")
    ax.set_ylabel("count")
    ax.set_title(title)
    fig.tight_layout()
    _save_svg(fig, path)
    plt.close(fig)


def write_trace_csv(trace: Sequence[TraceStep], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "veh_par", "center_par", "center_perp", "hw_par", "hw_perp", "ped_par", "ped_perp", "covered"])
        for s in trace:
            w.writerow(
                [s.step]
                + [_fmt(float(v)) for v in (s.veh_par, s.center_par, s.center_perp, s.hw_par, s.hw_perp, s.ped_par, s.ped_perp)]
                + [int(s.covered)]
            )


def plot_trace_svg(trace: Sequence[TraceStep], path, cfg: WorldConfig | None = None) -> None:
    from matplotlib.patches import Rectangle

    cfg = cfg or WorldConfig()
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(7, 3.5))
    for s in trace:
        ax.add_patch(
            Rectangle(
                (s.center_par - s.hw_par, s.center_perp - s.hw_perp),
                2 * s.hw_par,
                2 * s.hw_perp,
                fill=False,
                edgecolor="tab:orange",
                linewidth=0.6,
            )
        )
    ax.plot([s.center_par for s in trace], [s.center_perp for s in trace], ".", ms=2, color="tab:orange", label="predicted")
    ax.plot([s.ped_par for s in trace], [s.ped_perp for s in trace], "-", color="tab:blue", label="pedestrian")
    ax.plot([s.veh_par for s in trace], [cfg.vehicle_lane_perp] * len(trace), "-", color="black", label="vehicle")
    ax.set_xlim(0, cfg.road_length)
    ax.set_ylim(0, cfg.road_width)
    ax.set_aspect("equal")
    ax.set_xlabel("along road [m]")
    ax.set_ylabel("across road [m]")
    ax.legend(loc="upper left", fontsize=7)
    fig.tight_layout()
    _save_svg(fig, path)
    plt.close(fig)


def plot_rates_svg(table: ExperimentTable, path) -> None:
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(6, 3.5))
    labels = [r.label for r in table.rows]
    rel = [100 * (r.rate_rel or 0.0) for r in table.rows]
    ax.bar(range(len(rel)), rel, color="tab:blue")
    for i, r in enumerate(table.rows):
        if r.controller == "sparc":
            ax.plot([i - 0.4, i + 0.4], [100 * r.alpha] * 2, color="red", linestyle="--")
    ax.set_xticks(range(len(rel)))
    ax.set_xticklabels(labels, rotation=20, ha="right", fontsize=7)
    ax.set_ylabel("relative collision rate [%]")
    fig.tight_layout()
    _save_svg(fig, path)
    plt.close(fig)
