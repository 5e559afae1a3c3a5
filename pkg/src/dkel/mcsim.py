"""Monte Carlo geometric model of online distillation dynamics.

Distributions are 2-D points, a loss is the pull of a point toward its target,
and an ensemble is a centroid.  Each trial draws a true distribution ``P*``,
a ground truth ``GT`` and ``m`` student points; teachers are either drawn at
random or built by the decoupled initialisation (copy the student, take one
step toward GT).  Every epoch the student peers take one vector-summed step
from a snapshot of the world, then each teacher peer moves by EMA toward its
updated student peer.  The reported curve is the mean teacher-to-P* distance.

All point functions accept arrays with arbitrary leading (trial) axes, so a
block of trials is advanced with the same arithmetic as a single trial.
"""
from __future__ import annotations

import csv
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Dict, Optional, Tuple

import numpy as np

from .errors import ConfigurationError, ParameterError
from .losses import DistillSchedule, decay_weight

SIM_METHODS = ("pcl", "dk", "dkel")
INIT_SCHEMES = ("random", "decoupled")
GAP_COLUMNS = ("epoch", "method", "mean_gap", "stderr")


@dataclass(frozen=True)
class SimConfig:
    trials: int = 10_000
    epochs: int = 90
    lr: float = 0.1
    eta: float = 0.5
    gamma: float = 0.5
    decay_family: str = "exponential"
    methods: Tuple[str, ...] = SIM_METHODS
    pcl_init: str = "random"
    num_peers: int = 3
    report: str = "peer0"
    gt_noise: Optional[float] = None
    seed: int = 0
    block: int = 1000

    def __post_init__(self):
        if self.num_peers != 3:
            raise ConfigurationError("the simulation is defined for three peers")
        if self.trials < 1 or self.epochs < 1:
            raise ConfigurationError("trials and epochs must be positive")
        if not 0 < self.eta < 1:
            raise ConfigurationError(f"eta must lie in (0, 1), got {self.eta}")
        if self.lr < 0:
            raise ConfigurationError(f"lr must be non-negative, got {self.lr}")
        unknown = set(self.methods) - set(SIM_METHODS)
        if unknown:
            raise ConfigurationError(f"unknown simulation methods {sorted(unknown)}")
        if self.pcl_init not in INIT_SCHEMES:
            raise ConfigurationError(f"pcl_init must be one of {INIT_SCHEMES}")
        if self.report not in ("peer0", "all"):
            raise ConfigurationError("report must be 'peer0' or 'all'")
        if self.block < 1:
            raise ConfigurationError("block must be positive")

    @property
    def schedule(self) -> DistillSchedule:
        return DistillSchedule(self.decay_family, self.gamma, self.epochs)

    def init_scheme(self, method: str) -> str:
        return self.pcl_init if method == "pcl" else "decoupled"


@dataclass
class SimWorld:
    """State of one trial (or a block of trials along a leading axis)."""

    p_star: np.ndarray
    gt: np.ndarray
    s: np.ndarray
    t: np.ndarray
    lr: float
    eta: float
    epoch: int = 0

    def copy(self) -> "SimWorld":
        return replace(self, p_star=self.p_star.copy(), gt=self.gt.copy(), s=self.s.copy(), t=self.t.copy())


@dataclass
class GapCurve:
    mean: np.ndarray
    stderr: np.ndarray
    per_trial: Optional[np.ndarray] = field(default=None, repr=False)

    def __len__(self) -> int:
        return len(self.mean)


def displacement(frm, toward, lr: float) -> np.ndarray:
    """Pull of one supervision: ``lr * (toward - frm)``."""
    return lr * (np.asarray(toward) - np.asarray(frm))


def _centroid(points, idx) -> np.ndarray:
    acc = points[..., idx[0], :]
    for j in idx[1:]:
        acc = acc + points[..., j, :]
    return acc / len(idx)


def step_student_peer(world: SimWorld, p: int, method: str, omega: float = 0.0) -> np.ndarray:
    """Vector-summed update of student peer ``p``: GT pull + ensemble pull + teacher pulls.

    Teacher pulls per method: pcl/dk pull toward each other teacher peer
    separately; dkel mixes ``omega`` x (pull toward their centroid) with
    ``1 - omega`` x (the separate pulls).
    """
    if not 0.0 <= omega <= 1.0:
        raise ParameterError(f"omega must lie in [0, 1], got {omega}")
    if method not in SIM_METHODS:
        raise ConfigurationError(f"unknown simulation method {method!r}")
    s, t, lr = world.s, world.t, world.lr
    m = s.shape[-2]
    sp = s[..., p, :]
    ensemble = _centroid(s, list(range(m)))
    others = [j for j in range(m) if j != p]

    step = displacement(sp, world.gt, lr) + displacement(sp, ensemble, lr)
    each = displacement(sp, t[..., others[0], :], lr)
    for j in others[1:]:
        each = each + displacement(sp, t[..., j, :], lr)
    if method == "dkel":
        toward_mean = displacement(sp, _centroid(t, others), lr)
        step = step + (omega * toward_mean + (1.0 - omega) * each)
    else:
        step = step + each
    return sp + step


def step_teacher_peer(world: SimWorld, p: int, s_prime_p) -> np.ndarray:
    """EMA move of teacher peer ``p`` toward the updated student point."""
    if not 0 < world.eta < 1:
        raise ParameterError(f"eta must lie in (0, 1), got {world.eta}")
    return world.eta * np.asarray(s_prime_p) + (1.0 - world.eta) * world.t[..., p, :]


def step_world(world: SimWorld, method: str, omega: float) -> SimWorld:
    """Synchronous epoch: all students from the snapshot, then all teachers."""
    m = world.s.shape[-2]
    s_new = np.stack([step_student_peer(world, p, method, omega) for p in range(m)], axis=-2)
    t_new = np.stack([step_teacher_peer(world, p, s_new[..., p, :]) for p in range(m)], axis=-2)
    return replace(world, s=s_new, t=t_new, epoch=world.epoch + 1)


def _draw(cfg: SimConfig, rng: np.random.Generator):
    m = cfg.num_peers
    p_star = rng.random(2)
    gt = rng.random(2) if cfg.gt_noise is None else p_star + cfg.gt_noise * rng.standard_normal(2)
    s = rng.random((m, 2))
    t_random = rng.random((m, 2))
    return p_star, gt, s, t_random


def init_trial(cfg: SimConfig, rng: np.random.Generator, scheme: str = "decoupled") -> SimWorld:
    """Sample one world; ``scheme`` picks random teachers or the decoupled init."""
    if scheme not in INIT_SCHEMES:
        raise ConfigurationError(f"unknown init scheme {scheme!r}")
    p_star, gt, s, t_random = _draw(cfg, rng)
    if scheme == "random":
        t = t_random
    else:
        t = s + displacement(s, gt, cfg.lr)
    return SimWorld(p_star, gt, s, t, cfg.lr, cfg.eta)


def trial_rng(seed: int, trial: int) -> np.random.Generator:
    return np.random.default_rng([seed, trial])


def _init_block(cfg: SimConfig, start: int, stop: int):
    draws = [_draw(cfg, trial_rng(cfg.seed, i)) for i in range(start, stop)]
    return tuple(np.stack(col) for col in zip(*draws))


def simulate_block(cfg: SimConfig, start: int, stop: int, omega_override: Optional[float] = None) -> Dict[str, np.ndarray]:
    """Per-trial gap trajectories (trials x epochs) for trials ``start..stop-1``."""
    p_star, gt, s, t_random = _init_block(cfg, start, stop)
    t_decoupled = s + displacement(s, gt[:, None, :], cfg.lr)
    sched = cfg.schedule
    out = {}
    for method in cfg.methods:
        t0 = t_random if cfg.init_scheme(method) == "random" else t_decoupled
        world = SimWorld(p_star, gt, s.copy(), t0.copy(), cfg.lr, cfg.eta)
        gaps = np.empty((stop - start, cfg.epochs))
        for e in range(cfg.epochs):
            omega = decay_weight(sched, e) if omega_override is None else omega_override
            world = step_world(world, method, omega)
            diff = world.t - p_star[:, None, :]
            dist = np.sqrt(diff[..., 0] ** 2 + diff[..., 1] ** 2)
            if cfg.report == "peer0":
                gaps[:, e] = dist[:, 0]
            else:
                gaps[:, e] = (dist[:, 0] + dist[:, 1] + dist[:, 2]) / 3
        out[method] = gaps
    return out


def _block_job(args):
    cfg, start, stop, omega_override = args
    return start, simulate_block(cfg, start, stop, omega_override)


def run_simulation(cfg: SimConfig, workers: int = 1, omega_override: Optional[float] = None,
                   keep_trials: bool = False) -> Dict[str, GapCurve]:
    """Mean teacher gap per epoch for every method in ``cfg.methods``.

    Trials are processed in blocks that may run on a process pool; per-trial
    results are reassembled by trial index before averaging, so the output is
    bit-identical for any worker count.
    """
    bounds = [(a, min(a + cfg.block, cfg.trials)) for a in range(0, cfg.trials, cfg.block)]
    jobs = [(cfg, a, b, omega_override) for a, b in bounds]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(_block_job, jobs))
    else:
        parts = [_block_job(j) for j in jobs]
    parts.sort(key=lambda item: item[0])

    curves = {}
    for method in cfg.methods:
        per_trial = np.concatenate([blk[method] for _, blk in parts], axis=0)
        n = per_trial.shape[0]
        mean = per_trial.mean(axis=0)
        stderr = per_trial.std(axis=0, ddof=1) / np.sqrt(n) if n > 1 else np.zeros(cfg.epochs)
        curves[method] = GapCurve(mean, stderr, per_trial if keep_trials else None)
    return curves


def settling_epoch(curve, rel_tol: float = 0.05) -> int:
    """First epoch from which the curve stays within ``rel_tol`` of its final value."""
    values = np.asarray(curve.mean if isinstance(curve, GapCurve) else curve)
    final = values[-1]
    inside = np.abs(values - final) <= rel_tol * abs(final)
    for e in range(len(values)):
        if inside[e:].all():
            return e
    return len(values) - 1


def init_angle(world: SimWorld, p: int = 0, j: int = 1) -> np.ndarray:
    """Angle at student peer ``p`` between teacher peer ``j`` and P* (radians)."""
    a = world.t[..., j, :] - world.s[..., p, :]
    b = world.p_star - world.s[..., p, :]
    cos = (a * b).sum(-1) / (np.linalg.norm(a, axis=-1) * np.linalg.norm(b, axis=-1))
    return np.arccos(np.clip(cos, -1.0, 1.0))


def write_gap_csv(path, curves: Dict[str, GapCurve]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(GAP_COLUMNS)
        for method, curve in curves.items():
            for e in range(len(curve)):
                w.writerow([e, method, repr(float(curve.mean[e])), repr(float(curve.stderr[e]))])
