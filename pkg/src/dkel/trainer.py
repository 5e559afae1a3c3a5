"""Online distillation training loop: DKEL, the PCL baseline, and independent peers.

One run is strictly sequential.  Every source of randomness is derived from
the run seed plus a purpose tag and the (epoch, batch, peer) coordinates, so
a run is bit-reproducible regardless of how many sibling runs execute.
"""
from __future__ import annotations

import csv
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from itertools import combinations
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from .autodiff import Tensor, no_grad
from .errors import ConfigurationError, DataError, ParameterError, ShapeError, TrainingAborted
from .losses import DistillSchedule, LossBreakdown, ce_loss, decay_weight, distill_total
from .network import MultiPeerNetwork, NetworkConfig, copy_parameters, param_norm, param_vector

METHODS = ("dkel", "pcl", "independent")
ABLATION_TERMS = ("dk", "ek")

METRICS_COLUMNS = (
    "epoch", "method", "seed", "omega",
    "loss_ce", "loss_pe", "loss_dk", "loss_ek", "loss_ceE", "loss_total",
    "acc_student_mean", "acc_teacher_mean", "acc_teacher_ensemble",
    "norm_student", "norm_teacher",
)

# rng purpose tags
_NET, _SHUFFLE, _AUG, _INIT = 0, 1, 2, 3


# --------------------------------------------------------------------------- data

@dataclass(frozen=True)
class DataConfig:
    kind: str = "spirals"
    n: int = 600
    classes: int = 3
    noise: float = 0.1
    turns: float = 1.0
    seed: int = 0


@dataclass
class Dataset:
    x_train: np.ndarray
    y_train: np.ndarray
    x_val: np.ndarray
    y_val: np.ndarray


def spiral_arm_angle(k: int, classes: int, turns: float, radius):
    """Polar angle of arm ``k`` at ``radius`` (radius runs 0..1 along the arm)."""
    return 2 * np.pi * k / classes + 2 * np.pi * turns * np.asarray(radius)


def gen_dataset(kind: str = "spirals", n: int = 600, classes: int = 3, noise: float = 0.1,
                seed: int = 0, turns: float = 1.0) -> Dataset:
    """Synthetic 2-D classification data with a stratified 80/20 split."""
    if classes < 2 or n < classes:
        raise DataError(f"need classes >= 2 and n >= classes, got n={n}, classes={classes}")
    if noise < 0:
        raise DataError(f"noise must be non-negative, got {noise}")
    rng = np.random.default_rng(seed)
    counts = [n // classes + (1 if k < n % classes else 0) for k in range(classes)]
    xs, ys = [], []
    for k, nk in enumerate(counts):
        if kind == "spirals":
            r = rng.uniform(0.05, 1.0, size=nk)
            theta = spiral_arm_angle(k, classes, turns, r)
            pts = np.stack([r * np.cos(theta), r * np.sin(theta)], axis=1)
        elif kind == "blobs":
            angle = 2 * np.pi * k / classes
            pts = np.tile([10 * np.cos(angle), 10 * np.sin(angle)], (nk, 1))
        else:
            raise DataError(f"unknown dataset kind {kind!r}")
        xs.append(pts + noise * rng.standard_normal(pts.shape))
        ys.append(np.full(nk, k))

    tr, va = [], []
    for k in range(classes):
        idx = rng.permutation(counts[k])
        cut = int(round(0.8 * counts[k]))
        tr.append((xs[k][idx[:cut]], ys[k][idx[:cut]]))
        va.append((xs[k][idx[cut:]], ys[k][idx[cut:]]))
    x_tr = np.concatenate([a for a, _ in tr])
    y_tr = np.concatenate([b for _, b in tr])
    order = rng.permutation(len(y_tr))
    return Dataset(
        x_train=x_tr[order], y_train=y_tr[order],
        x_val=np.concatenate([a for a, _ in va]), y_val=np.concatenate([b for _, b in va]),
    )


def make_dataset(cfg: DataConfig) -> Dataset:
    return gen_dataset(cfg.kind, cfg.n, cfg.classes, cfg.noise, cfg.seed, cfg.turns)


# --------------------------------------------------------------------------- config

@dataclass(frozen=True)
class TrainConfig:
    method: str = "dkel"
    ablation: Tuple[str, ...] = ()
    epochs: int = 100
    batch_size: int = 128
    lr: float = 0.1
    lr_decay: float = 0.1
    milestones: Tuple[int, ...] = (50, 75)
    momentum: float = 0.9
    weight_decay: float = 5e-4
    eta: float = 0.05
    tau: float = 3.0
    decay_family: str = "exponential"
    gamma: float = 0.5
    init_iters: int = 1
    init_lr: float = 0.01
    augment_std: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigurationError(f"unknown method {self.method!r}; choose from {METHODS}")
        bad = set(self.ablation) - set(ABLATION_TERMS)
        if bad:
            raise ConfigurationError(f"unknown ablation terms {sorted(bad)}; choose from {ABLATION_TERMS}")
        if self.ablation and self.method != "independent":
            raise ConfigurationError("ablation terms extend the independent baseline only")
        if not 0 < self.eta < 1:
            raise ConfigurationError(f"eta must lie in (0, 1), got {self.eta}")
        if self.lr < 0 or self.weight_decay < 0 or self.init_lr < 0:
            raise ConfigurationError("lr, init_lr and weight_decay must be non-negative")
        if self.init_iters < 0:
            raise ConfigurationError(f"init_iters must be >= 0, got {self.init_iters}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigurationError("epochs and batch_size must be positive")
        if not self.tau > 0:
            raise ConfigurationError(f"tau must be positive, got {self.tau}")
        self.schedule  # validates the decay family

    @property
    def schedule(self) -> DistillSchedule:
        return DistillSchedule(self.decay_family, self.gamma, self.epochs)

    @property
    def terms(self) -> dict:
        """Which loss terms are active for this method."""
        if self.method == "dkel":
            return dict(use_pe=True, use_dk=True, use_ek=True)
        if self.method == "pcl":
            return dict(use_pe=True, use_dk=True, use_ek=False)
        return dict(use_pe=False, use_dk="dk" in self.ablation, use_ek="ek" in self.ablation)

    @property
    def arm_name(self) -> str:
        if self.method != "independent" or not self.ablation:
            return self.method
        return "independent+" + "+".join(sorted(self.ablation))

    def lr_at(self, epoch: int) -> float:
        return self.lr * self.lr_decay ** sum(1 for m in self.milestones if epoch >= m)


# --------------------------------------------------------------------------- optimisation

class SGD:
    """SGD with (Nesterov) momentum and L2 weight decay folded into the gradient.

    g <- g + wd * w;  v <- mu * v + g;  w <- w - lr * (g + mu * v)
    """

    def __init__(self, params: Sequence[Tensor], lr: float, momentum: float = 0.0,
                 weight_decay: float = 0.0, nesterov: bool = True):
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.nesterov = nesterov
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def step(self, grads: Optional[Sequence[Optional[np.ndarray]]] = None) -> None:
        if grads is None:
            grads = [p.grad for p in self.params]
        if len(grads) != len(self.params):
            raise ShapeError(f"{len(grads)} gradients for {len(self.params)} parameters")
        for p, g, v in zip(self.params, grads, self.velocity):
            g = np.zeros_like(p.data) if g is None else np.asarray(g)
            if g.shape != p.shape:
                raise ShapeError(f"gradient {g.shape} does not match parameter {p.shape}")
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            if self.momentum:
                v *= self.momentum
                v += g
                g = g + self.momentum * v if self.nesterov else v
            p.data -= self.lr * g

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


def sgd_step(opt: SGD, params: Sequence[Tensor], grads) -> None:
    if [id(p) for p in params] != [id(p) for p in opt.params]:
        raise ShapeError("parameter list does not match optimizer state")
    opt.step(grads)


def ema_update(teacher: MultiPeerNetwork, student: MultiPeerNetwork, eta: float) -> None:
    """teacher <- eta * student + (1 - eta) * teacher, parameter by parameter."""
    if not 0 < eta < 1:
        raise ParameterError(f"eta must lie in (0, 1), got {eta}")
    if teacher.config != student.config:
        raise ConfigurationError("teacher and student configurations differ")
    for t, s in zip(teacher.parameters(), student.parameters()):
        t.data[...] = eta * s.data + (1.0 - eta) * t.data


def augment_per_peer(x: np.ndarray, p: int, rng: np.random.Generator, std: float = 0.1) -> np.ndarray:
    """Gaussian-jittered view of ``x`` for peer ``p`` (``rng`` is already peer-specific)."""
    if std == 0:
        return np.array(x, dtype=np.float64)
    return x + std * rng.standard_normal(np.shape(x))


def peer_rng(seed: int, epoch: int, batch: int, peer: int) -> np.random.Generator:
    return np.random.default_rng([seed, _AUG, epoch, batch, peer])


def init_decoupled_teacher(student: MultiPeerNetwork, teacher: MultiPeerNetwork, data: Dataset,
                           init_iters: int = 1, init_lr: float = 0.01, *, batch_size: int = 128,
                           augment_std: float = 0.1, seed: int = 0) -> None:
    """Copy the student into the teacher, then take ``init_iters`` CE-only SGD steps on the teacher."""
    if init_iters < 0:
        raise ParameterError(f"init_iters must be >= 0, got {init_iters}")
    copy_parameters(student, teacher)
    if init_iters == 0:
        return
    rng = np.random.default_rng([seed, _INIT])
    teacher.requires_grad_(True)
    opt = SGD(teacher.parameters(), lr=init_lr)
    try:
        for it in range(init_iters):
            idx = rng.choice(len(data.y_train), size=min(batch_size, len(data.y_train)), replace=False)
            xb, yb = data.x_train[idx], data.y_train[idx]
            loss = None
            for p in range(teacher.num_peers):
                view = augment_per_peer(xb, p, np.random.default_rng([seed, _INIT, it, p]), augment_std)
                _, logits = teacher.forward_peer(view, p)
                term = ce_loss(logits, yb)
                loss = term if loss is None else loss + term
            opt.zero_grad()
            loss.backward()
            opt.step()
    finally:
        teacher.zero_grad()
        teacher.requires_grad_(False)


# --------------------------------------------------------------------------- evaluation & metrics

@dataclass
class Accuracy:
    per_peer: List[float]
    ensemble: float
    mean_abs_logit: float

    @property
    def peer_mean(self) -> float:
        return float(np.mean(self.per_peer))


def evaluate(net: MultiPeerNetwork, x: np.ndarray, y: np.ndarray) -> Accuracy:
    """Argmax accuracy per peer and for the ensemble head; ties go to the lowest class index."""
    y = np.asarray(y)
    with no_grad():
        feats, logits, ens = net.forward([x] * net.num_peers)
    per_peer = [float(np.mean(np.argmax(z.data, axis=1) == y)) for z in logits]
    ens_acc = float(np.mean(np.argmax(ens.data, axis=1) == y))
    mal = float(np.mean([np.mean(np.abs(z.data)) for z in logits]))
    return Accuracy(per_peer, ens_acc, mal)


@dataclass
class EpochMetrics:
    epoch: int
    method: str
    seed: int
    omega: float
    loss_ce: float
    loss_pe: Optional[float]
    loss_dk: Optional[float]
    loss_ek: Optional[float]
    loss_ceE: float
    loss_total: float
    acc_student: List[float]
    acc_teacher: List[float]
    acc_student_ensemble: float
    acc_teacher_ensemble: float
    norm_student: float
    norm_teacher: float
    mean_abs_logit: float
    lr: float = 0.0

    def as_row(self) -> dict:
        return {
            "epoch": self.epoch, "method": self.method, "seed": self.seed, "omega": self.omega,
            "loss_ce": self.loss_ce, "loss_pe": self.loss_pe, "loss_dk": self.loss_dk,
            "loss_ek": self.loss_ek, "loss_ceE": self.loss_ceE, "loss_total": self.loss_total,
            "acc_student_mean": float(np.mean(self.acc_student)),
            "acc_teacher_mean": float(np.mean(self.acc_teacher)),
            "acc_teacher_ensemble": self.acc_teacher_ensemble,
            "norm_student": self.norm_student, "norm_teacher": self.norm_teacher,
        }


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_metrics_csv(path, history: Sequence[EpochMetrics]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRICS_COLUMNS)
        for m in history:
            row = m.as_row()
            w.writerow([_fmt(row[c]) for c in METRICS_COLUMNS])


@dataclass
class CollapseProbe:
    """Minimal record accepted by :func:`collapse_monitor`."""

    norm_student: float
    mean_abs_logit: float


def collapse_monitor(history: Sequence, window: int = 5, threshold: float = 1e-3) -> str:
    """'collapsing' if the student norm fell at every step of the last ``window``
    records and the latest mean |logit| is below ``threshold``."""
    if window < 2:
        raise ParameterError(f"window must be >= 2, got {window}")
    if len(history) < window:
        return "healthy"
    tail = history[-window:]
    norms = [h.norm_student for h in tail]
    shrinking = all(b < a for a, b in zip(norms, norms[1:]))
    if shrinking and tail[-1].mean_abs_logit < threshold:
        return "collapsing"
    return "healthy"


def first_collapse(history: Sequence, window: int = 5, threshold: float = 1e-3) -> Optional[int]:
    """Index of the first record at which :func:`collapse_monitor` fires, else None."""
    for i in range(window, len(history) + 1):
        if collapse_monitor(history[:i], window, threshold) == "collapsing":
            return i - 1
    return None


# --------------------------------------------------------------------------- training

StageHook = Callable[[str, int], None]


def train_epoch(student: MultiPeerNetwork, teacher: MultiPeerNetwork, opt: SGD, data: Dataset,
                cfg: TrainConfig, e: int, on_stage: Optional[StageHook] = None) -> EpochMetrics:
    """One pass over the training set followed by validation of both networks.

    ``on_stage(stage, batch)`` is called with 'before_step', 'after_sgd' and
    'after_ema' so callers can audit how each network changes.
    """
    if not 0 <= e < cfg.epochs:
        raise ParameterError(f"epoch {e} outside [0, {cfg.epochs})")
    m = student.num_peers
    terms = cfg.terms
    omega = decay_weight(cfg.schedule, e)
    opt.lr = cfg.lr_at(e)

    order = np.random.default_rng([cfg.seed, _SHUFFLE, e]).permutation(len(data.y_train))
    sums = {"ce": 0.0, "pe": 0.0, "dk": 0.0, "ek": 0.0, "ceE": 0.0, "total": 0.0}
    n_batches = 0
    for b, start in enumerate(range(0, len(order), cfg.batch_size)):
        idx = order[start:start + cfg.batch_size]
        xb, yb = data.x_train[idx], data.y_train[idx]
        views = [augment_per_peer(xb, p, peer_rng(cfg.seed, e, b, p), cfg.augment_std) for p in range(m)]
        if on_stage:
            on_stage("before_step", b)

        _, s_logits, ens = student.forward(views)
        t_logits = None
        if terms["use_dk"] or terms["use_ek"]:
            with no_grad():
                # teacher peer j sees view I_j; student peer p uses the j != p entries
                t_logits = [teacher.forward_peer(views[j], j)[1].data for j in range(m)]
        br: LossBreakdown = distill_total(s_logits, ens, t_logits, yb, cfg.tau, omega=omega, **terms)

        total = br.total.item()
        if not math.isfinite(total):
            raise TrainingAborted(
                f"non-finite loss at epoch {e}, batch {b}",
                {"epoch": e, "batch": b, "norm_student": param_norm(student), "norm_teacher": param_norm(teacher)},
            )
        opt.zero_grad()
        br.total.backward()
        opt.step()
        if on_stage:
            on_stage("after_sgd", b)
        ema_update(teacher, student, cfg.eta)
        if on_stage:
            on_stage("after_ema", b)

        sums["ce"] += sum(br.ce_per_peer)
        sums["ceE"] += br.ce_ensemble
        sums["total"] += total
        for key, vals in (("pe", br.pe_per_peer), ("dk", br.dk_per_peer), ("ek", br.ek_per_peer)):
            if vals is not None:
                sums[key] += sum(vals)
        n_batches += 1

    acc_s = evaluate(student, data.x_val, data.y_val)
    acc_t = evaluate(teacher, data.x_val, data.y_val)
    mean = {k: v / n_batches for k, v in sums.items()}
    return EpochMetrics(
        epoch=e, method=cfg.arm_name, seed=cfg.seed, omega=omega,
        loss_ce=mean["ce"],
        loss_pe=mean["pe"] if terms["use_pe"] else None,
        loss_dk=mean["dk"] if terms["use_dk"] else None,
        loss_ek=mean["ek"] if terms["use_ek"] else None,
        loss_ceE=mean["ceE"], loss_total=mean["total"],
        acc_student=acc_s.per_peer, acc_teacher=acc_t.per_peer,
        acc_student_ensemble=acc_s.ensemble, acc_teacher_ensemble=acc_t.ensemble,
        norm_student=param_norm(student), norm_teacher=param_norm(teacher),
        mean_abs_logit=acc_s.mean_abs_logit, lr=opt.lr,
    )


@dataclass
class TrainResult:
    config: TrainConfig
    history: List[EpochMetrics]
    student: MultiPeerNetwork
    teacher: MultiPeerNetwork

    @property
    def final(self) -> EpochMetrics:
        return self.history[-1]


def build_networks(cfg: TrainConfig, net_cfg: NetworkConfig) -> Tuple[MultiPeerNetwork, MultiPeerNetwork]:
    student = MultiPeerNetwork(net_cfg, seed=int(np.random.default_rng([cfg.seed, _NET]).integers(2**31)))
    teacher = MultiPeerNetwork(net_cfg, seed=0).requires_grad_(False)
    return student, teacher


def run_training(cfg: TrainConfig, data: Dataset, net_cfg: Optional[NetworkConfig] = None,
                 on_epoch: Optional[Callable[[EpochMetrics], None]] = None) -> TrainResult:
    """Teacher initialisation followed by ``cfg.epochs`` epochs of online distillation."""
    if net_cfg is None:
        net_cfg = NetworkConfig(input_dim=data.x_train.shape[1], num_classes=int(data.y_train.max()) + 1)
    if data.x_train.shape[1] != net_cfg.input_dim:
        raise ConfigurationError(f"data has {data.x_train.shape[1]} features, network expects {net_cfg.input_dim}")
    student, teacher = build_networks(cfg, net_cfg)
    # PCL's temporal mean teacher starts as a plain copy of the student
    init_iters = 0 if cfg.method == "pcl" else cfg.init_iters
    init_decoupled_teacher(student, teacher, data, init_iters, cfg.init_lr,
                           batch_size=cfg.batch_size, augment_std=cfg.augment_std, seed=cfg.seed)
    opt = SGD(student.parameters(), cfg.lr, cfg.momentum, cfg.weight_decay, nesterov=True)
    history = []
    for e in range(cfg.epochs):
        metrics = train_epoch(student, teacher, opt, data, cfg, e)
        history.append(metrics)
        if on_epoch:
            on_epoch(metrics)
    return TrainResult(cfg, history, student, teacher)


def _run_job(job) -> List[EpochMetrics]:
    cfg, data_cfg, net_cfg = job
    return run_training(cfg, make_dataset(data_cfg), net_cfg).history


def run_many(jobs: Sequence[Tuple[TrainConfig, DataConfig, Optional[NetworkConfig]]],
             workers: int = 1) -> List[List[EpochMetrics]]:
    """Run independent training jobs, optionally in a process pool; results keep job order."""
    jobs = list(jobs)
    if workers <= 1 or len(jobs) <= 1:
        return [_run_job(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_run_job, jobs))


def ablation_arms(base: TrainConfig, terms: Sequence[str]) -> List[TrainConfig]:
    """Baseline plus every non-empty subset of ``terms`` added to it."""
    terms = sorted(set(terms))
    arms = [replace(base, method="independent", ablation=())]
    for k in range(1, len(terms) + 1):
        for combo in combinations(terms, k):
            arms.append(replace(base, method="independent", ablation=tuple(combo)))
    return arms


def weight_decay_only_run(net: MultiPeerNetwork, x: np.ndarray, steps: int, lr: float = 0.1,
                          weight_decay: float = 5e-4, keep_trajectory: bool = False):
    """Apply ``steps`` SGD updates with identically zero loss gradient.

    Only the L2 term acts, so every weight shrinks by ``1 - lr * weight_decay``
    per step.  Returns the per-step :class:`CollapseProbe` records (step 0 is
    the starting point) and, optionally, the flat parameter vectors.
    """
    opt = SGD(net.parameters(), lr, momentum=0.0, weight_decay=weight_decay, nesterov=False)
    zeros = [np.zeros_like(p.data) for p in net.parameters()]

    def probe():
        acc = evaluate(net, x, np.zeros(len(x), dtype=int))
        return CollapseProbe(param_norm(net), acc.mean_abs_logit)

    probes = [probe()]
    trajectory = [param_vector(net)] if keep_trajectory else None
    for _ in range(steps):
        opt.step(zeros)
        probes.append(probe())
        if keep_trajectory:
            trajectory.append(param_vector(net))
    return probes, (np.array(trajectory) if keep_trajectory else None)
