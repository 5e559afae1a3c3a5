"""Finite-difference audit of every autodiff primitive and every distillation loss."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, List, Tuple

import numpy as np

from . import losses
from .autodiff import Tensor, concat, grad_check, log_softmax_t, matmul, relu, softmax_t
from .network import MultiPeerNetwork, NetworkConfig

PRIMITIVE_TOL = 1e-4
LOSS_TOL = 1e-3


@dataclass
class CheckResult:
    name: str
    kind: str  # "primitive" or "loss"
    max_error: float
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_error < self.tol


def _away_from_zero(rng, shape):
    x = rng.standard_normal(shape)
    return np.sign(x) * (0.1 + np.abs(x))


def _primitive_cases(rng) -> List[Tuple[str, Callable[[Tensor], Tensor], np.ndarray]]:
    """(name, scalar function of x, point) triples; a random projection keeps every
    output coordinate in play."""
    a = rng.standard_normal((3, 4))
    b = rng.standard_normal((4, 2))
    r34 = rng.standard_normal((3, 4))
    r32 = rng.standard_normal((3, 2))
    r38 = rng.standard_normal((3, 8))
    bias = rng.standard_normal(4)

    def proj(r):
        return lambda out: (Tensor(r) * out).sum()

    return [
        ("add", lambda x: proj(r34)(x + Tensor(bias)), rng.standard_normal((3, 4))),
        ("add_broadcast", lambda x: proj(r34)(Tensor(a) + x), rng.standard_normal(4)),
        ("sub", lambda x: proj(r34)(Tensor(a) - x), rng.standard_normal((3, 4))),
        ("mul", lambda x: proj(r34)(x * Tensor(a)), rng.standard_normal((3, 4))),
        ("neg", lambda x: proj(r34)(-x), rng.standard_normal((3, 4))),
        ("matmul_left", lambda x: proj(r32)(matmul(x, Tensor(b))), rng.standard_normal((3, 4))),
        ("matmul_right", lambda x: proj(r32)(matmul(Tensor(a), x)), rng.standard_normal((4, 2))),
        ("relu", lambda x: proj(r34)(relu(x)), _away_from_zero(rng, (3, 4))),
        ("sum", lambda x: x.sum() * 1.7, rng.standard_normal((3, 4))),
        ("mean", lambda x: x.mean() * 1.7, rng.standard_normal((3, 4))),
        ("softmax_t", lambda x: proj(r34)(softmax_t(x, 2.0)), rng.standard_normal((3, 4))),
        ("log_softmax_t", lambda x: proj(r34)(log_softmax_t(x, 3.0)), rng.standard_normal((3, 4))),
        ("concat", lambda x: proj(r38)(concat([x, Tensor(a)], axis=1)), rng.standard_normal((3, 4))),
    ]


def _loss_cases(rng) -> List[Tuple[str, Callable[[Tensor], Tensor], np.ndarray]]:
    n, c, m, tau = 4, 3, 3, 3.0
    labels = rng.integers(0, c, size=n)
    peers = [rng.standard_normal((n, c)) * 2 for _ in range(m)]
    teachers = [rng.standard_normal((n, c)) * 2 for _ in range(m)]
    ens = rng.standard_normal((n, c)) * 2
    sched = losses.DistillSchedule("exponential", 0.5, 100)

    def with_peer0(x):
        return [x] + [Tensor(p) for p in peers[1:]]

    net_cfg = NetworkConfig(input_dim=2, hidden_dim=5, feature_dim=4, num_classes=2, num_peers=2)
    net = MultiPeerNetwork(net_cfg, seed=int(rng.integers(1 << 30)))
    xs = [rng.standard_normal((4, 2)) for _ in range(2)]
    ys = rng.integers(0, 2, size=4)
    t_toy = [rng.standard_normal((4, 2)) for _ in range(2)]
    w0 = net.backbone[0].weight

    def pe_sum(x):
        terms = losses.pe_loss(with_peer0(x), ens, tau)
        total = terms[0]
        for t in terms[1:]:
            total = total + t
        return total

    # the peer-ensemble target is a constant, so hold it at its base-point value
    ens_at_base = net.forward(xs)[2].data.copy()

    def toy_dkel(x):
        net.backbone[0].weight = x
        try:
            _, logits, ens_logits = net.forward(xs)
            omega = sched.weight(1)
            return losses.distill_total(logits, ens_logits, t_toy, ys, tau, omega=omega, pe_target=ens_at_base).total
        finally:
            net.backbone[0].weight = w0

    return [
        ("ce_loss", lambda x: losses.ce_loss(x, labels), peers[0]),
        ("kd_loss", lambda x: losses.kd_loss(x, teachers[0], tau), peers[0]),
        ("pe_loss", pe_sum, peers[0]),
        ("pm_loss", lambda x: losses.pm_loss(x, teachers[1:], tau), peers[0]),
        ("dk_loss", lambda x: losses.dk_loss(x, teachers[1:], tau), peers[0]),
        ("ek_loss", lambda x: losses.ek_loss(x, teachers, 0, tau), peers[0]),
        ("pcl_total", lambda x: losses.pcl_total(with_peer0(x), ens, teachers, labels, tau).total, peers[0]),
        ("dkel_total", lambda x: losses.dkel_total(with_peer0(x), ens, teachers, labels, sched, 2, tau).total, peers[0]),
        ("dkel_total_network", toy_dkel, w0.data.copy()),
    ]


def run_gradcheck(points: int = 10, seed: int = 0, eps: float = 1e-5) -> List[CheckResult]:
    """Worst relative error per check over ``points`` independent random draws."""
    worst = {}
    for k in range(points):
        rng = np.random.default_rng([seed, k])
        for kind, cases, tol in (("primitive", _primitive_cases(rng), PRIMITIVE_TOL),
                                 ("loss", _loss_cases(rng), LOSS_TOL)):
            for name, f, x in cases:
                err = grad_check(f, x, eps)
                prev = worst.get(name)
                if prev is None or err > prev.max_error or not np.isfinite(err):
                    worst[name] = CheckResult(name, kind, float(err), tol)
    return list(worst.values())


def format_report(results: List[CheckResult]) -> str:
    width = max(len(r.name) for r in results)
    lines = [f"{'check':<{width}}  {'kind':<9}  {'max rel err':>12}  {'tol':>7}  status"]
    for r in results:
        lines.append(f"{r.name:<{width}}  {r.kind:<9}  {r.max_error:12.3e}  {r.tol:7.0e}  {'ok' if r.passed else 'FAIL'}")
    return "\n".join(lines)
