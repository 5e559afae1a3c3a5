"""Shared oracles.  Nothing here imports the code under test's numerics."""
import math

import numpy as np
import pytest


def fd_grad(fn, x, eps=1e-5):
    """Central differences of a scalar numpy function ``fn`` at ``x``."""
    x = np.array(x, dtype=float)
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        up, down = x.copy(), x.copy()
        up[i] += eps
        down[i] -= eps
        g[i] = (fn(up) - fn(down)) / (2 * eps)
    return g


def loop_softmax(row, tau=1.0):
    z = [v / tau for v in row]
    top = max(z)
    ex = [math.exp(v - top) for v in z]
    tot = sum(ex)
    return [v / tot for v in ex]


def loop_kl(t_row, s_row, tau):
    """KL(softmax(t/tau) || softmax(s/tau)) with plain Python floats."""
    p = loop_softmax(t_row, tau)
    q = loop_softmax(s_row, tau)
    return sum(pi * (math.log(pi) - math.log(qi)) for pi, qi in zip(p, q) if pi > 0)


def loop_kd(s, t, tau):
    s, t = np.atleast_2d(s), np.atleast_2d(t)
    return tau * tau * sum(loop_kl(tr, sr, tau) for sr, tr in zip(s.tolist(), t.tolist())) / len(s)


def loop_ce(logits, labels):
    total = 0.0
    for row, y in zip(np.atleast_2d(logits).tolist(), labels):
        top = max(row)
        lse = top + math.log(sum(math.exp(v - top) for v in row))
        total += lse - row[int(y)]
    return total / len(labels)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
