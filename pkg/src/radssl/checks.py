"""Property checks on the pretext losses, packaged like the divergence suite.

Each check draws random inputs, compares the implementation with a plain
re-derivation, and returns a :class:`~radssl.bregman.CheckReport`.
"""

from __future__ import annotations

import math

import numpy as np
import torch

from . import bregman, losses


def _unit(rng, n, dim):
    v = rng.normal(size=(n, dim))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def check_js_symmetry(trials: int, rng: np.random.Generator) -> bregman.CheckReport:
    worst = 0.0
    for _ in range(trials):
        p, q = rng.dirichlet(np.ones(10), size=2)
        worst = max(worst, abs(losses.js_div(p, q).item() - losses.js_div(q, p).item()))
    return bregman.CheckReport("JS symmetric", trials, worst, 0.0)


def check_kl_nonnegative(trials: int, rng: np.random.Generator) -> bregman.CheckReport:
    worst = 0.0
    for _ in range(trials):
        p, q = rng.dirichlet(np.ones(10), size=2)
        worst = max(worst, -losses.kl_div(p, q).item(), abs(losses.kl_div(p, p).item()))
    return bregman.CheckReport("KL >= 0, KL(p, p) = 0", trials, max(worst, 0.0), 1e-12)


def check_softmax_shift(trials: int, rng: np.random.Generator) -> bregman.CheckReport:
    worst = 0.0
    for _ in range(trials):
        x = rng.normal(size=(4, 5))
        c = rng.uniform(-50, 50)
        worst = max(worst, float((losses.to_prob(x + c) - losses.to_prob(x)).abs().max()))
    return bregman.CheckReport("softmax shift invariance", trials, worst, 1e-12)


def check_recon_nonnegative(trials: int, rng: np.random.Generator) -> bregman.CheckReport:
    worst = 0.0
    for _ in range(trials):
        x = rng.normal(size=(3, 4))
        views = list(rng.normal(size=(2, 3, 4)))
        worst = max(worst, -losses.recon_loss(x, views, beta=float(rng.uniform())).item())
    exact = losses.recon_loss(x, [x, x], beta=1.0).item()
    return bregman.CheckReport("reconstruction loss >= 0, = 0 at x", trials, max(worst, 0.0, abs(exact)), 0.0)


def check_discrimination_oracle(trials: int, rng: np.random.Generator) -> bregman.CheckReport:
    """Two subjects, two views each, against explicit exponential sums."""
    worst = 0.0
    for _ in range(trials):
        z = _unit(rng, 4, 2)
        tau = float(rng.uniform(0.05, 1.0))
        subj = [0, 0, 1, 1]
        total = 0.0
        for a in range(4):
            num = sum(math.exp(z[a] @ z[b] / tau) for b in range(4) if b != a and subj[b] == subj[a])
            den = sum(math.exp(z[a] @ z[b] / tau) for b in range(4) if b != a)
            total += -math.log(num / den)
        got = losses.discrimination_from_tensor(torch.as_tensor(z), subj, tau).item()
        worst = max(worst, abs(got - total / 4))
    return bregman.CheckReport("discrimination loss vs explicit sums", trials, worst, 1e-9)


def check_small_argument_surrogate(trials: int, rng: np.random.Generator) -> bregman.CheckReport:
    worst = 0.0
    notes = []
    for _ in range(trials):
        z = _unit(rng, 6, 3) * 0.03
        rep = bregman.taylor_gap([(f"s{i // 2}", v) for i, v in enumerate(z)], tau=0.1)
        worst = max(worst, rep.relative_gap)
        if rep.flags:
            notes, worst = rep.flags, math.inf
    return bregman.CheckReport("first-order surrogate, args <= 0.01", trials, worst, 0.05, notes)


def run_suite(trials: int = 1000, seed: int = 0) -> list[bregman.CheckReport]:
    rng = np.random.default_rng(seed)
    small = max(1, trials // 10)
    return [
        check_js_symmetry(trials, rng),
        check_kl_nonnegative(trials, rng),
        check_softmax_shift(small, rng),
        check_recon_nonnegative(small, rng),
        check_discrimination_oracle(small, rng),
        check_small_argument_surrogate(small, rng),
    ]
