"""Bregman divergences and numerical checks of the divergence identities behind
the pretext objective.

The squared-norm generator recovers the squared Euclidean distance used by
the reconstruction term; the negative-entropy generator recovers the KL
divergence inside the JS term. The latter identity needs both arguments to
sum to one: the extra ``-sum(p - q)`` term only vanishes on the simplex.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import losses

ENTROPY_FLOOR = 1e-12


class DomainError(ValueError):
    pass


@dataclass(frozen=True)
class Generator:
    psi: Callable[[np.ndarray], float]
    grad_psi: Callable[[np.ndarray], np.ndarray]
    domain_tag: str = "all-reals"
    prepare: Callable[[np.ndarray], np.ndarray] = field(default=lambda v: v)

    def __add__(self, other: "Generator") -> "Generator":
        tag = self.domain_tag if self.domain_tag == other.domain_tag else "open-simplex"
        return Generator(
            lambda v: self.psi(v) + other.psi(v),
            lambda v: self.grad_psi(v) + other.grad_psi(v),
            tag,
            other.prepare if other.domain_tag == "open-simplex" else self.prepare,
        )

    def scaled(self, a: float) -> "Generator":
        if a <= 0:
            raise ValueError("scale must be positive to keep the generator strictly convex")
        return Generator(lambda v: a * self.psi(v), lambda v: a * self.grad_psi(v), self.domain_tag, self.prepare)


def squared_norm() -> Generator:
    return Generator(lambda v: float(v @ v), lambda v: 2.0 * v, "all-reals")


def _simplex_point(v: np.ndarray, floor: float) -> np.ndarray:
    if np.any(v < 0) or abs(v.sum() - 1.0) > 1e-9:
        raise DomainError("negative-entropy generator needs a point on the probability simplex")
    return np.maximum(v, floor)


def negative_entropy(floor: float = ENTROPY_FLOOR) -> Generator:
    return Generator(
        lambda v: float(np.sum(v * np.log(v))),
        lambda v: np.log(v) + 1.0,
        "open-simplex",
        lambda v: _simplex_point(v, floor),
    )


def bregman(g: Generator, p, q) -> float:
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise ValueError(f"length mismatch: {p.shape} vs {q.shape}")
    if not (np.all(np.isfinite(p)) and np.all(np.isfinite(q))):
        raise DomainError("non-finite input")
    p, q = g.prepare(p), g.prepare(q)
    return g.psi(p) - g.psi(q) - float(g.grad_psi(q) @ (p - q))


# -- identity checks ------------------------------------------------------------


@dataclass
class CheckReport:
    name: str
    trials: int
    max_deviation: float
    tolerance: float
    notes: list[str] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return self.max_deviation <= self.tolerance

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        extra = f"  ({'; '.join(self.notes)})" if self.notes else ""
        return f"{status}  {self.name}: trials={self.trials} max_dev={self.max_deviation:.3e} tol={self.tolerance:.0e}{extra}"


def check_squared_norm_identity(trials: int, rng: np.random.Generator, dim: int = 100,
                                tol: float = 1e-10) -> CheckReport:
    """Bregman(squared norm) against ``||p - q||^2`` on random vector pairs."""
    if trials < 1:
        raise ValueError("trials must be >= 1")
    g = squared_norm()
    worst = 0.0
    for _ in range(trials):
        p, q = rng.normal(size=dim), rng.normal(size=dim)
        d = p - q
        worst = max(worst, abs(bregman(g, p, q) - float(d @ d)))
    return CheckReport("bregman(squared_norm) == squared distance", trials, worst, tol)


def check_entropy_kl_identity(trials: int, rng: np.random.Generator, dim: int = 50,
                              tol: float = 1e-10) -> CheckReport:
    """Bregman(negative entropy) against KL on random interior simplex pairs."""
    if trials < 1:
        raise ValueError("trials must be >= 1")
    g = negative_entropy()
    worst = 0.0
    for _ in range(trials):
        p, q = rng.dirichlet(np.ones(dim)), rng.dirichlet(np.ones(dim))
        worst = max(worst, abs(bregman(g, p, q) - float(losses.kl_div(p, q))))
    return CheckReport("bregman(negative_entropy) == KL", trials, worst, tol)


def check_js_bounds(trials: int, rng: np.random.Generator, dim: int = 20) -> CheckReport:
    worst = 0.0
    for _ in range(trials):
        # sparse draws so that some pairs come close to disjoint support
        alpha = rng.choice([0.05, 1.0])
        p, q = rng.dirichlet(np.full(dim, alpha)), rng.dirichlet(np.full(dim, alpha))
        v = float(losses.js_div(p, q))
        worst = max(worst, -v, v - math.log(2.0))
    return CheckReport("0 <= JS <= ln 2", trials, max(worst, 0.0), 0.0)


# -- first-order view of the discrimination loss ---------------------------------

SMALL_ARGUMENT = 0.1
LARGE_ARGUMENT = 3.0


@dataclass
class TaylorReport:
    exact: float
    surrogate: float
    raw_surrogate: float
    relative_gap: float
    max_argument: float
    rank_agreement: bool
    flags: list[str] = field(default_factory=list)


def _vectors(batch) -> tuple[list[str], np.ndarray]:
    ids, vecs = [], []
    for sid, e in batch:
        v = getattr(e, "flat_normalized", e)
        vecs.append(np.asarray(v.detach() if hasattr(v, "detach") else v, dtype=np.float64))
        ids.append(sid)
    return ids, np.stack(vecs)


def taylor_gap(batch: Sequence, tau: float) -> TaylorReport:
    """Compare the exact anchor loss with its linearization in the inner products.

    For an anchor with positive scores ``s_p`` and negative scores ``s_n``
    (inner products over ``tau``), with ``r = n_neg / n_pos``::

        exact     = log(1 + sum exp(s_n) / sum exp(s_p))
        raw       = sum_n sum_p (s_n - s_p)
        surrogate = log(1 + r) + r / (1 + r) * raw / (n_pos * n_neg)

    ``raw`` is the double-sum form the loss is proportional to; ``surrogate``
    adds back the affine offset so the two can be compared directly.
    Values are averaged over every anchor in the batch.
    """
    ids, z = _vectors(batch)
    ids = np.asarray(ids)
    s = z @ z.T / tau
    exact, raw, approx = [], [], []
    max_arg = 0.0
    for a in range(len(ids)):
        others = np.arange(len(ids)) != a
        pos = others & (ids == ids[a])
        neg = ids != ids[a]
        if not pos.any() or not neg.any():
            raise ValueError("every anchor needs a positive and a negative")
        sp, sn = s[a, pos], s[a, neg]
        max_arg = max(max_arg, float(np.abs(s[a, others]).max()))
        exact.append(float(np.logaddexp(0.0, _lse(sn) - _lse(sp))))
        d = float(np.subtract.outer(sn, sp).sum())
        r = sn.size / sp.size
        raw.append(d)
        approx.append(math.log1p(r) + r / (1 + r) * d / (sn.size * sp.size))
    exact, raw, approx = map(np.asarray, (exact, raw, approx))
    e_mean, a_mean = float(exact.mean()), float(approx.mean())
    gap = abs(e_mean - a_mean) / max(abs(e_mean), 1e-300)

    # each log-sum-exp deviates from its tangent plane by at most max|s|^2 / 2,
    # so exact and surrogate differ by at most max|s|^2 per anchor; pairs of
    # anchors closer than twice that cannot be ordered by the surrogate
    remainder = max_arg**2
    agree = ranks_agree(exact, approx, resolution=2.0 * remainder)
    flags = []
    if max_arg >= LARGE_ARGUMENT:
        flags.append("approximation regime violated")
    elif max_arg <= SMALL_ARGUMENT and not agree:
        flags.append("rank disagreement in the small-argument regime")
    if float(np.abs(exact - approx).max()) > remainder + 1e-12:
        flags.append("surrogate error exceeds the second-order bound")
    return TaylorReport(e_mean, a_mean, float(raw.mean()), gap, max_arg, agree, flags)


def ranks_agree(exact, approx, resolution: float = 0.0) -> bool:
    """True when ``approx`` orders the entries of ``exact`` the same way.

    Pairs of ``exact`` closer than ``resolution`` are treated as ties.
    """
    exact, approx = np.asarray(exact, dtype=np.float64), np.asarray(approx, dtype=np.float64)
    de = np.subtract.outer(exact, exact)
    da = np.subtract.outer(approx, approx)
    resolvable = np.abs(de) > resolution
    return bool(np.all(np.sign(de[resolvable]) == np.sign(da[resolvable])))


def _lse(v: np.ndarray) -> float:
    m = v.max()
    return float(m + np.log(np.exp(v - m).sum()))


def run_suite(trials: int = 1000, seed: int = 0) -> list[CheckReport]:
    rng = np.random.default_rng(seed)
    return [
        check_squared_norm_identity(trials, rng),
        check_entropy_kl_identity(trials, rng),
        check_js_bounds(trials, rng),
    ]
