"""Synthetic labeled radiomic datasets with target correlation, skewness and
kurtosis, and a tunable class separation.

Marginals are third-order polynomials of a standard normal (Fleishman's
power method). The normal correlation is adjusted pair by pair so that the
correlation after the polynomial transform hits the target.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Sequence

import numpy as np
from scipy import optimize, stats

from .features import Dataset, from_array

log = logging.getLogger(__name__)


class InfeasibleMoments(ValueError):
    pass


@dataclass(frozen=True)
class MomentSpec:
    """Target moments for an ``n_roi x F`` map.

    ``correlation`` is either ``F x F`` (one within-ROI block shared by every
    ROI, ROIs independent) or ``D x D`` over all ``D = n_roi * F`` cells in
    row-major order. ``kurtosis`` is the plain fourth standardized moment
    (3 for a normal). ``ranges[..., 0]`` / ``ranges[..., 1]`` are per-cell
    min / max.
    """

    correlation: np.ndarray
    skewness: np.ndarray
    kurtosis: np.ndarray
    ranges: np.ndarray

    def __post_init__(self):
        corr = np.asarray(self.correlation, dtype=np.float64)
        skew = np.atleast_2d(np.asarray(self.skewness, dtype=np.float64))
        kurt = np.atleast_2d(np.asarray(self.kurtosis, dtype=np.float64))
        ranges = np.asarray(self.ranges, dtype=np.float64)
        for name, v in (("correlation", corr), ("skewness", skew), ("kurtosis", kurt), ("ranges", ranges)):
            object.__setattr__(self, name, v)
        n_roi, n_feat = skew.shape
        if kurt.shape != skew.shape or ranges.shape != (n_roi, n_feat, 2):
            raise ValueError("skewness, kurtosis and ranges must all be (n_roi, F[, 2])")
        if corr.shape not in ((n_feat, n_feat), (n_roi * n_feat, n_roi * n_feat)):
            raise ValueError(f"correlation must be {n_feat}x{n_feat} or {n_roi * n_feat}x{n_roi * n_feat}")
        if not np.allclose(corr, corr.T, atol=1e-12) or not np.allclose(np.diag(corr), 1.0, atol=1e-9):
            raise ValueError("correlation must be symmetric with unit diagonal")
        if np.linalg.eigvalsh(corr).min() < -1e-8:
            raise ValueError("correlation matrix is not positive semidefinite")
        if np.any(kurt < skew ** 2 + 1 - 1e-12):
            raise InfeasibleMoments("kurtosis must be at least skewness^2 + 1")
        if np.any(ranges[..., 1] < ranges[..., 0]):
            raise ValueError("range max below range min")

    @property
    def shape(self) -> tuple[int, int]:
        return self.skewness.shape

    @property
    def block(self) -> bool:
        return self.correlation.shape[0] == self.shape[1]


@dataclass(frozen=True)
class SimConfig:
    n_samples: int
    theta: float
    separated_rois: tuple[int, ...] = (0, 1, 2, 3, 4)
    noise_sd: float = 1.0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "separated_rois", tuple(int(r) for r in self.separated_rois))
        if self.n_samples < 2 or self.n_samples % 2:
            raise ValueError(f"n_samples must be even and >= 2, got {self.n_samples}")
        if not self.theta > 0:
            raise ValueError(f"theta must be > 0, got {self.theta}")
        if not self.separated_rois:
            raise ValueError("separated_rois must not be empty")
        if self.noise_sd < 0:
            raise ValueError("noise_sd must be >= 0")


# -- moment estimation ------------------------------------------------------------


def _corr(x: np.ndarray) -> tuple[np.ndarray, list[int]]:
    sd = x.std(axis=0)
    const = [int(i) for i in np.flatnonzero(~(sd > 0))]
    safe = np.where(sd > 0, sd, 1.0)
    z = (x - x.mean(axis=0)) / safe
    c = z.T @ z / x.shape[0]
    c[const, :] = 0.0
    c[:, const] = 0.0
    np.fill_diagonal(c, 1.0)
    return c, const


def estimate_moments(d: Dataset, mode: str = "block") -> MomentSpec:
    """Sample moments of every (ROI, feature) cell across subjects.

    In ``block`` mode the within-ROI correlation matrices are averaged over
    ROIs; ``full`` estimates the whole ``D x D`` matrix (needs many subjects).
    """
    if len(d) < 3:
        raise ValueError("need at least 3 subjects to estimate moments")
    x = d.tensor()
    m, n_roi, n_feat = x.shape
    # constant variables are handled below; scipy's precision warning adds nothing
    with np.errstate(invalid="ignore", divide="ignore"), warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        skew = stats.skew(x, axis=0, bias=True)
        kurt = stats.kurtosis(x, axis=0, fisher=False, bias=True)
    flat = ~np.isfinite(skew)
    skew = np.where(flat, 0.0, skew)
    kurt = np.where(flat, 3.0, kurt)
    if mode == "block":
        blocks, const = [], []
        for r in range(n_roi):
            c, bad = _corr(x[:, r, :])
            blocks.append(c)
            const += [(r, b) for b in bad]
        corr = np.mean(blocks, axis=0)
    elif mode == "full":
        corr, bad = _corr(x.reshape(m, -1))
        const = [divmod(b, n_feat) for b in bad]
    else:
        raise ValueError(f"unknown mode {mode!r}")
    if const:
        log.warning("%d constant variables; their correlations were zeroed", len(const))
    ranges = np.stack([x.min(axis=0), x.max(axis=0)], axis=-1)
    return MomentSpec(corr, skew, kurt, ranges)


# -- power-method marginals ---------------------------------------------------------


def _fleishman_residual(coef, skew, exkurt):
    b, c, d = coef
    return [
        b * b + 6 * b * d + 2 * c * c + 15 * d * d - 1,
        2 * c * (b * b + 24 * b * d + 105 * d * d + 2) - skew,
        24 * (b * d + c * c * (1 + b * b + 28 * b * d) + d * d * (12 + 48 * b * d + 141 * c * c + 225 * d * d))
        - exkurt,
    ]


@lru_cache(maxsize=4096)
def fleishman_coefficients(skew: float, kurtosis: float) -> tuple[float, float, float, float]:
    """``(a, b, c, d)`` with ``a + b Z + c Z^2 + d Z^3`` having unit variance,
    the given skewness and the given (non-excess) kurtosis."""
    exkurt = kurtosis - 3.0
    if skew == 0.0 and exkurt == 0.0:
        return 0.0, 1.0, 0.0, 0.0
    best = None
    for start in ((1.0, 0.0, 0.0), (0.9, skew / 6, exkurt / 24), (0.5, 0.1, 0.1), (1.2, 0.0, -0.1)):
        sol, info, ier, _ = optimize.fsolve(_fleishman_residual, start, args=(skew, exkurt), full_output=True, xtol=1e-13)
        res = np.abs(_fleishman_residual(sol, skew, exkurt)).max()
        if ier == 1 and res < 1e-9 and sol[0] > 0:
            best = sol
            break
    if best is None:
        raise InfeasibleMoments(f"no power-method transform for skewness={skew}, kurtosis={kurtosis}")
    b, c, d = (float(v) for v in best)
    return -c, b, c, d


def _intermediate_corr(target: np.ndarray, coef: np.ndarray) -> np.ndarray:
    """Normal correlations that map to ``target`` after the power transforms.

    ``coef`` is ``(n, 4)``. Solves the cubic for every pair by bisection on
    ``[-1, 1]``; targets outside the reachable range are clipped.
    """
    _, b, c, d = coef.T
    lin = np.outer(b, b) + 3 * np.outer(b, d) + 3 * np.outer(d, b) + 9 * np.outer(d, d)
    quad = 2 * np.outer(c, c)
    cub = 6 * np.outer(d, d)

    def f(rho):
        return rho * lin + rho ** 2 * quad + rho ** 3 * cub

    lo, hi = -np.ones_like(target), np.ones_like(target)
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        below = f(mid) < target
        lo = np.where(below, mid, lo)
        hi = np.where(below, hi, mid)
    rho = 0.5 * (lo + hi)
    np.fill_diagonal(rho, 1.0)
    return rho


def _nearest_psd(c: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh(c)
    if w.min() >= 1e-10:
        return c
    w = np.clip(w, 1e-10, None)
    c = (v * w) @ v.T
    s = np.sqrt(np.diag(c))
    return c / np.outer(s, s)


def _power_transform(z: np.ndarray, coef: np.ndarray) -> np.ndarray:
    a, b, c, d = np.moveaxis(coef, -1, 0)
    return a + z * (b + z * (c + z * d))


def sample_marginals(spec: MomentSpec, n: int, rng: np.random.Generator) -> np.ndarray:
    """Correlated non-normal draws rescaled to ``spec.ranges``; ``(n, n_roi, F)``."""
    n_roi, n_feat = spec.shape
    coef = np.array(
        [fleishman_coefficients(float(s), float(k)) for s, k in zip(spec.skewness.ravel(), spec.kurtosis.ravel())]
    ).reshape(n_roi, n_feat, 4)
    if spec.block:
        y = np.empty((n, n_roi, n_feat))
        chol_cache: dict[bytes, np.ndarray] = {}
        for r in range(n_roi):
            key = coef[r].tobytes()
            if key not in chol_cache:
                rho = _nearest_psd(_intermediate_corr(spec.correlation, coef[r]))
                chol_cache[key] = np.linalg.cholesky(rho)
            z = rng.standard_normal((n, n_feat)) @ chol_cache[key].T
            y[:, r, :] = _power_transform(z, coef[r])
    else:
        flat = coef.reshape(-1, 4)
        rho = _nearest_psd(_intermediate_corr(spec.correlation, flat))
        z = rng.standard_normal((n, flat.shape[0])) @ np.linalg.cholesky(rho).T
        y = _power_transform(z, flat).reshape(n, n_roi, n_feat)
    lo, hi = y.min(axis=0), y.max(axis=0)
    span = np.where(hi > lo, hi - lo, 1.0)
    return spec.ranges[..., 0] + (y - lo) / span * (spec.ranges[..., 1] - spec.ranges[..., 0])


def separation_shift(values: np.ndarray, labels: np.ndarray, rois: Sequence[int], theta: float) -> np.ndarray:
    """Move label-0 cells of ``rois`` by ``-mean/theta`` and label-1 cells by ``+mean/theta``."""
    out = values.copy()
    rois = list(rois)
    fbar = values[:, rois, :].mean(axis=0)
    sign = np.where(labels == 1, 1.0, -1.0)[:, None, None]
    out[:, rois, :] = values[:, rois, :] + sign * fbar / theta
    return out


def generate(spec: MomentSpec, cfg: SimConfig) -> Dataset:
    n_roi, _ = spec.shape
    if max(cfg.separated_rois) >= n_roi or min(cfg.separated_rois) < 0:
        raise ValueError(f"separated_rois out of range for {n_roi} ROIs")
    rng = np.random.default_rng(cfg.seed)
    x = sample_marginals(spec, cfg.n_samples, rng)
    labels = np.zeros(cfg.n_samples)
    labels[rng.permutation(cfg.n_samples)[: cfg.n_samples // 2]] = 1.0
    x = separation_shift(x, labels, cfg.separated_rois, cfg.theta)
    if cfg.noise_sd > 0:
        x = x + rng.normal(0.0, cfg.noise_sd, size=x.shape)
    ids = [f"sim{i:05d}" for i in range(cfg.n_samples)]
    return from_array(x, labels=labels, subject_ids=ids)


def reference_spec(n_roi: int = 10, n_features: int = 8, seed: int = 0,
                   range_width: tuple[float, float] = (0.005, 0.015)) -> MomentSpec:
    """A stand-in for moments estimated from real feature maps.

    Block correlation from a two-factor model, skewness in [-1, 1], feasible
    kurtosis, and small positive per-cell ranges. The range width sets the
    scale of the class shift relative to the unit Gaussian noise.
    """
    rng = np.random.default_rng(seed)
    loadings = rng.uniform(-0.7, 0.7, size=(n_features, 2))
    cov = loadings @ loadings.T
    cov[np.diag_indices_from(cov)] = 1.0
    s = np.sqrt(np.diag(cov))
    corr = _nearest_psd(cov / np.outer(s, s))
    skew = rng.uniform(-1.0, 1.0, size=(n_roi, n_features))
    kurt = 3.0 + 1.7 * skew ** 2 + rng.uniform(0.0, 2.0, size=skew.shape)
    lo = rng.uniform(0.0, 0.005, size=skew.shape)
    hi = lo + rng.uniform(*range_width, size=skew.shape)
    return MomentSpec(corr, skew, kurt, np.stack([lo, hi], axis=-1))


# -- verification ---------------------------------------------------------------------


@dataclass
class SimulationReport:
    n: int
    max_skew_error: float
    max_kurtosis_error: float
    max_corr_error: float
    violations: list[str] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.violations


def verify_simulation(generated: Dataset, spec: MomentSpec, exclude_rois: Sequence[int] = (),
                      skew_tol: float = 0.15, kurt_tol: float = 0.5, corr_tol: float = 0.1) -> SimulationReport:
    """Compare sample moments of ``generated`` with the targets in ``spec``.

    Rows in ``exclude_rois`` (the class-separated ones) are skipped. Only
    within-ROI correlations are checked in block mode.
    """
    x = generated.tensor()
    n, n_roi, n_feat = x.shape
    keep = [r for r in range(n_roi) if r not in set(exclude_rois)]
    skew = stats.skew(x, axis=0, bias=True)
    kurt = stats.kurtosis(x, axis=0, fisher=False, bias=True)
    violations = []
    skew_err = np.abs(skew - spec.skewness)[keep]
    kurt_err = np.abs(kurt - spec.kurtosis)[keep]
    for (i, j) in np.argwhere(skew_err > skew_tol):
        r = keep[i]
        violations.append(f"skewness at ROI {r}, feature {j}: {skew[r, j]:.3f} vs {spec.skewness[r, j]:.3f}")
    for (i, j) in np.argwhere(kurt_err > kurt_tol):
        r = keep[i]
        violations.append(f"kurtosis at ROI {r}, feature {j}: {kurt[r, j]:.3f} vs {spec.kurtosis[r, j]:.3f}")
    corr_err = 0.0
    if spec.block:
        for r in keep:
            c = np.corrcoef(x[:, r, :], rowvar=False) if n_feat > 1 else np.ones((1, 1))
            err = np.abs(c - spec.correlation)
            corr_err = max(corr_err, float(err.max()))
            for i, j in np.argwhere(np.triu(err > corr_tol, 1)):
                violations.append(f"correlation at ROI {r}, features ({i}, {j}): {c[i, j]:.3f} vs {spec.correlation[i, j]:.3f}")
    else:
        cells = [r * n_feat + f for r in keep for f in range(n_feat)]
        c = np.corrcoef(x.reshape(n, -1)[:, cells], rowvar=False)
        err = np.abs(c - spec.correlation[np.ix_(cells, cells)])
        corr_err = float(err.max())
        for i, j in np.argwhere(np.triu(err > corr_tol, 1)):
            violations.append(f"correlation between cells {cells[i]} and {cells[j]}: {c[i, j]:.3f}")
    return SimulationReport(n, float(skew_err.max(initial=0.0)), float(kurt_err.max(initial=0.0)), corr_err, violations)
