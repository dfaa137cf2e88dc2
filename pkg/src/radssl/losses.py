"""Reconstruction, discrimination and joint pretext objectives.

All functions take numpy arrays or torch tensors and return 0-dim float64
tensors so they can be backpropagated through during pretraining.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch

from .encoder import DTYPE, ViewEmbedding

LN2 = math.log(2.0)


@dataclass(frozen=True)
class LossWeights:
    beta: float = 0.5
    lam: float = 1.0
    tau: float = 0.1

    def __post_init__(self):
        if not 0.0 <= self.beta <= 1.0:
            raise ValueError(f"beta must be in [0, 1], got {self.beta}")
        if self.lam < 0:
            raise ValueError(f"lambda must be >= 0, got {self.lam}")
        if self.tau <= 0:
            raise ValueError(f"tau must be > 0, got {self.tau}")


def _t(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x.to(DTYPE)
    return torch.as_tensor(np.asarray(x, dtype=np.float64))


def to_prob(x) -> torch.Tensor:
    """Softmax over the whole flattened matrix: one distribution per map."""
    return torch.softmax(_t(x).reshape(-1), dim=0)


def log_prob(x) -> torch.Tensor:
    """Batched log-softmax over the last two axes, flattened."""
    x = _t(x)
    return torch.log_softmax(x.reshape(*x.shape[:-2], -1), dim=-1)


def is_prob_vector(p, atol: float = 1e-9) -> bool:
    p = _t(p)
    return bool((p >= 0).all()) and abs(float(p.sum()) - 1.0) <= atol


def _xlogy_ratio(p: torch.Tensor, q: torch.Tensor) -> torch.Tensor:
    # 0 * log(0 / q) = 0 by convention
    safe_p = torch.where(p > 0, p, torch.ones_like(p))
    safe_q = torch.where(p > 0, q, torch.ones_like(q))
    return torch.where(p > 0, p * (torch.log(safe_p) - torch.log(safe_q)), torch.zeros_like(p))


def kl_div(p, q) -> torch.Tensor:
    p, q = _t(p), _t(q)
    if p.shape != q.shape:
        raise ValueError(f"length mismatch: {tuple(p.shape)} vs {tuple(q.shape)}")
    if bool(((p > 0) & (q <= 0)).any()):
        raise ValueError("infinite divergence: q has zero mass where p does not")
    return _xlogy_ratio(p, q).sum()


def js_div(p, q) -> torch.Tensor:
    p, q = _t(p), _t(q)
    if p.shape != q.shape:
        raise ValueError(f"length mismatch: {tuple(p.shape)} vs {tuple(q.shape)}")
    z = 0.5 * (p + q)
    return 0.5 * _xlogy_ratio(p, z).sum() + 0.5 * _xlogy_ratio(q, z).sum()


def js_from_logits(x, x_hat) -> torch.Tensor:
    """JS divergence between the softmax distributions of two batches of maps.

    Works in log space so that tiny softmax masses do not underflow to zero.
    Shapes broadcast over leading axes; result has the leading shape.
    """
    lp, lq = log_prob(x), log_prob(x_hat)
    lp, lq = torch.broadcast_tensors(lp, lq)
    lz = torch.logaddexp(lp, lq) - LN2
    kl_p = (lp.exp() * (lp - lz)).sum(-1)
    kl_q = (lq.exp() * (lq - lz)).sum(-1)
    return 0.5 * kl_p + 0.5 * kl_q


def reconstruction_terms(x, x_hat, beta: float, mask=None, reduction: str = "sum") -> torch.Tensor:
    """Per-view reconstruction loss ``beta*||x - x_hat||^2 + (1-beta)*JS``.

    ``x`` is ``(..., n_roi, F)`` and broadcasts against ``x_hat``. With ``mask``
    (boolean ``(..., n_roi)``), the squared error is restricted to masked rows.
    ``reduction="mean"`` divides the squared error by the number of cells it
    covers instead of summing them.
    """
    x, x_hat = _t(x), _t(x_hat)
    sq = (x - x_hat) ** 2
    if mask is not None:
        mask = torch.as_tensor(np.asarray(mask) if not isinstance(mask, torch.Tensor) else mask)
        sq = sq * mask[..., None].to(DTYPE)
        cells = mask.sum(-1).to(DTYPE) * x.shape[-1]
    else:
        cells = torch.tensor(float(x.shape[-2] * x.shape[-1]), dtype=DTYPE)
    sq = sq.sum((-1, -2))
    if reduction == "mean":
        sq = sq / cells
    elif reduction != "sum":
        raise ValueError(f"unknown reduction {reduction!r}")
    if beta == 1.0:
        return beta * sq
    return beta * sq + (1.0 - beta) * js_from_logits(x, x_hat)


def recon_loss(x, views_recon: Sequence, beta: float, reduction: str = "sum") -> torch.Tensor:
    """Summed reconstruction loss of one subject over its K reconstructed views."""
    if not 0.0 <= beta <= 1.0:
        raise ValueError(f"beta must be in [0, 1], got {beta}")
    x = _t(getattr(x, "values", x))
    recon = torch.stack([_t(r) for r in views_recon])
    if recon.shape[1:] != x.shape:
        raise ValueError(f"reconstruction shape {tuple(recon.shape[1:])} does not match map {tuple(x.shape)}")
    return reconstruction_terms(x, recon, beta, reduction=reduction).sum()


# -- discrimination -------------------------------------------------------------


def _flat(e) -> torch.Tensor:
    return e.flat_normalized if isinstance(e, ViewEmbedding) else _t(e)


def pairwise_nll(anchor, batch: Sequence[tuple[str, object]], anchor_subject: str, tau: float) -> torch.Tensor:
    """Negative log of the positive mass over the total mass seen from ``anchor``.

    Positives are the other views of ``anchor_subject``; the anchor itself (by
    identity) is left out of both sums.
    """
    a = _flat(anchor)
    pos, allv = [], []
    for sid, emb in batch:
        if emb is anchor:
            continue
        s = torch.dot(a, _flat(emb)) / tau
        allv.append(s)
        if sid == anchor_subject:
            pos.append(s)
    if not pos:
        raise ValueError("batch has no positive for the anchor")
    if len(pos) == len(allv):
        raise ValueError("batch has no negative for the anchor")
    return torch.logsumexp(torch.stack(allv), 0) - torch.logsumexp(torch.stack(pos), 0)


def discrimination_from_tensor(z: torch.Tensor, groups, tau: float) -> torch.Tensor:
    """Vectorized discrimination loss.

    ``z`` is ``(n, d)`` with unit rows, ``groups`` assigns each row to a subject.
    Every row serves as an anchor; anchor losses are averaged within each
    subject, then over subjects.
    """
    groups = torch.as_tensor(np.asarray(groups))
    n = z.shape[0]
    eye = torch.eye(n, dtype=torch.bool)
    same = (groups[:, None] == groups[None, :]) & ~eye
    if not bool(same.any(1).all()):
        raise ValueError("every subject needs at least 2 views")
    if bool((same | eye).all()):
        raise ValueError("need at least 2 subjects")
    s = z @ z.T / tau
    neg_inf = torch.tensor(-math.inf, dtype=s.dtype)
    log_den = torch.logsumexp(torch.where(eye, neg_inf, s), dim=1)
    log_num = torch.logsumexp(torch.where(same, s, neg_inf), dim=1)
    per_anchor = log_den - log_num
    uniq, inv = torch.unique(groups, return_inverse=True)
    sums = torch.zeros(len(uniq), dtype=s.dtype).index_add(0, inv, per_anchor)
    counts = torch.zeros(len(uniq), dtype=s.dtype).index_add(0, inv, torch.ones_like(per_anchor))
    return (sums / counts).mean()


def discrimination_loss(batch: Sequence[tuple[str, object]], tau: float) -> torch.Tensor:
    ids = [sid for sid, _ in batch]
    codes = {sid: i for i, sid in enumerate(dict.fromkeys(ids))}
    if len(codes) < 2:
        raise ValueError("need at least 2 subjects")
    z = torch.stack([_flat(e) for _, e in batch])
    return discrimination_from_tensor(z, [codes[s] for s in ids], tau)


def total_loss(recon, disc, lam: float):
    if lam < 0:
        raise ValueError(f"lambda must be >= 0, got {lam}")
    if lam == 0:
        return recon
    return recon + lam * disc
