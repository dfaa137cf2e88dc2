"""Position-free Transformer encoder over ROI rows, with pretext and downstream heads.

Each ROI row of a feature map is one attention token. No positional signal
is injected anywhere, so the per-ROI outputs are permutation equivariant in
the ROI order.

Layout of the trainable parameters (``d`` = d_model = number of features,
``e`` = d_embed, ``h`` = d_recon_hidden)::

    per block      q, k, v, o projections     4 * (d*d + d)
                   add & norm                 2 * d
                   feed-forward d -> d -> d   2 * (d*d + d)
                   add & norm                 2 * d
    post-block     d -> d projection + norm   d*d + d + 2*d
    embedding      d -> e                     d*e + e
    reconstruction e -> h -> d                e*h + h + h*d + d

giving ``n_blocks * (6*d*d + 10*d) + d*d + 3*d + d*e + e + e*h + h + h*d + d``
in total; 205108 for the default (3 blocks, d=100, e=8, h=100). The count
does not depend on the number of heads.
"""

from __future__ import annotations

import math
import os
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

DTYPE = torch.float64
CHECKPOINT_MAGIC = "radssl-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class EncoderConfig:
    n_blocks: int = 3
    # 8 heads cannot split 100 columns evenly; 10 is the nearest divisor of the default width
    n_heads: int = 10
    d_model: int = 100
    d_embed: int = 8
    d_recon_hidden: int = 100
    use_position_encoding: bool = False

    def __post_init__(self):
        for f in ("n_blocks", "n_heads", "d_model", "d_embed", "d_recon_hidden"):
            if int(getattr(self, f)) < 1:
                raise ValueError(f"{f} must be >= 1, got {getattr(self, f)}")
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        if self.use_position_encoding:
            raise ValueError("positional encodings are not supported")


def parameter_count(cfg: EncoderConfig) -> int:
    d, e, h = cfg.d_model, cfg.d_embed, cfg.d_recon_hidden
    per_block = 6 * d * d + 10 * d
    post = d * d + 3 * d
    embed = d * e + e
    recon = e * h + h + h * d + d
    return cfg.n_blocks * per_block + post + embed + recon


class SelfAttention(nn.Module):
    def __init__(self, d_model: int, n_heads: int):
        super().__init__()
        self.n_heads = n_heads
        self.q = nn.Linear(d_model, d_model, dtype=DTYPE)
        self.k = nn.Linear(d_model, d_model, dtype=DTYPE)
        self.v = nn.Linear(d_model, d_model, dtype=DTYPE)
        self.o = nn.Linear(d_model, d_model, dtype=DTYPE)

    def _split(self, t):
        *lead, n, d = t.shape
        return t.reshape(*lead, n, self.n_heads, d // self.n_heads).transpose(-2, -3)

    def forward(self, x):
        q, k, v = self._split(self.q(x)), self._split(self.k(x)), self._split(self.v(x))
        scores = q @ k.transpose(-1, -2) / math.sqrt(q.shape[-1])
        out = torch.softmax(scores, dim=-1) @ v
        out = out.transpose(-2, -3).reshape(x.shape)
        return self.o(out)


class Block(nn.Module):
    """Post-norm Transformer block: ``norm(x + attn(x))`` then ``norm(x + ff(x))``."""

    def __init__(self, d_model: int, n_heads: int):
        super().__init__()
        self.attn = SelfAttention(d_model, n_heads)
        self.norm1 = nn.LayerNorm(d_model, dtype=DTYPE)
        self.ff1 = nn.Linear(d_model, d_model, dtype=DTYPE)
        self.ff2 = nn.Linear(d_model, d_model, dtype=DTYPE)
        self.norm2 = nn.LayerNorm(d_model, dtype=DTYPE)

    def forward(self, x):
        x = self.norm1(x + self.attn(x))
        return self.norm2(x + self.ff2(F.gelu(self.ff1(x))))


class RadiomicEncoder(nn.Module):
    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.config = cfg
        d = cfg.d_model
        self.blocks = nn.ModuleList(Block(d, cfg.n_heads) for _ in range(cfg.n_blocks))
        self.post = nn.Linear(d, d, dtype=DTYPE)
        self.post_norm = nn.LayerNorm(d, dtype=DTYPE)
        self.embed = nn.Linear(d, cfg.d_embed, dtype=DTYPE)
        self.recon_hidden = nn.Linear(cfg.d_embed, cfg.d_recon_hidden, dtype=DTYPE)
        self.recon_out = nn.Linear(cfg.d_recon_hidden, d, dtype=DTYPE)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """``(..., n_roi, d_model)`` -> per-ROI embeddings ``(..., n_roi, d_embed)``."""
        if x.shape[-1] != self.config.d_model:
            raise ValueError(f"input has {x.shape[-1]} feature columns, encoder expects {self.config.d_model}")
        for i, block in enumerate(self.blocks):
            x = block(x)
            _check_finite(x, f"block {i}")
        a = self.post_norm(x + F.gelu(self.post(x)))
        z = self.embed(a)
        _check_finite(z, "embedding head")
        return z

    def reconstruct(self, z: torch.Tensor) -> torch.Tensor:
        if z.shape[-1] != self.config.d_embed:
            raise ValueError(f"embedding width {z.shape[-1]} does not match d_embed={self.config.d_embed}")
        return self.recon_out(F.gelu(self.recon_hidden(z)))

    def flat_parameters(self) -> torch.Tensor:
        return nn.utils.parameters_to_vector(self.parameters()).detach().clone()

    def load_flat_parameters(self, vec) -> None:
        vec = torch.as_tensor(np.asarray(vec), dtype=DTYPE)
        n = sum(p.numel() for p in self.parameters())
        if vec.numel() != n:
            raise ValueError(f"expected {n} parameters, got {vec.numel()}")
        nn.utils.vector_to_parameters(vec, self.parameters())

    def layout(self) -> list[tuple[str, tuple[int, ...]]]:
        return [(name, tuple(p.shape)) for name, p in self.named_parameters()]


# EncoderState in the data model: config plus a flat parameter vector
EncoderState = RadiomicEncoder


def _check_finite(t: torch.Tensor, where: str) -> None:
    if not torch.isfinite(t).all():
        raise FloatingPointError(f"non-finite activation after {where}")


def _init_module(module: nn.Module, gen: torch.Generator) -> None:
    with torch.no_grad():
        for m in module.modules():
            if isinstance(m, nn.Linear):
                bound = 1.0 / math.sqrt(m.in_features)
                m.weight.uniform_(-bound, bound, generator=gen)
                m.bias.uniform_(-bound, bound, generator=gen)
            elif isinstance(m, nn.LayerNorm):
                m.weight.fill_(1.0)
                m.bias.zero_()


def init_encoder(cfg: EncoderConfig, seed: int = 0) -> RadiomicEncoder:
    enc = RadiomicEncoder(cfg)
    gen = torch.Generator().manual_seed(int(seed))
    _init_module(enc, gen)
    return enc


@dataclass
class ViewEmbedding:
    per_roi: torch.Tensor
    flat_normalized: torch.Tensor

    @classmethod
    def from_per_roi(cls, per_roi: torch.Tensor) -> "ViewEmbedding":
        return cls(per_roi, normalize_flat(per_roi))


def normalize_flat(per_roi: torch.Tensor) -> torch.Tensor:
    """L2-normalize the flattened ``(..., n_roi, d_embed)`` embeddings."""
    flat = per_roi.reshape(*per_roi.shape[:-2], -1)
    return flat / flat.norm(dim=-1, keepdim=True).clamp_min(1e-12)


def as_input(view) -> torch.Tensor:
    values = view if isinstance(view, torch.Tensor) else getattr(view, "values", view)
    if isinstance(values, torch.Tensor):
        return values.to(DTYPE)
    return torch.as_tensor(np.asarray(values, dtype=np.float64))


def encode(enc: RadiomicEncoder, view) -> ViewEmbedding:
    """Embed one masked view or feature map."""
    return ViewEmbedding.from_per_roi(enc(as_input(view)))


def reconstruct(enc: RadiomicEncoder, emb: ViewEmbedding | torch.Tensor) -> torch.Tensor:
    z = emb.per_roi if isinstance(emb, ViewEmbedding) else emb
    return enc.reconstruct(z)


# -- downstream --------------------------------------------------------------

TASKS = ("classification", "regression")


class DownstreamModel(nn.Module):
    """Pretrained encoder + mean-pooled MLP head (100 hidden units by default)."""

    def __init__(self, encoder: RadiomicEncoder, task: str, hidden: int = 100):
        super().__init__()
        if task not in TASKS:
            raise ValueError(f"unknown task {task!r}; expected one of {TASKS}")
        self.task = task
        self.encoder = encoder
        self.hidden = nn.Linear(encoder.config.d_embed, hidden, dtype=DTYPE)
        self.out = nn.Linear(hidden, 2 if task == "classification" else 1, dtype=DTYPE)
        # regression targets are standardized during training
        self.target_shift = 0.0
        self.target_scale = 1.0

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        pooled = self.encoder(x).mean(dim=-2)
        out = self.out(F.gelu(self.hidden(pooled)))
        return out if self.task == "classification" else out.squeeze(-1)

    def predict(self, x) -> np.ndarray:
        """Class-1 probability (classification) or predicted score (regression)."""
        with torch.no_grad():
            out = self(as_input(x))
            if self.task == "classification":
                return torch.softmax(out, dim=-1)[..., 1].numpy()
            return out.numpy() * self.target_scale + self.target_shift


ModelState = DownstreamModel


def attach_downstream_head(enc: RadiomicEncoder, task: str, seed: int = 0, hidden: int = 100) -> DownstreamModel:
    model = DownstreamModel(enc, task, hidden)
    gen = torch.Generator().manual_seed(int(seed))
    _init_module(model.hidden, gen)
    _init_module(model.out, gen)
    return model


# -- checkpoints --------------------------------------------------------------


def save_checkpoint(enc: RadiomicEncoder, path: str | os.PathLike) -> None:
    """Versioned text checkpoint: ``key=value`` config header, then one parameter per line."""
    vec = enc.flat_parameters().numpy()
    lines = [f"{CHECKPOINT_MAGIC} v{CHECKPOINT_VERSION}"]
    lines += [f"{k}={v}" for k, v in asdict(enc.config).items()]
    lines.append(f"n_parameters={vec.size}")
    lines.append("---")
    lines += [repr(float(v)) for v in vec]
    Path(path).write_text("\n".join(lines) + "\n")


def load_checkpoint(path: str | os.PathLike) -> RadiomicEncoder:
    text = Path(path).read_text().splitlines()
    if not text or not text[0].startswith(CHECKPOINT_MAGIC):
        raise ValueError(f"{path}: not a radssl checkpoint")
    version = int(text[0].split("v")[-1])
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    sep = text.index("---")
    header = dict(line.split("=", 1) for line in text[1:sep])
    kinds = {f.name: f.type for f in fields(EncoderConfig)}
    kwargs = {}
    for k, v in header.items():
        if k not in kinds:
            continue
        kwargs[k] = v == "True" if k == "use_position_encoding" else int(v)
    enc = RadiomicEncoder(EncoderConfig(**kwargs))
    vec = np.array([float(v) for v in text[sep + 1:]], dtype=np.float64)
    if vec.size != int(header["n_parameters"]):
        raise ValueError(f"{path}: truncated parameter block")
    enc.load_flat_parameters(vec)
    return enc
