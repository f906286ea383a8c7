"""BSARec encoder: causal self-attention mixed with a learnable frequency rescaler."""

from __future__ import annotations

import json
import math
import os
import tempfile
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .signal import PAD_ID, PaddingMode, SpectralBackend, cutoff_range, default_wavelet_levels, low_pass_operator

CHECKPOINT_FORMAT = "bsarec-checkpoint"
CHECKPOINT_VERSION = 1
MASK_VALUE = -1e4


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    num_items: int
    max_len: int = 50
    hidden_size: int = 64
    num_layers: int = 2
    num_heads: int = 1
    alpha: float = 0.5
    cutoff: int = 3
    backend: SpectralBackend = SpectralBackend.FOURIER
    padding: PaddingMode = PaddingMode.ZERO
    dropout_rate: float = 0.5
    ffn_multiplier: int = 4
    wavelet_levels: int | None = None
    layer_norm_eps: float = 1e-12

    def __post_init__(self):
        self.backend = SpectralBackend.parse(self.backend)
        self.padding = PaddingMode.parse(self.padding)
        self.validate()

    def validate(self) -> None:
        if self.num_items < 1 or self.max_len < 1 or self.hidden_size < 1 or self.num_layers < 0:
            raise ConfigError(f"sizes must be positive: {self}")
        if self.num_heads < 1 or self.hidden_size % self.num_heads:
            raise ConfigError(f"hidden_size {self.hidden_size} not divisible by num_heads {self.num_heads}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError(f"alpha must lie in [0, 1], got {self.alpha}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError(f"dropout_rate must lie in [0, 1), got {self.dropout_rate}")
        low, high = cutoff_range(self.max_len, self.backend, self.resolved_wavelet_levels)
        if self.cutoff < low or (high is not None and self.cutoff > high):
            raise ConfigError(f"cutoff {self.cutoff} outside [{low}, {high}] for {self.backend}, max_len {self.max_len}")

    @property
    def resolved_wavelet_levels(self) -> int | None:
        if self.backend is not SpectralBackend.WAVELET:
            return None
        return self.wavelet_levels or default_wavelet_levels(self.max_len)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["backend"] = self.backend.value
        d["padding"] = self.padding.value
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


class CausalSelfAttention(nn.Module):
    def __init__(self, hidden_size: int, num_heads: int, dropout: float):
        super().__init__()
        self.num_heads = num_heads
        self.head_size = hidden_size // num_heads
        self.query = nn.Linear(hidden_size, hidden_size)
        self.key = nn.Linear(hidden_size, hidden_size)
        self.value = nn.Linear(hidden_size, hidden_size)
        self.out = nn.Linear(hidden_size, hidden_size)
        self.attn_dropout = nn.Dropout(dropout)

    def _heads(self, x: torch.Tensor) -> torch.Tensor:
        b, t, _ = x.shape
        return x.view(b, t, self.num_heads, self.head_size).transpose(1, 2)

    def forward(self, x: torch.Tensor, key_mask: torch.Tensor | None = None, return_weights: bool = False):
        b, t, h = x.shape
        q, k, v = self._heads(self.query(x)), self._heads(self.key(x)), self._heads(self.value(x))
        scores = q @ k.transpose(-1, -2) / math.sqrt(self.head_size)
        allowed = torch.ones(t, t, dtype=torch.bool, device=x.device).tril()
        if key_mask is not None:
            allowed = allowed & key_mask[:, None, None, :]
        # additive mask keeps fully-masked rows finite (uniform weights)
        scores = scores.masked_fill(~allowed, MASK_VALUE)
        weights = torch.softmax(scores, dim=-1)
        ctx = self.attn_dropout(weights) @ v
        out = self.out(ctx.transpose(1, 2).reshape(b, t, h))
        return (out, weights) if return_weights else out


class FrequencyRescaler(nn.Module):
    """Per-channel ``LFC + beta * HFC`` along the temporal axis, then layer norm."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        op = low_pass_operator(config.max_len, config.cutoff, config.backend, config.resolved_wavelet_levels)
        # kept in float64 and cast per call so float64 gradient checks stay exact
        self.low_pass = torch.tensor(np.array(op), dtype=torch.float64)
        self.beta = nn.Parameter(torch.ones(config.hidden_size))
        self.norm = nn.LayerNorm(config.hidden_size, eps=config.layer_norm_eps)

    def split(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        low = torch.einsum("ts,bsh->bth", self.low_pass.to(dtype=x.dtype, device=x.device), x)
        return low, x - low

    def rescale(self, x: torch.Tensor) -> torch.Tensor:
        low, high = self.split(x)
        return low + self.beta * high

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.norm(self.rescale(x))


class BSALayer(nn.Module):
    def __init__(self, config: ModelConfig, include_rescaler: bool = True):
        super().__init__()
        h = config.hidden_size
        self.alpha = config.alpha
        self.attention = CausalSelfAttention(h, config.num_heads, config.dropout_rate)
        self.rescaler = FrequencyRescaler(config) if include_rescaler else None
        self.mix_dropout = nn.Dropout(config.dropout_rate)
        self.mix_norm = nn.LayerNorm(h, eps=config.layer_norm_eps)
        self.ffn_in = nn.Linear(h, h * config.ffn_multiplier)
        self.ffn_out = nn.Linear(h * config.ffn_multiplier, h)
        self.ffn_dropout = nn.Dropout(config.dropout_rate)
        self.ffn_norm = nn.LayerNorm(h, eps=config.layer_norm_eps)

    def mix(self, x: torch.Tensor, key_mask: torch.Tensor | None = None) -> torch.Tensor:
        attn = self.attention(x, key_mask)
        if self.rescaler is None:
            return attn
        return (1.0 - self.alpha) * attn + self.alpha * self.rescaler(x)

    def forward(self, x: torch.Tensor, key_mask: torch.Tensor | None = None) -> torch.Tensor:
        hidden = self.mix_norm(x + self.mix_dropout(self.mix(x, key_mask)))
        ffn = self.ffn_out(F.gelu(self.ffn_in(hidden)))
        return self.ffn_norm(hidden + self.ffn_dropout(ffn))


class BSARec(nn.Module):
    def __init__(self, config: ModelConfig, include_rescaler: bool = True):
        super().__init__()
        self.config = config
        h = config.hidden_size
        self.item_embeddings = nn.Embedding(config.num_items + 1, h)
        self.position_embeddings = nn.Embedding(config.max_len, h)
        self.embed_norm = nn.LayerNorm(h, eps=config.layer_norm_eps)
        self.embed_dropout = nn.Dropout(config.dropout_rate)
        self.layers = nn.ModuleList(BSALayer(config, include_rescaler) for _ in range(config.num_layers))
        self.apply(self._init_weights)

    @staticmethod
    def _init_weights(module: nn.Module) -> None:
        if isinstance(module, (nn.Linear, nn.Embedding)):
            module.weight.data.normal_(mean=0.0, std=0.02)
        if isinstance(module, nn.Linear) and module.bias is not None:
            module.bias.data.zero_()

    def embed(self, inputs: torch.Tensor) -> torch.Tensor:
        if inputs.shape[-1] != self.config.max_len:
            raise ValueError(f"window length {inputs.shape[-1]} != max_len {self.config.max_len}")
        if inputs.numel() and (int(inputs.min()) < 0 or int(inputs.max()) > self.config.num_items):
            raise IndexError(f"item id outside vocabulary 0..{self.config.num_items}")
        x = self.item_embeddings(inputs) + self.position_embeddings.weight
        return self.embed_dropout(self.embed_norm(x))

    def encode(self, inputs: torch.Tensor) -> torch.Tensor:
        """All per-position hidden states, shape ``(batch, max_len, hidden)``."""
        key_mask = inputs != PAD_ID
        x = self.embed(inputs)
        for layer in self.layers:
            x = layer(x, key_mask)
        return x

    def score(self, states: torch.Tensor) -> torch.Tensor:
        """Tied-embedding logits over ``0..num_items``; the pad column is ``-inf``."""
        logits = states @ self.item_embeddings.weight.T
        return logits.index_fill(-1, torch.tensor([PAD_ID], device=logits.device), float("-inf"))

    def forward(self, inputs: torch.Tensor) -> torch.Tensor:
        return self.score(self.encode(inputs))

    def rescaler_betas(self) -> list[nn.Parameter]:
        return [layer.rescaler.beta for layer in self.layers if layer.rescaler is not None]

    @torch.no_grad()
    def project_betas(self) -> None:
        for beta in self.rescaler_betas():
            beta.clamp_(min=0.0)


def sequence_loss(logits: torch.Tensor, targets: torch.Tensor, position_mask: torch.Tensor) -> torch.Tensor:
    """Mean full-softmax cross entropy over supervised positions."""
    supervised = position_mask & (targets != PAD_ID)
    if not bool(supervised.any()):
        raise ValueError("no supervised position in batch")
    return F.cross_entropy(logits[supervised], targets[supervised])


def batch_loss(model: BSARec, inputs: torch.Tensor, targets: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Like ``sequence_loss(model(inputs), ...)`` but scores only supervised positions."""
    supervised = mask & (targets != PAD_ID)
    if not bool(supervised.any()):
        raise ValueError("no supervised position in batch")
    states = model.encode(inputs)[supervised]
    return F.cross_entropy(model.score(states), targets[supervised])


# ---------------------------------------------------------------------------
# Checkpoints


def save_checkpoint(model: BSARec, path, extra: dict | None = None) -> None:
    """Write config and parameters to an ``.npz`` container (atomic replace)."""
    path = Path(path)
    meta = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": model.config.to_dict(),
        "extra": extra or {},
    }
    arrays = {name: t.detach().cpu().numpy() for name, t in model.state_dict().items()}
    arrays["__meta__"] = np.frombuffer(json.dumps(meta).encode("utf-8"), dtype=np.uint8)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".npz")
    os.close(fd)
    try:
        np.savez(tmp, **arrays)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise


def load_checkpoint(path) -> tuple[BSARec, dict]:
    with np.load(Path(path), allow_pickle=False) as data:
        meta = json.loads(bytes(data["__meta__"]).decode("utf-8"))
        if meta.get("format") != CHECKPOINT_FORMAT or meta.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint format {meta.get('format')} v{meta.get('version')}")
        model = BSARec(ModelConfig.from_dict(meta["config"]))
        expected = model.state_dict()
        stored = {k: data[k] for k in data.files if k != "__meta__"}
    if set(stored) != set(expected):
        missing = sorted(set(expected) - set(stored))
        unexpected = sorted(set(stored) - set(expected))
        raise ValueError(f"{path}: parameter mismatch, missing={missing} unexpected={unexpected}")
    for name, arr in stored.items():
        if tuple(arr.shape) != tuple(expected[name].shape):
            raise ValueError(f"{path}: {name} has shape {arr.shape}, config implies {tuple(expected[name].shape)}")
    model.load_state_dict({k: torch.from_numpy(np.array(v)) for k, v in stored.items()})
    model.eval()
    return model, meta.get("extra", {})
