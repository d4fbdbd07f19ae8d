"""Encoder-decoder transformer with a CLS-based auxiliary category head.

The encoder reads a tokenized prompt that starts with ``[CLS]``; its final
row 0 feeds a linear + softmax POI-category classifier. The decoder is
autoregressive with causal self-attention and cross-attention over the
encoder states. Both stacks are pre-norm and share the token and learned
position embeddings.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import (
    CheckpointError,
    IdOutOfRangeError,
    SequenceTooLongError,
    ShapeMismatchError,
    VersionMismatchError,
)
from .tokenizer import BOS_ID, EOS_ID, PAD_ID, TokenSequence

CHECKPOINT_MAGIC = b"MOBL"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    num_categories: int
    d_model: int = 128
    num_heads: int = 4
    encoder_layers: int = 2
    decoder_layers: int = 2
    ffn_dim: Optional[int] = None  # None -> 4 * d_model
    max_len: int = 128
    dropout: float = 0.1
    tie_embeddings: bool = False

    def __post_init__(self):
        if self.ffn_dim is None:
            object.__setattr__(self, "ffn_dim", 4 * self.d_model)
        for name in ("vocab_size", "num_categories", "d_model", "num_heads",
                     "encoder_layers", "decoder_layers", "ffn_dim", "max_len"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.d_model % self.num_heads:
            raise ValueError("num_heads must divide d_model")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class EncoderOutput:
    hidden: torch.Tensor          # (batch, seq, d_model)
    pad_mask: torch.Tensor        # (batch, seq), True where real token
    attention: list = field(default_factory=list)

    @property
    def cls_embedding(self) -> torch.Tensor:
        return self.hidden[:, 0]


class MultiHeadAttention(nn.Module):
    def __init__(self, d_model: int, num_heads: int):
        super().__init__()
        self.num_heads = num_heads
        self.head_dim = d_model // num_heads
        self.q_proj = nn.Linear(d_model, d_model)
        self.k_proj = nn.Linear(d_model, d_model)
        self.v_proj = nn.Linear(d_model, d_model)
        self.out_proj = nn.Linear(d_model, d_model)

    def _heads(self, x):
        b, t, _ = x.shape
        return x.view(b, t, self.num_heads, self.head_dim).transpose(1, 2)

    def forward(self, x, memory=None, allowed=None):
        """``allowed`` broadcasts to (batch, heads, q_len, k_len); True keeps a key."""
        memory = x if memory is None else memory
        q = self._heads(self.q_proj(x))
        k = self._heads(self.k_proj(memory))
        v = self._heads(self.v_proj(memory))
        scores = q @ k.transpose(-2, -1) / math.sqrt(self.head_dim)
        if allowed is not None:
            scores = scores.masked_fill(~allowed, float("-inf"))
        weights = torch.softmax(scores, dim=-1)
        ctx = (weights @ v).transpose(1, 2).reshape(x.shape)
        return self.out_proj(ctx), weights


class FeedForward(nn.Module):
    def __init__(self, d_model: int, ffn_dim: int):
        super().__init__()
        self.fc1 = nn.Linear(d_model, ffn_dim)
        self.fc2 = nn.Linear(ffn_dim, d_model)

    def forward(self, x):
        return self.fc2(F.gelu(self.fc1(x)))


class EncoderLayer(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.norm1 = nn.LayerNorm(cfg.d_model)
        self.self_attn = MultiHeadAttention(cfg.d_model, cfg.num_heads)
        self.norm2 = nn.LayerNorm(cfg.d_model)
        self.ffn = FeedForward(cfg.d_model, cfg.ffn_dim)
        self.dropout = nn.Dropout(cfg.dropout)

    def forward(self, x, allowed):
        a, w = self.self_attn(self.norm1(x), allowed=allowed)
        x = x + self.dropout(a)
        x = x + self.dropout(self.ffn(self.norm2(x)))
        return x, w


class DecoderLayer(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.norm1 = nn.LayerNorm(cfg.d_model)
        self.self_attn = MultiHeadAttention(cfg.d_model, cfg.num_heads)
        self.norm2 = nn.LayerNorm(cfg.d_model)
        self.cross_attn = MultiHeadAttention(cfg.d_model, cfg.num_heads)
        self.norm3 = nn.LayerNorm(cfg.d_model)
        self.ffn = FeedForward(cfg.d_model, cfg.ffn_dim)
        self.dropout = nn.Dropout(cfg.dropout)

    def forward(self, y, memory, self_allowed, cross_allowed):
        a, w_self = self.self_attn(self.norm1(y), allowed=self_allowed)
        y = y + self.dropout(a)
        c, w_cross = self.cross_attn(self.norm2(y), memory=memory, allowed=cross_allowed)
        y = y + self.dropout(c)
        y = y + self.dropout(self.ffn(self.norm3(y)))
        return y, (w_self, w_cross)


class MobilityModel(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        d = config.d_model
        self.token_embedding = nn.Embedding(config.vocab_size, d)
        self.position_embedding = nn.Embedding(config.max_len, d)
        self.embed_dropout = nn.Dropout(config.dropout)
        self.encoder_layers = nn.ModuleList(EncoderLayer(config) for _ in range(config.encoder_layers))
        self.encoder_norm = nn.LayerNorm(d)
        self.decoder_layers = nn.ModuleList(DecoderLayer(config) for _ in range(config.decoder_layers))
        self.decoder_norm = nn.LayerNorm(d)
        self.output_projection = nn.Linear(d, config.vocab_size)
        if config.tie_embeddings:
            self.output_projection.weight = self.token_embedding.weight
        self.category_head = nn.Linear(d, config.num_categories)

    # -- helpers -------------------------------------------------------------

    def _embed(self, ids: torch.Tensor) -> torch.Tensor:
        if ids.shape[1] > self.config.max_len:
            raise SequenceTooLongError(f"{ids.shape[1]} tokens exceed max_len {self.config.max_len}")
        if ids.numel() and (int(ids.min()) < 0 or int(ids.max()) >= self.config.vocab_size):
            raise IdOutOfRangeError("token id outside vocabulary")
        pos = torch.arange(ids.shape[1], device=ids.device)
        return self.embed_dropout(self.token_embedding(ids) + self.position_embedding(pos))

    # -- forward pieces ------------------------------------------------------

    def encode(self, input_ids: torch.Tensor, keep_attention: bool = False) -> EncoderOutput:
        if input_ids.dim() == 1:
            input_ids = input_ids.unsqueeze(0)
        if input_ids.shape[1] == 0:
            raise ValueError("encoder input must contain at least the CLS token")
        pad_mask = input_ids != PAD_ID
        allowed = pad_mask[:, None, None, :]
        x = self._embed(input_ids)
        attention = []
        for layer in self.encoder_layers:
            x, w = layer(x, allowed)
            if keep_attention:
                attention.append(w.detach())
        return EncoderOutput(self.encoder_norm(x), pad_mask, attention)

    def classify_category(self, cls_embedding: torch.Tensor) -> torch.Tensor:
        return torch.softmax(self.category_logits(cls_embedding), dim=-1)

    def category_logits(self, cls_embedding: torch.Tensor) -> torch.Tensor:
        return self.category_head(cls_embedding)

    def decode_logits(
        self, target_in: torch.Tensor, enc: EncoderOutput, keep_attention: bool = False
    ) -> torch.Tensor:
        """Per-position vocabulary logits for a BOS-prefixed decoder input."""
        if target_in.dim() == 1:
            target_in = target_in.unsqueeze(0)
        t = target_in.shape[1]
        causal = torch.ones(t, t, dtype=torch.bool, device=target_in.device).tril()
        self_allowed = causal[None, None] & (target_in != PAD_ID)[:, None, None, :]
        cross_allowed = enc.pad_mask[:, None, None, :]
        y = self._embed(target_in)
        for layer in self.decoder_layers:
            y, w = layer(y, enc.hidden, self_allowed, cross_allowed)
            if keep_attention:
                enc.attention.extend(a.detach() for a in w)
        return self.output_projection(self.decoder_norm(y))

    def forward(self, input_ids, target_in):
        enc = self.encode(input_ids)
        return self.decode_logits(target_in, enc), self.category_logits(enc.cls_embedding)

    @torch.no_grad()
    def greedy_decode(self, enc: EncoderOutput, max_steps: int) -> list[TokenSequence]:
        """Argmax decoding from BOS; each sequence stops after emitting EOS.

        ``torch.argmax`` returns the first maximal index, so ties go to the
        smallest token id.
        """
        if max_steps < 1:
            raise ValueError("max_steps must be >= 1")
        batch = enc.hidden.shape[0]
        prefix = torch.full((batch, 1), BOS_ID, dtype=torch.long, device=enc.hidden.device)
        done = torch.zeros(batch, dtype=torch.bool, device=enc.hidden.device)
        for _ in range(min(max_steps, self.config.max_len - 1)):
            logits = self.decode_logits(prefix, enc)[:, -1]
            nxt = logits.argmax(dim=-1)
            nxt = torch.where(done, torch.full_like(nxt, PAD_ID), nxt)
            prefix = torch.cat([prefix, nxt[:, None]], dim=1)
            done |= nxt == EOS_ID
            if bool(done.all()):
                break
        out = []
        for row in prefix[:, 1:].tolist():
            if EOS_ID in row:
                row = row[: row.index(EOS_ID) + 1]
            out.append(TokenSequence(tuple(row)))
        return out


# ---------------------------------------------------------------------------
# Construction

def init_params(config: ModelConfig, seed: int = 0, dtype=torch.float32) -> MobilityModel:
    """Build a model with zero-mean normal weights (std 1/sqrt(d_model)), zero biases
    and unit normalization gains. Deterministic per seed."""
    gen = torch.Generator().manual_seed(int(seed))
    model = MobilityModel(config).to(dtype)
    std = 1.0 / math.sqrt(config.d_model)
    with torch.no_grad():
        for name, p in model.named_parameters():
            if ".norm" in name or name.startswith(("encoder_norm", "decoder_norm")):
                p.fill_(1.0 if name.endswith("weight") else 0.0)
            elif name.endswith("bias"):
                p.zero_()
            else:
                p.copy_(torch.randn(p.shape, generator=gen, dtype=torch.float64).to(dtype) * std)
    return model


def parameter_count(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def parameter_checksum(model: nn.Module) -> str:
    import hashlib

    h = hashlib.sha256()
    for name, t in model.state_dict().items():
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# Checkpoints
#
# Layout (little-endian): magic "MOBL" | u32 version | u32 meta_len | meta (UTF-8
# JSON: {"config": ..., "extra": ...}) | u32 n_arrays | per array:
# u32 name_len | name | u32 rank | rank * u32 dims | float32 payload.

def save_checkpoint(model: MobilityModel, path: str | Path, extra: Optional[dict] = None) -> None:
    meta = json.dumps({"config": model.config.to_dict(), "extra": extra or {}}, sort_keys=True).encode()
    state = model.state_dict()
    chunks = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(meta)), meta,
              struct.pack("<I", len(state))]
    for name, tensor in state.items():
        arr = tensor.detach().cpu().numpy().astype("<f4", copy=False)
        raw = name.encode()
        chunks.append(struct.pack("<I", len(raw)) + raw)
        chunks.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        chunks.append(np.ascontiguousarray(arr).tobytes())
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(b"".join(chunks))
    tmp.replace(path)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError("checkpoint is truncated")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def load_checkpoint(
    path: str | Path, expect: Optional[ModelConfig] = None
) -> tuple[MobilityModel, ModelConfig, dict]:
    """Load ``(model, config, extra_metadata)``.

    With ``expect`` given, every array shape must agree with a model built
    from that config, otherwise :class:`ShapeMismatchError` is raised.
    """
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(str(exc)) from exc
    r = _Reader(data)
    if r.take(4) != CHECKPOINT_MAGIC:
        raise VersionMismatchError("not a MOBL checkpoint")
    version = r.u32()
    if version != CHECKPOINT_VERSION:
        raise VersionMismatchError(f"checkpoint version {version}, expected {CHECKPOINT_VERSION}")
    try:
        meta = json.loads(r.take(r.u32()).decode("utf-8"))
        config = ModelConfig(**meta["config"])
    except (ValueError, KeyError, TypeError) as exc:
        raise CheckpointError(f"bad metadata block: {exc}") from exc

    arrays = {}
    for _ in range(r.u32()):
        name = r.take(r.u32()).decode("utf-8")
        rank = r.u32()
        dims = struct.unpack(f"<{rank}I", r.take(4 * rank))
        count = int(np.prod(dims)) if rank else 1
        arrays[name] = np.frombuffer(r.take(4 * count), dtype="<f4").reshape(dims)
    if r.pos != len(data):
        raise CheckpointError("trailing bytes after last array")

    target = expect or config
    model = MobilityModel(target)
    state = model.state_dict()
    if set(state) != set(arrays):
        raise ShapeMismatchError("array names differ from the expected model")
    for name, ref in state.items():
        if tuple(ref.shape) != arrays[name].shape:
            raise ShapeMismatchError(f"{name}: checkpoint {arrays[name].shape} vs expected {tuple(ref.shape)}")
    model.load_state_dict({k: torch.from_numpy(v.copy()) for k, v in arrays.items()})
    model.eval()
    return model, config, meta.get("extra", {})


def pad_batch(seqs: Sequence[Sequence[int]], pad: int = PAD_ID) -> torch.Tensor:
    width = max(len(s) for s in seqs)
    out = torch.full((len(seqs), width), pad, dtype=torch.long)
    for i, s in enumerate(seqs):
        out[i, : len(s)] = torch.as_tensor(list(s), dtype=torch.long)
    return out
