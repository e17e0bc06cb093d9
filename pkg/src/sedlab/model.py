"""CRNN with GLU conv blocks, BiGRU and attention pooling; Adam; checkpoints.

Parameters live in plain ``dict[str, Tensor]`` so student and teacher are two
dictionaries evaluated through one module skeleton. Gradients come from
``torch.autograd``.
"""
from __future__ import annotations

import json
import math
import struct
from collections import OrderedDict
from dataclasses import asdict, dataclass
from functools import lru_cache
from pathlib import Path
from typing import Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from torch.func import functional_call

ParameterSet = dict[str, torch.Tensor]

FULL_FILTERS = (16, 32, 64, 128, 128, 128, 128)
FULL_POOLING = ((2, 2), (2, 2), (1, 2), (1, 2), (1, 2), (1, 2), (1, 2))


@dataclass(frozen=True)
class ModelConfig:
    conv_filters: tuple[int, ...] = FULL_FILTERS
    pooling: tuple[tuple[int, int], ...] = FULL_POOLING  # (time, freq) per block
    kernel_size: int = 3
    rnn_hidden: int = 128
    rnn_layers: int = 2
    n_classes: int = 10
    n_mels: int = 128
    dropout: float = 0.5

    def __post_init__(self):
        object.__setattr__(self, "conv_filters", tuple(int(k) for k in self.conv_filters))
        object.__setattr__(self, "pooling", tuple((int(a), int(b)) for a, b in self.pooling))
        if len(self.pooling) != len(self.conv_filters):
            raise ValueError("pooling list length must equal conv_filters length")
        dims = (*self.conv_filters, self.kernel_size, self.rnn_hidden, self.rnn_layers, self.n_classes, self.n_mels)
        if min(dims) < 1 or min(min(p) for p in self.pooling) < 1:
            raise ValueError("all model dimensions must be >= 1")
        if self.final_freq_bins < 1:
            raise ValueError("frequency pooling collapses the mel axis below one bin")
        if not 0 <= self.dropout < 1:
            raise ValueError("dropout must lie in [0, 1)")

    @classmethod
    def desk(cls, n_classes: int = 10) -> "ModelConfig":
        """Reduced profile: 4 GLU blocks, 32 GRU units; mel axis still collapses to one bin."""
        return cls(
            conv_filters=(8, 16, 32, 32),
            pooling=((2, 4), (2, 4), (1, 4), (1, 2)),
            rnn_hidden=32,
            n_classes=n_classes,
            dropout=0.2,
        )

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["conv_filters"] = list(self.conv_filters)
        d["pooling"] = [list(p) for p in self.pooling]
        return d

    @property
    def final_freq_bins(self) -> int:
        f = self.n_mels
        for _, pf in self.pooling:
            f //= pf
        return f

    @property
    def time_pooling(self) -> int:
        return math.prod(pt for pt, _ in self.pooling)

    def output_frames(self, n_frames: int) -> int:
        for pt, _ in self.pooling:
            n_frames //= pt
        return n_frames


@dataclass
class Posteriorgram:
    strong: torch.Tensor  # (..., T', C)
    weak: torch.Tensor  # (..., C)

    def numpy(self) -> tuple[np.ndarray, np.ndarray]:
        return self.strong.detach().cpu().numpy(), self.weak.detach().cpu().numpy()


def dropout(x: torch.Tensor, p: float, training: bool, generator: Optional[torch.Generator]) -> torch.Tensor:
    if not training or p == 0:
        return x
    keep = torch.rand(x.shape, generator=generator, dtype=x.dtype) >= p
    return x * keep / (1.0 - p)


def glu_block(x: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor, pool: tuple[int, int]) -> torch.Tensor:
    """conv -> value * sigmoid(gate) -> max-pool; the conv emits value then gate channels."""
    y = F.conv2d(x, weight, bias, padding=weight.shape[-1] // 2)
    value, gate = y.chunk(2, dim=1)
    return F.max_pool2d(value * torch.sigmoid(gate), kernel_size=pool, stride=pool)


def attention_pool(strong: torch.Tensor, attention_logits: torch.Tensor) -> torch.Tensor:
    """Per-class softmax over time, weak = sum_t a[t, c] * strong[t, c]."""
    weights = torch.softmax(attention_logits, dim=-2)
    return (weights * strong).sum(dim=-2)


class CRNN(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        convs, c_in = [], 1
        for k in cfg.conv_filters:
            convs.append(nn.Conv2d(c_in, 2 * k, cfg.kernel_size, padding=cfg.kernel_size // 2))
            c_in = k
        self.convs = nn.ModuleList(convs)
        self.rnn = nn.GRU(
            c_in * cfg.final_freq_bins,
            cfg.rnn_hidden,
            num_layers=cfg.rnn_layers,
            batch_first=True,
            bidirectional=True,
        )
        self.strong_head = nn.Linear(2 * cfg.rnn_hidden, cfg.n_classes)
        self.attention_head = nn.Linear(2 * cfg.rnn_hidden, cfg.n_classes)

    def forward(self, x, training: bool = False, generator: Optional[torch.Generator] = None):
        cfg = self.cfg
        x = x.unsqueeze(1)
        for conv, pool in zip(self.convs, cfg.pooling):
            x = glu_block(x, conv.weight, conv.bias, pool)
            x = dropout(x, cfg.dropout, training, generator)
        b, c, t, f = x.shape
        x = x.permute(0, 2, 1, 3).reshape(b, t, c * f)
        x, _ = self.rnn(x)
        x = dropout(x, cfg.dropout, training, generator)
        strong = torch.sigmoid(self.strong_head(x))
        weak = attention_pool(strong, self.attention_head(x))
        return strong, weak


@lru_cache(maxsize=16)
def _skeleton(cfg: ModelConfig) -> CRNN:
    return CRNN(cfg)


def _fan_in(name: str, shape: torch.Size) -> int:
    if len(shape) == 4:
        return shape[1] * shape[2] * shape[3]
    return shape[1]


def init_params(cfg: ModelConfig, seed: int, dtype: torch.dtype = torch.float32) -> ParameterSet:
    """Uniform(-sqrt(6 / fan_in), +sqrt(6 / fan_in)) weights, zero biases."""
    gen = torch.Generator().manual_seed(int(seed))
    params = OrderedDict()
    for name, p in _skeleton(cfg).named_parameters():
        if "bias" in name:
            t = torch.zeros(p.shape, dtype=dtype)
        else:
            bound = math.sqrt(6.0 / _fan_in(name, p.shape))
            t = (torch.rand(p.shape, generator=gen, dtype=torch.float64) * 2 - 1) * bound
            t = t.to(dtype)
        params[name] = t
    return params


def forward(features, params, cfg: ModelConfig, training: bool = False,
            generator: Optional[torch.Generator] = None) -> Posteriorgram:
    """Run the CRNN on ``(T, F)`` or ``(B, T, F)`` features."""
    x = torch.as_tensor(features)
    dtype = next(iter(params.values())).dtype
    x = x.to(dtype)
    if x.shape[-1] != cfg.n_mels:
        raise ValueError(f"expected {cfg.n_mels} mel bands, got {x.shape[-1]}")
    single = x.dim() == 2
    if single:
        x = x.unsqueeze(0)
    if x.dim() != 3:
        raise ValueError(f"features must be (T, F) or (B, T, F), got {tuple(x.shape)}")
    if cfg.output_frames(x.shape[1]) < 1:
        raise ValueError(f"{x.shape[1]} frames is too short for time pooling {cfg.time_pooling}")
    strong, weak = functional_call(_skeleton(cfg), params, (x,), {"training": training, "generator": generator})
    if single:
        strong, weak = strong[0], weak[0]
    return Posteriorgram(strong, weak)


def gradients(loss: torch.Tensor, params) -> ParameterSet:
    """Exact gradients of a scalar ``loss`` w.r.t. every tensor in ``params``."""
    grads = torch.autograd.grad(loss, list(params.values()), allow_unused=True)
    return OrderedDict(
        (name, torch.zeros_like(p) if g is None else g) for (name, p), g in zip(params.items(), grads)
    )


def detach_params(params, requires_grad: bool = False):
    return OrderedDict((k, v.detach().clone().requires_grad_(requires_grad)) for k, v in params.items())


# -- Adam ---------------------------------------------------------------------

@dataclass
class AdamState:
    m: ParameterSet
    v: ParameterSet
    step: int = 0

    @classmethod
    def zeros_like(cls, params) -> "AdamState":
        return cls(
            OrderedDict((k, torch.zeros_like(p, requires_grad=False)) for k, p in params.items()),
            OrderedDict((k, torch.zeros_like(p, requires_grad=False)) for k, p in params.items()),
        )


def adam_step(params, grads, state: AdamState, lr: float, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8):
    """One bias-corrected Adam update; returns new ``(params, state)``."""
    if set(grads) != set(state.m):
        raise KeyError("gradient keys do not match optimizer state")
    t = state.step + 1
    new_params, new_m, new_v = OrderedDict(), OrderedDict(), OrderedDict()
    with torch.no_grad():
        for name, p in params.items():
            g = grads[name].detach()
            m = beta1 * state.m[name] + (1 - beta1) * g
            v = beta2 * state.v[name] + (1 - beta2) * g * g
            m_hat = m / (1 - beta1**t)
            v_hat = v / (1 - beta2**t)
            new_params[name] = (p.detach() - lr * m_hat / (v_hat.sqrt() + eps)).requires_grad_(p.requires_grad)
            new_m[name], new_v[name] = m, v
    return new_params, AdamState(new_m, new_v, t)


# -- checkpoints ----------------------------------------------------------------
# layout: magic, u32 version, u32 meta length, meta JSON, u32 tensor count, then per
# tensor: u16 name length, name, u8 dtype code, u8 ndim, u32 dims, little-endian data

CHECKPOINT_MAGIC = b"SEDLCKPT"
CHECKPOINT_VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_TORCH_TO_CODE = {torch.float32: 0, torch.float64: 1}


def save_checkpoint(path: str | Path, params, meta: Optional[dict] = None) -> None:
    meta_bytes = json.dumps(meta or {}, sort_keys=True).encode()
    chunks = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(meta_bytes)), meta_bytes,
              struct.pack("<I", len(params))]
    for name, tensor in params.items():
        code = _TORCH_TO_CODE[tensor.dtype] if isinstance(tensor, torch.Tensor) else {
            np.dtype("float32"): 0, np.dtype("float64"): 1}[np.asarray(tensor).dtype]
        arr = np.ascontiguousarray(
            tensor.detach().cpu().numpy() if isinstance(tensor, torch.Tensor) else tensor, dtype=_DTYPES[code]
        )
        name_b = name.encode()
        chunks.append(struct.pack("<H", len(name_b)) + name_b + struct.pack("<BB", code, arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path: str | Path) -> tuple[ParameterSet, dict]:
    raw = memoryview(Path(path).read_bytes())
    if bytes(raw[:8]) != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    version, meta_len = struct.unpack_from("<II", raw, 8)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    pos = 16
    meta = json.loads(bytes(raw[pos : pos + meta_len]))
    pos += meta_len
    (count,) = struct.unpack_from("<I", raw, pos)
    pos += 4
    params = OrderedDict()
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", raw, pos)
        pos += 2
        name = bytes(raw[pos : pos + name_len]).decode()
        pos += name_len
        code, ndim = struct.unpack_from("<BB", raw, pos)
        pos += 2
        shape = struct.unpack_from(f"<{ndim}I", raw, pos)
        pos += 4 * ndim
        dtype = _DTYPES[code]
        n_bytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        arr = np.frombuffer(raw[pos : pos + n_bytes], dtype=dtype).reshape(shape).copy()
        pos += n_bytes
        params[name] = torch.from_numpy(arr)
    return params, meta
