"""Small pre-norm transformer encoder-decoder over a shared vocabulary."""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path
from types import MappingProxyType
from typing import Mapping, Sequence

import numpy as np

from .autodiff import Tensor, get_dtype, softmax, take

PAD, BOS, EOS = 0, 1, 2

SNAPSHOT_MAGIC = b"LSSD"
SNAPSHOT_VERSION = 1

_NEG_INF = -1e9
_LN_EPS = 1e-5


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    embed_dim: int = 64
    hidden_dim: int = 128
    num_layers: int = 2
    num_heads: int = 4
    max_seq_len: int = 32
    dropout: float = 0.0

    def validate(self) -> None:
        for name in ("vocab_size", "embed_dim", "hidden_dim", "num_layers", "num_heads", "max_seq_len"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be positive")
        if self.vocab_size <= EOS:
            raise ValueError("vocab_size must leave room for pad/bos/eos")
        if self.embed_dim % self.num_heads:
            raise ValueError(f"embed_dim {self.embed_dim} not divisible by num_heads {self.num_heads}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")


def param_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Ordered parameter names and shapes; a pure function of the config."""
    d, h, v = config.embed_dim, config.hidden_dim, config.vocab_size
    shapes: dict[str, tuple[int, ...]] = {"embed.weight": (v, d)}

    def norm(prefix):
        shapes[f"{prefix}.scale"] = (d,)
        shapes[f"{prefix}.bias"] = (d,)

    def attn(prefix):
        for proj in "qkvo":
            shapes[f"{prefix}.{proj}.weight"] = (d, d)
            shapes[f"{prefix}.{proj}.bias"] = (d,)

    def ffn(prefix):
        shapes[f"{prefix}.fc1.weight"] = (d, h)
        shapes[f"{prefix}.fc1.bias"] = (h,)
        shapes[f"{prefix}.fc2.weight"] = (h, d)
        shapes[f"{prefix}.fc2.bias"] = (d,)

    for i in range(config.num_layers):
        norm(f"enc.{i}.ln1")
        attn(f"enc.{i}.self")
        norm(f"enc.{i}.ln2")
        ffn(f"enc.{i}.ffn")
    norm("enc.ln")
    for i in range(config.num_layers):
        norm(f"dec.{i}.ln1")
        attn(f"dec.{i}.self")
        norm(f"dec.{i}.ln2")
        attn(f"dec.{i}.cross")
        norm(f"dec.{i}.ln3")
        ffn(f"dec.{i}.ffn")
    norm("dec.ln")
    shapes["out.weight"] = (d, v)
    shapes["out.bias"] = (v,)
    return shapes


def positional_encoding(length: int, dim: int) -> np.ndarray:
    pos = np.arange(length)[:, None]
    rate = np.exp(-math.log(10000.0) * (np.arange(0, dim, 2) / dim))
    pe = np.zeros((length, dim))
    pe[:, 0::2] = np.sin(pos * rate)
    pe[:, 1::2] = np.cos(pos * rate[: dim // 2])
    return pe


@dataclass(frozen=True)
class Snapshot:
    """Immutable copy of model parameters taken at the end of an epoch."""

    params: Mapping[str, np.ndarray]
    epoch: int
    dev_loss: float

    def __post_init__(self):
        frozen = {}
        for name, arr in self.params.items():
            arr = np.array(arr, dtype=np.float32, copy=True)
            arr.setflags(write=False)
            frozen[name] = arr
        object.__setattr__(self, "params", MappingProxyType(frozen))


class Seq2SeqModel:
    def __init__(self, config: ModelConfig, params: dict[str, Tensor], seed: int = 0):
        self.config = config
        self.params = params
        self.dropout_rng = np.random.default_rng(seed)

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def clone(self) -> "Seq2SeqModel":
        params = {k: Tensor(t.data.copy(), requires_grad=t.requires_grad, dtype=t.data.dtype)
                  for k, t in self.params.items()}
        return Seq2SeqModel(self.config, params)

    @classmethod
    def from_snapshot(cls, config: ModelConfig, snap: Snapshot) -> "Seq2SeqModel":
        model = cls(config, {name: Tensor(np.zeros(shape), dtype=np.float32)
                             for name, shape in param_shapes(config).items()})
        restore(model, snap)
        return model

    # ---- building blocks -----------------------------------------------
    def _p(self, name: str) -> Tensor:
        return self.params[name]

    def _linear(self, x: Tensor, prefix: str) -> Tensor:
        w = self._p(f"{prefix}.weight")
        lead = x.shape[:-1]
        y = x.reshape(-1, x.shape[-1]) @ w + self._p(f"{prefix}.bias")
        return y.reshape(*lead, w.shape[1])

    def _norm(self, x: Tensor, prefix: str) -> Tensor:
        centered = x - x.mean(axis=-1, keepdims=True)
        var = (centered * centered).mean(axis=-1, keepdims=True)
        return centered / (var + _LN_EPS).sqrt() * self._p(f"{prefix}.scale") + self._p(f"{prefix}.bias")

    def _dropout(self, x: Tensor, train: bool) -> Tensor:
        p = self.config.dropout
        if not train or p == 0.0:
            return x
        keep = (self.dropout_rng.random(x.shape) >= p) / (1.0 - p)
        return x * keep

    def _attention(self, prefix: str, xq: Tensor, xkv: Tensor, mask: Tensor, train: bool) -> Tensor:
        b, tq, d = xq.shape
        tk = xkv.shape[1]
        h = self.config.num_heads
        dh = d // h
        q = self._linear(xq, f"{prefix}.q").reshape(b, tq, h, dh).transpose(0, 2, 1, 3)
        k = self._linear(xkv, f"{prefix}.k").reshape(b, tk, h, dh).transpose(0, 2, 3, 1)
        v = self._linear(xkv, f"{prefix}.v").reshape(b, tk, h, dh).transpose(0, 2, 1, 3)
        scores = (q @ k) * (1.0 / math.sqrt(dh)) + mask
        weights = self._dropout(softmax(scores, axis=-1), train)
        ctx = (weights @ v).transpose(0, 2, 1, 3).reshape(b, tq, d)
        return self._linear(ctx, f"{prefix}.o")

    def _ffn(self, x: Tensor, prefix: str, train: bool) -> Tensor:
        hidden = self._dropout(self._linear(x, f"{prefix}.fc1").relu(), train)
        return self._linear(hidden, f"{prefix}.fc2")

    def _embed(self, ids: np.ndarray, train: bool) -> Tensor:
        d = self.config.embed_dim
        pe = positional_encoding(ids.shape[1], d).astype(get_dtype())
        x = take(self._p("embed.weight"), ids) * math.sqrt(d) + pe
        return self._dropout(x, train)

    def _check_ids(self, ids: np.ndarray, what: str) -> None:
        if ids.ndim != 2:
            raise ValueError(f"{what} must be a B x L token matrix, got shape {ids.shape}")
        if ids.shape[1] > self.config.max_seq_len:
            raise ValueError(f"{what} length {ids.shape[1]} exceeds max_seq_len {self.config.max_seq_len}")
        if ids.size and (ids.min() < 0 or ids.max() >= self.config.vocab_size):
            raise ValueError(f"{what} contains token ids outside [0, {self.config.vocab_size})")

    # ---- forward -------------------------------------------------------
    def encode(self, src: np.ndarray, train: bool = False) -> tuple[Tensor, np.ndarray]:
        src_pad = src == PAD
        mask = Tensor(np.where(src_pad, _NEG_INF, 0.0)[:, None, None, :])
        x = self._embed(src, train)
        for i in range(self.config.num_layers):
            p = f"enc.{i}"
            h = self._norm(x, f"{p}.ln1")
            x = x + self._dropout(self._attention(f"{p}.self", h, h, mask, train), train)
            x = x + self._dropout(self._ffn(self._norm(x, f"{p}.ln2"), f"{p}.ffn", train), train)
        return self._norm(x, "enc.ln"), src_pad

    def decode(self, memory: Tensor, src_pad: np.ndarray, dec_in: np.ndarray, train: bool = False) -> Tensor:
        t = dec_in.shape[1]
        causal = np.triu(np.ones((t, t), dtype=bool), k=1)
        self_block = causal[None, None] | (dec_in == PAD)[:, None, None, :]
        self_mask = Tensor(np.where(self_block, _NEG_INF, 0.0))
        cross_mask = Tensor(np.where(src_pad, _NEG_INF, 0.0)[:, None, None, :])
        y = self._embed(dec_in, train)
        for i in range(self.config.num_layers):
            p = f"dec.{i}"
            h = self._norm(y, f"{p}.ln1")
            y = y + self._dropout(self._attention(f"{p}.self", h, h, self_mask, train), train)
            h = self._norm(y, f"{p}.ln2")
            y = y + self._dropout(self._attention(f"{p}.cross", h, memory, cross_mask, train), train)
            y = y + self._dropout(self._ffn(self._norm(y, f"{p}.ln3"), f"{p}.ffn", train), train)
        logits = self._linear(self._norm(y, "dec.ln"), "out")
        return softmax(logits, axis=-1)

    def forward(self, src, tgt, train_mode: bool = False) -> Tensor:
        """Per-position output distributions, shape B x T x |V|.

        The decoder reads ``tgt`` shifted right behind a BOS token, so the
        distribution at position i never depends on ``tgt[:, i:]``.
        """
        src = np.asarray(src, dtype=np.int64)
        tgt = np.asarray(tgt, dtype=np.int64)
        self._check_ids(src, "source")
        self._check_ids(tgt, "target")
        if src.shape[0] != tgt.shape[0]:
            raise ValueError(f"batch mismatch: source {src.shape} vs target {tgt.shape}")
        dec_in = np.concatenate([np.full((tgt.shape[0], 1), BOS, dtype=np.int64), tgt[:, :-1]], axis=1)
        memory, src_pad = self.encode(src, train_mode)
        return self.decode(memory, src_pad, dec_in, train_mode)

    __call__ = forward


def init_model(config: ModelConfig, seed: int) -> Seq2SeqModel:
    """Glorot-uniform weights, zero biases and norm offsets, unit norm scales."""
    config.validate()
    rng = np.random.default_rng(seed)
    params: dict[str, Tensor] = {}
    for name, shape in param_shapes(config).items():
        if name.endswith(".scale"):
            value = np.ones(shape)
        elif len(shape) == 1:
            value = np.zeros(shape)
        else:
            bound = math.sqrt(6.0 / (shape[0] + shape[1]))
            value = rng.uniform(-bound, bound, size=shape)
        params[name] = Tensor(value, requires_grad=True, dtype=np.float32)
    return Seq2SeqModel(config, params, seed=int(rng.integers(2**63)))


def forward(model: Seq2SeqModel, src_batch, tgt_batch, train_mode: bool = False) -> Tensor:
    return model.forward(src_batch, tgt_batch, train_mode)


def snapshot(model: Seq2SeqModel, epoch: int, dev_loss: float) -> Snapshot:
    for name, t in model.params.items():
        if not np.isfinite(t.data).all():
            raise FloatingPointError(f"parameter {name} has non-finite values")
    return Snapshot({k: t.data for k, t in model.params.items()}, int(epoch), float(dev_loss))


def restore(model: Seq2SeqModel, snap: Snapshot) -> None:
    if set(snap.params) != set(model.params):
        missing = sorted(set(model.params) ^ set(snap.params))
        raise ValueError(f"snapshot parameter names differ from model: {missing[:3]}")
    for name, t in model.params.items():
        value = snap.params[name]
        if value.shape != t.shape:
            raise ValueError(f"shape mismatch for {name}: snapshot {value.shape} vs model {t.shape}")
    for name, t in model.params.items():
        t.data = np.array(snap.params[name], dtype=np.float32)
        t.grad = None


def greedy_decode(model, src: Sequence[int], max_len: int) -> list[int]:
    return greedy_decode_batch(model, [src], max_len)[0]


def greedy_decode_batch(model, sources: Sequence[Sequence[int]], max_len: int) -> list[list[int]]:
    """Argmax decoding (lowest id wins ties), stopping at EOS or ``max_len``.

    The EOS token itself is not included in the returned sequences.
    """
    if max_len <= 0 or not sources:
        return [[] for _ in sources]
    width = max(len(s) for s in sources)
    src = np.zeros((len(sources), width), dtype=np.int64)
    for i, s in enumerate(sources):
        src[i, : len(s)] = s
    out = np.zeros((len(sources), 0), dtype=np.int64)
    done = np.zeros(len(sources), dtype=bool)
    for step in range(max_len):
        tgt = np.concatenate([out, np.full((len(sources), 1), PAD, dtype=np.int64)], axis=1)
        probs = model.forward(src, tgt, train_mode=False).data[:, step, :]
        nxt = np.argmax(probs, axis=-1)
        nxt = np.where(done, PAD, nxt)
        out = np.concatenate([out, nxt[:, None]], axis=1)
        done |= nxt == EOS
        if done.all():
            break
    result = []
    for row in out:
        tokens = []
        for tok in row:
            if tok in (EOS, PAD):
                break
            tokens.append(int(tok))
        result.append(tokens)
    return result


# ---- binary snapshot format ----------------------------------------------

def snapshot_to_bytes(snap: Snapshot) -> bytes:
    parts = [SNAPSHOT_MAGIC, struct.pack("<IIdI", SNAPSHOT_VERSION, snap.epoch, snap.dev_loss, len(snap.params))]
    for name, arr in snap.params.items():
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


def snapshot_from_bytes(buf: bytes) -> Snapshot:
    if buf[:4] != SNAPSHOT_MAGIC:
        raise ValueError("not a snapshot file (bad magic)")
    version, epoch, dev_loss, count = struct.unpack_from("<IIdI", buf, 4)
    if version != SNAPSHOT_VERSION:
        raise ValueError(f"unsupported snapshot version {version}")
    pos = 4 + struct.calcsize("<IIdI")
    params = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        name = buf[pos: pos + n].decode("utf-8")
        pos += n
        (rank,) = struct.unpack_from("<B", buf, pos)
        pos += 1
        shape = struct.unpack_from(f"<{rank}I", buf, pos)
        pos += 4 * rank
        size = int(np.prod(shape)) if rank else 1
        params[name] = np.frombuffer(buf, dtype="<f4", count=size, offset=pos).reshape(shape)
        pos += 4 * size
    if pos != len(buf):
        raise ValueError("trailing bytes after snapshot payload")
    return Snapshot(params, epoch, dev_loss)


def save_snapshot(snap: Snapshot, path: str | Path) -> None:
    Path(path).write_bytes(snapshot_to_bytes(snap))


def load_snapshot(path: str | Path) -> Snapshot:
    return snapshot_from_bytes(Path(path).read_bytes())
