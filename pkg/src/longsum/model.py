"""Encoder-decoder transformer with a sparse-attention encoder.

Parameter count, in terms of V=vocab_size, D=d_model, F=d_ff, L=max_input_len::

    embedding + positions + head     V*D + L*D + D*V + V
    one encoder layer                2 norms (4D) + attention 4(D^2 + D) + FFN (2DF + F + D)
    one decoder layer                3 norms (6D) + 2 attentions 8(D^2 + D) + FFN (2DF + F + D)

See :func:`analytic_param_count`.
"""

from __future__ import annotations

import json
import math
import struct
from collections import OrderedDict
from dataclasses import asdict, dataclass

import numpy as np

from .attention import dense_attention_reference, sparse_attention
from .pattern import build_pattern
from .tensor import (
    Tensor,
    add,
    layer_norm,
    matmul,
    no_grad,
    relu,
    reshape,
    take_rows,
    transpose,
)

PAD, BOS, EOS, UNK, GLOBAL = 0, 1, 2, 3, 4
N_RESERVED = 5

CHECKPOINT_MAGIC = b"LONGSUM\x00"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class ModelConfig:
    vocab_size: int
    d_model: int = 64
    heads: int = 4
    encoder_layers: int = 2
    decoder_layers: int = 2
    d_ff: int = 256
    max_input_len: int = 512
    max_summary_len: int = 64
    window: int = 16
    global_positions: tuple = (0,)
    seed: int = 0

    def __post_init__(self):
        self.global_positions = tuple(int(g) for g in self.global_positions)
        if self.vocab_size < 1:
            raise ValueError("vocab_size must be positive")
        if self.d_model < 1 or self.heads < 1 or self.d_model % self.heads:
            raise ValueError(f"heads ({self.heads}) must divide d_model ({self.d_model})")
        if not self.max_input_len >= self.max_summary_len >= 1:
            raise ValueError("need max_input_len >= max_summary_len >= 1")
        if self.window < 0:
            raise ValueError("window must be >= 0")

    def to_json(self):
        d = asdict(self)
        d["global_positions"] = list(self.global_positions)
        return json.dumps(d, sort_keys=True)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def analytic_param_count(cfg):
    V, D, F, L = cfg.vocab_size, cfg.d_model, cfg.d_ff, cfg.max_input_len
    attn = 4 * (D * D + D)
    ffn = 2 * D * F + F + D if F > 0 else 0
    enc = 4 * D + attn + ffn
    dec = 6 * D + 2 * attn + ffn
    return V * D + L * D + D * V + V + cfg.encoder_layers * enc + cfg.decoder_layers * dec


def sinusoidal_positions(length, d_model):
    pos = np.arange(length)[:, None]
    i = np.arange(d_model)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / d_model)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle))


def _param_layout(cfg):
    """Declared parameters in order, as (name, shape)."""
    V, D, F, L = cfg.vocab_size, cfg.d_model, cfg.d_ff, cfg.max_input_len
    out = [("embed", (V, D)), ("pos", (L, D))]

    def attn(prefix):
        for p in ("q", "k", "v", "o"):
            out.extend([(f"{prefix}.W{p}", (D, D)), (f"{prefix}.b{p}", (D,))])

    def norm(prefix):
        out.extend([(f"{prefix}.g", (D,)), (f"{prefix}.b", (D,))])

    def ffn(prefix):
        if F > 0:
            out.extend([(f"{prefix}.W1", (D, F)), (f"{prefix}.b1", (F,)), (f"{prefix}.W2", (F, D)), (f"{prefix}.b2", (D,))])

    for l in range(cfg.encoder_layers):
        norm(f"enc{l}.ln1")
        attn(f"enc{l}.self")
        norm(f"enc{l}.ln2")
        ffn(f"enc{l}.ffn")
    for l in range(cfg.decoder_layers):
        norm(f"dec{l}.ln1")
        attn(f"dec{l}.self")
        norm(f"dec{l}.ln2")
        attn(f"dec{l}.cross")
        norm(f"dec{l}.ln3")
        ffn(f"dec{l}.ffn")
    out.extend([("head.W", (D, V)), ("head.b", (V,))])
    return out


class Model:
    """Parameters plus the forward passes. Positions are fixed, not trained."""

    def __init__(self, config, params=None):
        self.config = config
        if params is None:
            params = self._init_params()
        self.params = params

    def _init_params(self):
        cfg = self.config
        rng = np.random.default_rng(cfg.seed)
        bound = 1.0 / math.sqrt(cfg.d_model)
        params = OrderedDict()
        for name, shape in _param_layout(cfg):
            leaf = name.rsplit(".", 1)[-1]
            if name == "pos":
                arr = sinusoidal_positions(cfg.max_input_len, cfg.d_model)
            elif leaf == "g":
                arr = np.ones(shape)
            elif len(shape) == 1:
                arr = np.zeros(shape)
            else:
                arr = rng.uniform(-bound, bound, size=shape)
            params[name] = Tensor(arr, requires_grad=(name != "pos"), name=name)
        return params

    # -- bookkeeping ---------------------------------------------------------
    def trainable(self):
        return [(k, t) for k, t in self.params.items() if t.requires_grad]

    def zero_grad(self):
        for t in self.params.values():
            t.grad = None

    def count_params(self):
        return sum(t.size for t in self.params.values())

    def pattern_for(self, n):
        g = [p for p in self.config.global_positions if p < n]
        return build_pattern(n, self.config.window, g)

    def astype(self, dtype):
        params = OrderedDict(
            (k, Tensor(t.data, requires_grad=t.requires_grad, name=k, dtype=np.dtype(dtype).type))
            for k, t in self.params.items()
        )
        return Model(self.config, params)

    # -- building blocks -----------------------------------------------------
    def _p(self, name):
        return self.params[name]

    def _norm(self, x, prefix):
        return layer_norm(x, self._p(prefix + ".g"), self._p(prefix + ".b"))

    def _linear(self, x, w, b):
        return add(matmul(x, self._p(w)), self._p(b))

    def _heads(self, x):
        B, n, _ = x.shape
        H = self.config.heads
        return transpose(reshape(x, (B, n, H, self.config.d_model // H)), (0, 2, 1, 3))

    def _merge(self, x):
        B, H, n, dk = x.shape
        return reshape(transpose(x, (0, 2, 1, 3)), (B, n, H * dk))

    def _attention(self, prefix, xq, xkv, attend):
        q = self._heads(self._linear(xq, prefix + ".Wq", prefix + ".bq"))
        k = self._heads(self._linear(xkv, prefix + ".Wk", prefix + ".bk"))
        v = self._heads(self._linear(xkv, prefix + ".Wv", prefix + ".bv"))
        return self._linear(self._merge(attend(q, k, v)), prefix + ".Wo", prefix + ".bo")

    def _ffn(self, x, prefix):
        if self.config.d_ff <= 0:
            return None
        h = relu(self._linear(x, prefix + ".W1", prefix + ".b1"))
        return self._linear(h, prefix + ".W2", prefix + ".b2")

    def _embed(self, ids):
        n = ids.shape[1]
        x = take_rows(self._p("embed"), ids) * math.sqrt(self.config.d_model)
        pos = Tensor(self._p("pos").data[:n], dtype=self._p("pos").data.dtype.type)
        return add(x, pos)

    # -- encoder / decoder ---------------------------------------------------
    def _check_ids(self, ids, limit, what):
        if ids.size and (ids.min() < 0 or ids.max() >= self.config.vocab_size):
            raise ValueError(f"{what}: token id out of range [0, {self.config.vocab_size})")
        if ids.shape[-1] > limit:
            raise ValueError(f"{what}: sequence length {ids.shape[-1]} exceeds limit {limit}")

    def encode_batch(self, ids, mask=None):
        """Encode ``ids`` of shape ``(B, n)``; ``mask`` marks real tokens."""
        ids = np.asarray(ids, dtype=np.int64)
        if ids.ndim != 2 or ids.shape[1] < 1:
            raise ValueError("encode: need a non-empty (batch, n) id array")
        self._check_ids(ids, self.config.max_input_len, "encode")
        pattern = self.pattern_for(ids.shape[1])
        key_mask = None if mask is None else np.asarray(mask, dtype=bool)[:, None, :]
        x = self._embed(ids)
        for l in range(self.config.encoder_layers):
            h = self._norm(x, f"enc{l}.ln1")
            x = add(x, self._attention(f"enc{l}.self", h, h, lambda q, k, v: sparse_attention(q, k, v, pattern, key_mask)))
            f = self._ffn(self._norm(x, f"enc{l}.ln2"), f"enc{l}.ffn")
            if f is not None:
                x = add(x, f)
        return x

    def decode_hidden(self, prefix, H, enc_mask=None):
        """Decoder states for teacher-forced ``prefix`` of shape ``(B, t)``."""
        prefix = np.asarray(prefix, dtype=np.int64)
        self._check_ids(prefix, self.config.max_summary_len, "decode")
        t, n = prefix.shape[1], H.shape[1]
        causal = np.tril(np.ones((t, t), dtype=bool))
        if enc_mask is None:
            cross = np.ones((1, 1, 1, n), dtype=bool)
        else:
            cross = np.asarray(enc_mask, dtype=bool)[:, None, None, :]
        x = self._embed(prefix)
        for l in range(self.config.decoder_layers):
            h = self._norm(x, f"dec{l}.ln1")
            x = add(x, self._attention(f"dec{l}.self", h, h, lambda q, k, v: dense_attention_reference(q, k, v, causal)))
            h = self._norm(x, f"dec{l}.ln2")
            x = add(x, self._attention(f"dec{l}.cross", h, H, lambda q, k, v: dense_attention_reference(q, k, v, cross)))
            f = self._ffn(self._norm(x, f"dec{l}.ln3"), f"dec{l}.ffn")
            if f is not None:
                x = add(x, f)
        return x

    def logits(self, hidden):
        """Generation head ``W_h h_t + b``."""
        return add(matmul(hidden, self._p("head.W")), self._p("head.b"))

    def forward(self, doc_ids, doc_mask, prefix):
        H = self.encode_batch(doc_ids, doc_mask)
        return self.logits(self.decode_hidden(prefix, H, doc_mask))

    # -- single-sequence helpers ---------------------------------------------
    def encode(self, tokens):
        """Context representation H, shape ``(n, d_model)``, for one document."""
        ids = np.asarray(tokens, dtype=np.int64)[None, :]
        return reshape(self.encode_batch(ids), ids.shape[1:] + (self.config.d_model,))

    def step_log_probs_batch(self, prefixes, H):
        """float64 next-token log-distributions for equal-length ``prefixes``."""
        prefixes = np.asarray(prefixes, dtype=np.int64)
        if prefixes.ndim != 2 or prefixes.shape[1] == 0:
            raise ValueError("decode_step: prefix must be a non-empty sequence")
        if np.any(prefixes[:, 0] != BOS):
            raise ValueError("decode_step: prefix must start with BOS")
        if prefixes.shape[1] >= self.config.max_summary_len:
            raise ValueError(f"decode_step: prefix length {prefixes.shape[1]} reaches max_summary_len")
        Hb = H if H.ndim == 3 else reshape(H, (1,) + H.shape)
        with no_grad():
            hid = self.decode_hidden(prefixes, Hb)
            last = Tensor(hid.data[:, -1], dtype=hid.data.dtype.type)
            z = self.logits(last).data.astype(np.float64)
        z = z - z.max(axis=-1, keepdims=True)
        return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))

    def step_log_probs(self, prefix, H):
        """float64 log-distribution over the vocabulary after ``prefix``."""
        prefix = np.asarray(prefix, dtype=np.int64)
        if prefix.ndim != 1:
            raise ValueError("decode_step: prefix must be a 1-D id sequence")
        return self.step_log_probs_batch(prefix[None, :], H)[0]

    def decode_step(self, prefix, H):
        """``P(y_t | y_<t, X)`` as a probability vector."""
        return np.exp(self.step_log_probs(prefix, H))


def decode_step(prefix, H, model):
    return model.decode_step(prefix, H)


def count_params(model):
    return model.count_params()


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(model, path):
    """Write ``model`` in the versioned binary checkpoint format."""
    cfg = model.config.to_json().encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(cfg)))
        fh.write(cfg)
        fh.write(struct.pack("<I", len(model.params)))
        for t in model.params.values():
            fh.write(struct.pack("<I", t.ndim))
            fh.write(struct.pack(f"<{t.ndim}I", *t.shape))
            fh.write(np.ascontiguousarray(t.data, dtype="<f4").tobytes())
    return path


def load_checkpoint(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    try:
        return _parse_checkpoint(blob, path)
    except (struct.error, ValueError, TypeError, UnicodeDecodeError) as exc:
        if isinstance(exc, CheckpointError):
            raise
        raise CheckpointError(f"{path}: corrupt checkpoint ({exc})") from None


def _parse_checkpoint(blob, path):
    if blob[:8] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a longsum checkpoint")
    version, clen = struct.unpack_from("<II", blob, 8)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    off = 16
    cfg = ModelConfig.from_dict(json.loads(blob[off:off + clen].decode("utf-8")))
    off += clen
    (count,) = struct.unpack_from("<I", blob, off)
    off += 4
    layout = _param_layout(cfg)
    if count != len(layout):
        raise CheckpointError(f"{path}: expected {len(layout)} tensors, found {count}")
    params = OrderedDict()
    for name, shape in layout:
        (ndim,) = struct.unpack_from("<I", blob, off)
        off += 4
        dims = struct.unpack_from(f"<{ndim}I", blob, off)
        off += 4 * ndim
        if tuple(dims) != tuple(shape):
            raise CheckpointError(f"{path}: tensor {name} has shape {dims}, expected {shape}")
        size = int(np.prod(dims, dtype=np.int64))
        arr = np.frombuffer(blob, dtype="<f4", count=size, offset=off).reshape(dims)
        off += 4 * size
        params[name] = Tensor(arr.astype(np.float32), requires_grad=(name != "pos"), name=name, dtype=np.float32)
    if off != len(blob):
        raise CheckpointError(f"{path}: {len(blob) - off} trailing bytes")
    return Model(cfg, params)
