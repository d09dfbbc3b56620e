"""Post-LN transformer encoder with token dropping in a block of middle layers.

Layers are 0-indexed. With ``L`` layers the default schedule runs layers
``0 .. L/2-2`` and ``L-1`` on every row and layers ``L/2-1 .. L-2`` on the kept
rows only (for ``L = 12``: six full layers, six half layers). Variants:

``baseline``          every layer is full, no plan is consulted
``drop``              the first half layer sees kept queries against all keys and
                      values; later half layers see kept rows only
``pass``              every half layer keeps all ``T`` key/value rows, taking the
                      dropped ones from the cached output of the last full layer
``avg``               rows are mean-pooled in pairs instead of dropped
``layer_rearranged``  all full layers first, the half block at the top
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

from . import tensor as tn
from .corpus import MASK
from .importance import DropPlan
from .tensor import Tensor

CKPT_MAGIC = b"TDCK"
INIT_STD = 0.02


class ConfigError(ValueError):
    pass


class BatchError(ValueError):
    pass


class Variant(str, Enum):
    BASELINE = "baseline"
    DROP = "drop"
    PASS = "pass"
    AVG = "avg"
    LAYER_REARRANGED = "layer_rearranged"


def layer_schedule(n_layers: int, variant) -> tuple[tuple[int, ...], tuple[int, ...]]:
    """Return ``(full_layers, half_layers)`` as ascending 0-based indices."""
    variant = Variant(variant)
    if n_layers < 1:
        raise ConfigError("need at least one layer")
    if variant is Variant.BASELINE:
        return tuple(range(n_layers)), ()
    if n_layers % 2 or n_layers < 2:
        raise ConfigError(f"token dropping needs an even layer count, got {n_layers}")
    half = n_layers // 2
    if variant is Variant.LAYER_REARRANGED:
        return tuple(range(half)), tuple(range(half, n_layers))
    return tuple(range(half - 1)) + (n_layers - 1,), tuple(range(half - 1, n_layers - 1))


@dataclass
class EncoderConfig:
    vocab_size: int
    n_layers: int = 4
    d_model: int = 128
    n_heads: int = 2
    max_len: int = 128
    variant: Variant = Variant.BASELINE
    d_ff: int = 0
    dtype: str = "float32"
    full_layers: tuple = field(default=(), init=False)
    half_layers: tuple = field(default=(), init=False)

    def __post_init__(self):
        self.variant = Variant(self.variant)
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model {self.d_model} not divisible by {self.n_heads} heads")
        if not self.d_ff:
            self.d_ff = 4 * self.d_model
        if self.variant is Variant.AVG and self.max_len % 2:
            raise ConfigError("avg variant needs an even sequence length")
        self.full_layers, self.half_layers = layer_schedule(self.n_layers, self.variant)

    @property
    def d_head(self):
        return self.d_model // self.n_heads

    def to_dict(self):
        d = asdict(self)
        d["variant"] = self.variant.value
        del d["full_layers"], d["half_layers"]
        return d


@dataclass
class ForwardTrace:
    hidden: list
    plans: list | None
    cached: Tensor | None = None
    keep_idx: np.ndarray | None = None
    drop_idx: np.ndarray | None = None
    final: Tensor | None = None


_LAYER_PARAMS = ("wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo", "ln1_g", "ln1_b",
                 "w1", "b1", "w2", "b2", "ln2_g", "ln2_b")


class Encoder:
    """Parameters plus the forward pass; gradients flow through :mod:`tokdrop.tensor`."""

    def __init__(self, config: EncoderConfig, seed: int = 0):
        self.config = config
        self.params: dict[str, Tensor] = {}
        rng = np.random.default_rng(seed)
        c = config
        dt = np.dtype(c.dtype)

        def normal(*shape):
            return rng.normal(0.0, INIT_STD, shape).astype(dt)

        def add(name, data):
            self.params[name] = Tensor(data, requires_grad=True, dtype=dt, name=name)

        add("tok_emb", normal(c.vocab_size, c.d_model))
        add("pos_emb", normal(c.max_len, c.d_model))
        add("emb_ln_g", np.ones(c.d_model))
        add("emb_ln_b", np.zeros(c.d_model))
        d, f = c.d_model, c.d_ff
        for i in range(c.n_layers):
            p = f"layer{i}."
            for w in ("wq", "wk", "wv", "wo"):
                add(p + w, normal(d, d))
                add(p + "b" + w[1], np.zeros(d))
            add(p + "ln1_g", np.ones(d))
            add(p + "ln1_b", np.zeros(d))
            add(p + "w1", normal(d, f))
            add(p + "b1", np.zeros(f))
            add(p + "w2", normal(f, d))
            add(p + "b2", np.zeros(d))
            add(p + "ln2_g", np.ones(d))
            add(p + "ln2_b", np.zeros(d))
        add("head_w", normal(d, d))
        add("head_b", np.zeros(d))
        add("head_ln_g", np.ones(d))
        add("head_ln_b", np.zeros(d))
        add("out_bias", np.zeros(c.vocab_size))

    # parameter plumbing -------------------------------------------------

    def parameters(self):
        return list(self.params.values())

    def named_parameters(self):
        return list(self.params.items())

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def layer(self, i):
        p = f"layer{i}."
        return {k: self.params[p + k] for k in _LAYER_PARAMS}

    def checksum(self) -> str:
        import hashlib

        h = hashlib.sha256()
        for p in self.params.values():
            h.update(p.data.tobytes())
        return h.hexdigest()

    def save(self, path, extra: dict | None = None, moments=None):
        """Header (JSON config) then every parameter in declaration order as float32."""
        header = {"config": self.config.to_dict(),
                  "names": list(self.params),
                  "shapes": [list(p.shape) for p in self.params.values()],
                  "extra": extra or {},
                  "moments": moments is not None}
        blob = json.dumps(header, sort_keys=True).encode()
        with open(path, "wb") as f:
            f.write(CKPT_MAGIC + struct.pack("<Q", len(blob)) + blob)
            for p in self.params.values():
                f.write(p.data.astype("<f4").tobytes())
            if moments is not None:
                for arrays in moments:
                    for a in arrays:
                        f.write(np.asarray(a).astype("<f4").tobytes())

    @classmethod
    def load(cls, path, dtype=None):
        """Return ``(encoder, extra, moments)``; ``moments`` is None if absent."""
        raw = Path(path).read_bytes()
        if raw[:4] != CKPT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint")
        (n,) = struct.unpack_from("<Q", raw, 4)
        header = json.loads(raw[12:12 + n])
        cfg = dict(header["config"])
        if dtype is not None:
            cfg["dtype"] = dtype
        enc = cls(EncoderConfig(**cfg))
        off = 12 + n
        arrays = []
        for shape in header["shapes"]:
            size = int(np.prod(shape))
            arrays.append(np.frombuffer(raw, "<f4", size, off).reshape(shape))
            off += 4 * size
        for name, a in zip(header["names"], arrays):
            enc.params[name].data = a.astype(enc.params[name].dtype)
        moments = None
        if header.get("moments"):
            moments = []
            for _ in range(2):
                group = []
                for shape in header["shapes"]:
                    size = int(np.prod(shape))
                    group.append(np.frombuffer(raw, "<f4", size, off).reshape(shape).copy())
                    off += 4 * size
                moments.append(group)
        return enc, header.get("extra", {}), moments

    # forward ------------------------------------------------------------

    def embed(self, tokens):
        tokens = np.asarray(tokens)
        T = tokens.shape[-1]
        if T > self.config.max_len:
            raise BatchError(f"sequence length {T} exceeds max_len {self.config.max_len}")
        p = self.params
        x = tn.add(tn.embedding(p["tok_emb"], tokens), tn.embedding(p["pos_emb"], np.arange(T)))
        return tn.layernorm(x, p["emb_ln_g"], p["emb_ln_b"])

    def encoder_layer(self, x_q, x_kv, i):
        """Attention of ``x_q`` rows over ``x_kv`` rows, then the FFN, post-LN."""
        return encoder_layer(x_q, x_kv, self.layer(i), self.config.n_heads)

    def hidden(self, tokens, plans=None, trace=None, full=False):
        """Final hidden states ``[B x T x d]`` in original token order.

        ``full=True`` runs every layer on all rows (stage 2, fine-tuning,
        evaluation). Without plans the drop-style variants also run full.
        """
        c = self.config
        h = self.embed(tokens)
        if trace is not None:
            trace.hidden.append(h)
        half = set(c.half_layers)
        keep = drop = None
        dropping = c.variant is not Variant.BASELINE and bool(half) and not full
        if dropping and c.variant is not Variant.AVG:
            # drop-style variants need plans; avg pools regardless
            if plans is None:
                dropping = False
            else:
                keep, drop = _stack_plans(plans, h.shape[1])
        elif c.variant is Variant.BASELINE and plans is not None:
            if any(pl.M != pl.T for pl in plans):
                raise BatchError("baseline variant cannot drop tokens")
        cached = hk = None
        for i in range(c.n_layers):
            in_half = dropping and i in half
            if in_half and hk is None:
                cached = h
                if c.variant is Variant.AVG:
                    hk = tn.pool_pairs(h)
                    hk = self.encoder_layer(hk, hk, i)
                else:
                    hk = self.encoder_layer(tn.gather_rows(h, keep), h, i)
            elif in_half:
                if c.variant is Variant.PASS:
                    kv = tn.merge_rows(hk, tn.gather_rows(cached, drop), keep, drop)
                else:
                    kv = hk
                hk = self.encoder_layer(hk, kv, i)
            else:
                if hk is not None:
                    h = self._restore(hk, cached, keep, drop)
                    hk = None
                h = self.encoder_layer(h, h, i)
            if trace is not None:
                trace.hidden.append(hk if in_half else h)
        if hk is not None:
            h = self._restore(hk, cached, keep, drop)
        if trace is not None:
            trace.cached, trace.keep_idx, trace.drop_idx, trace.final = cached, keep, drop, h
        return h

    def _restore(self, hk, cached, keep, drop):
        if self.config.variant is Variant.AVG:
            return tn.add(tn.repeat_pairs(hk), cached)
        return tn.merge_rows(hk, tn.gather_rows(cached, drop), keep, drop)

    def mlm_logits(self, h, mask_flat):
        p = self.params
        d = self.config.d_model
        rows = tn.gather_rows(tn.reshape(h, (-1, d)), mask_flat)
        z = tn.gelu(tn.add(tn.matmul(rows, p["head_w"]), p["head_b"]))
        z = tn.layernorm(z, p["head_ln_g"], p["head_ln_b"])
        return tn.add(tn.matmul(z, tn.transpose(p["tok_emb"], (1, 0))), p["out_bias"])

    def forward(self, batch, plans=None, full=False):
        """MLM logits at the batch's masked positions, plus the forward trace."""
        if plans is not None and not full:
            _check_targets_kept(batch, plans)
        trace = ForwardTrace(hidden=[], plans=plans)
        h = self.hidden(batch.tokens, plans, trace, full)
        return self.mlm_logits(h, batch.mask_flat), trace


def attention(x_q, x_kv, p, n_heads):
    """Multi-head attention of ``x_q`` rows over ``x_kv`` rows, output-projected."""
    B, M, d = x_q.shape
    N = x_kv.shape[1]
    if x_kv.shape[0] != B or x_kv.shape[2] != d:
        raise tn.DimensionError(f"query rows {x_q.shape} and key rows {x_kv.shape} disagree")
    dh = d // n_heads

    def heads(x, w, b, rows):
        y = tn.add(tn.matmul(x, w), b)
        return tn.transpose(tn.reshape(y, (B, rows, n_heads, dh)), (0, 2, 1, 3))

    q = heads(x_q, p["wq"], p["bq"], M)
    k = heads(x_kv, p["wk"], p["bk"], N)
    v = heads(x_kv, p["wv"], p["bv"], N)
    s = tn.scale(tn.matmul(q, tn.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
    ctx = tn.matmul(tn.softmax_rows(s), v)
    ctx = tn.reshape(tn.transpose(ctx, (0, 2, 1, 3)), (B, M, d))
    return tn.add(tn.matmul(ctx, p["wo"]), p["bo"])


def encoder_layer(x_q, x_kv, p, n_heads):
    """Attention then FFN, each wrapped in residual + layernorm."""
    attn = attention(x_q, x_kv, p, n_heads)
    h1 = tn.layernorm(tn.add(x_q, attn), p["ln1_g"], p["ln1_b"])
    f = tn.relu(tn.add(tn.matmul(h1, p["w1"]), p["b1"]))
    f = tn.add(tn.matmul(f, p["w2"]), p["b2"])
    return tn.layernorm(tn.add(h1, f), p["ln2_g"], p["ln2_b"])


def _stack_plans(plans, T):
    Ms = {pl.M for pl in plans}
    if len(Ms) != 1:
        raise BatchError(f"all plans in a batch must keep the same count, got {sorted(Ms)}")
    if any(pl.T != T for pl in plans):
        raise BatchError("plan length differs from sequence length")
    return np.stack([pl.keep_idx for pl in plans]), np.stack([pl.drop_idx for pl in plans])


def _check_targets_kept(batch, plans):
    for seq, pl in zip(batch.sequences, plans):
        if pl.M == pl.T:
            continue
        kept = np.zeros(pl.T, bool)
        kept[pl.keep_idx] = True
        if not kept[seq.mask_positions].all() or not kept[seq.tokens == MASK].all():
            raise BatchError("every MLM target must be a kept row")


def all_keep_plans(batch):
    return [DropPlan.keep_all(batch.T) for _ in range(len(batch))]
