"""Three-layer sequential recommender.

Layer one is a shared item-embedding table; layer two a sequence encoder
(bidirectional self-attention stack or a GRU); layer three scores every real
item by inner product against the *same* table plus a per-item bias. The
table is genuinely shared storage: mutating a row changes both what the
encoder sees and what the scorer produces.

Sequences are left-padded to ``max_len`` with the pad index. The attention
variant always appends a [mask] token after the last position and reads the
user state there; the GRU reads its final hidden state instead and never
sees the [mask] token.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigError, DataError
from .tensor import Tensor

__all__ = [
    "ModelConfig",
    "EmbeddingTable",
    "BlockParams",
    "GruParams",
    "EncoderParams",
    "EncoderActivations",
    "Model",
    "init_model",
    "pad_batch",
    "embed_sequence",
    "encode_transformer",
    "encode_gru",
    "encode",
    "score",
    "score_candidates",
    "named_parameters",
    "clone_model",
    "save_checkpoint",
    "load_checkpoint",
    "catalog_hash",
    "params_fingerprint",
]

NEG_ATTENTION = -1e9  # additive logit for pad keys; large-finite keeps softmax NaN-free


@dataclass(frozen=True)
class ModelConfig:
    variant: str  # "transformer" | "gru"
    n_items: int
    d: int = 64
    n_blocks: int = 2
    n_heads: int = 2
    max_len: int = 50
    dropout_rate: float = 0.1

    def __post_init__(self):
        if self.variant not in ("transformer", "gru"):
            raise ConfigError(f"unknown encoder variant {self.variant!r}")
        if self.max_len < 2:
            raise ConfigError(f"max_len must be at least 2, got {self.max_len}")
        if self.variant == "transformer" and self.d % self.n_heads != 0:
            raise ConfigError(f"d={self.d} not divisible by n_heads={self.n_heads}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")


@dataclass
class EmbeddingTable:
    """(n_items + 2) x d lookup; row pad_index is all-zero, row mask_index is
    the [mask] token. ``positional`` has max_len + 1 rows so the slot after a
    full-length sequence (where the mask token lands) still has a position."""

    weights: Tensor
    item_bias: Tensor
    pad_index: int
    mask_index: int
    positional: Tensor | None = None
    ln_gain: Tensor | None = None
    ln_bias: Tensor | None = None

    @property
    def n_items(self) -> int:
        return self.pad_index

    @property
    def d(self) -> int:
        return self.weights.shape[1]

    @property
    def has_positional(self) -> bool:
        return self.positional is not None


@dataclass
class BlockParams:
    wq: Tensor
    bq: Tensor
    wk: Tensor
    bk: Tensor
    wv: Tensor
    bv: Tensor
    wo: Tensor
    bo: Tensor
    ln1_gain: Tensor
    ln1_bias: Tensor
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor
    ln2_gain: Tensor
    ln2_bias: Tensor


@dataclass
class GruParams:
    wz: Tensor
    uz: Tensor
    bz: Tensor
    wr: Tensor
    ur: Tensor
    br: Tensor
    wc: Tensor
    uc: Tensor
    bc: Tensor


@dataclass
class EncoderParams:
    variant: str
    n_heads: int
    blocks: list[BlockParams] = field(default_factory=list)
    gru: GruParams | None = None
    head_w: Tensor | None = None  # user-state projection, attention variant only
    head_b: Tensor | None = None
    frozen: bool = False


@dataclass
class EncoderActivations:
    hidden: list  # H^0 .. H^N (transformer) or per-step states (gru)
    post_attention: list  # A^0 .. A^{N-1}, transformer only


@dataclass
class Model:
    config: ModelConfig
    table: EmbeddingTable
    encoder: EncoderParams


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    """Normal(0, std) with draws beyond 2 std resampled."""
    x = rng.standard_normal(shape) * std
    bad = np.abs(x) > 2 * std
    while bad.any():
        x[bad] = rng.standard_normal(int(bad.sum())) * std
        bad = np.abs(x) > 2 * std
    return x


def _init_block(rng, d: int) -> BlockParams:
    tn = lambda *s: Tensor(trunc_normal(rng, s))
    zeros = lambda *s: Tensor(np.zeros(s))
    ones = lambda *s: Tensor(np.ones(s))
    return BlockParams(
        wq=tn(d, d), bq=zeros(d), wk=tn(d, d), bk=zeros(d), wv=tn(d, d), bv=zeros(d),
        wo=tn(d, d), bo=zeros(d),
        ln1_gain=ones(d), ln1_bias=zeros(d),
        w1=tn(d, 4 * d), b1=zeros(4 * d), w2=tn(4 * d, d), b2=zeros(d),
        ln2_gain=ones(d), ln2_bias=zeros(d),
    )


def init_model(config: ModelConfig, rng: np.random.Generator) -> Model:
    d, n = config.d, config.n_items
    weights = trunc_normal(rng, (n + 2, d))
    weights[n] = 0.0  # pad row
    if config.variant == "gru":
        weights[n + 1] = 0.0  # [mask] unused by the recurrent variant; keep it inert
        table = EmbeddingTable(
            weights=Tensor(weights),
            item_bias=Tensor(np.zeros(n)),
            pad_index=n,
            mask_index=n + 1,
        )
        gru = GruParams(
            wz=Tensor(trunc_normal(rng, (d, d))), uz=Tensor(trunc_normal(rng, (d, d))), bz=Tensor(np.zeros(d)),
            wr=Tensor(trunc_normal(rng, (d, d))), ur=Tensor(trunc_normal(rng, (d, d))), br=Tensor(np.zeros(d)),
            wc=Tensor(trunc_normal(rng, (d, d))), uc=Tensor(trunc_normal(rng, (d, d))), bc=Tensor(np.zeros(d)),
        )
        encoder = EncoderParams(variant="gru", n_heads=0, gru=gru)
    else:
        table = EmbeddingTable(
            weights=Tensor(weights),
            item_bias=Tensor(np.zeros(n)),
            pad_index=n,
            mask_index=n + 1,
            positional=Tensor(trunc_normal(rng, (config.max_len + 1, d))),
            ln_gain=Tensor(np.ones(d)),
            ln_bias=Tensor(np.zeros(d)),
        )
        blocks = [_init_block(rng, d) for _ in range(config.n_blocks)]
        encoder = EncoderParams(
            variant="transformer",
            n_heads=config.n_heads,
            blocks=blocks,
            head_w=Tensor(trunc_normal(rng, (d, d))),
            head_b=Tensor(np.zeros(d)),
        )
    return Model(config=config, table=table, encoder=encoder)


def pad_batch(sequences, max_len: int, pad_index: int) -> np.ndarray:
    """Left-pad (and left-truncate) item index sequences to (B, max_len)."""
    batch = np.full((len(sequences), max_len), pad_index, dtype=np.int64)
    for i, seq in enumerate(sequences):
        seq = np.asarray(seq, dtype=np.int64)[-max_len:]
        if len(seq):
            batch[i, max_len - len(seq) :] = seq
    return batch


def embed_sequence(
    table: EmbeddingTable,
    seqs,
    max_len: int,
    dropout_rate: float = 0.0,
    training: bool = False,
    rng: np.random.Generator | None = None,
):
    """Look up a (B, max_len) batch -> ((B, max_len, d) Tensor, bool pad mask).

    1-D input is treated as a single sequence and padded here. Positional
    embeddings, layer norm, and dropout apply only when the table carries
    them (the attention variant); the recurrent variant gets dropout only.
    """
    seqs = np.asarray(seqs, dtype=np.int64)
    if seqs.ndim == 1:
        batch = pad_batch([seqs], max_len, table.pad_index)
    else:
        batch = seqs
    if batch.min(initial=0) < 0 or batch.max(initial=0) > table.mask_index:
        raise IndexError(
            f"item index out of range [0, {table.mask_index}] in input batch"
        )
    real = batch != table.pad_index
    e = T.take_rows(table.weights, batch)
    if table.has_positional:
        e = T.add(e, T.take_rows(table.positional, np.arange(batch.shape[1])))
        if table.ln_gain is not None:
            e = T.layer_norm(e, table.ln_gain, table.ln_bias)
    if dropout_rate and training:
        e = T.dropout(e, dropout_rate, training_flag=True, rng=rng)
    return e, real


def _positions(h: Tensor, index: int) -> Tensor:
    """Select one position from a (B, L, d) tensor -> (B, d)."""
    b, l, d = h.shape
    flipped = T.transpose(h, (1, 0, 2))
    row = T.take_rows(flipped, np.array([index]))
    return T.reshape(row, (b, d))


def _mha(block: BlockParams, h: Tensor, additive_mask: np.ndarray, n_heads: int) -> Tensor:
    b, l, d = h.shape
    dh = d // n_heads

    def split(x):  # (B, L, d) -> (B, heads, L, dh)
        return T.transpose(T.reshape(x, (b, l, n_heads, dh)), (0, 2, 1, 3))

    q = split(T.add(T.matmul(h, block.wq), block.bq))
    k = split(T.add(T.matmul(h, block.wk), block.bk))
    v = split(T.add(T.matmul(h, block.wv), block.bv))
    logits = T.mul(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(dh))
    logits = T.add(logits, additive_mask)
    attn = T.softmax(logits, axis=-1)
    ctx = T.matmul(attn, v)  # (B, heads, L, dh)
    merged = T.reshape(T.transpose(ctx, (0, 2, 1, 3)), (b, l, d))
    return T.add(T.matmul(merged, block.wo), block.bo)


def encode_transformer(
    encoder: EncoderParams,
    table: EmbeddingTable,
    e: Tensor,
    real: np.ndarray,
    dropout_rate: float = 0.0,
    training: bool = False,
    rng: np.random.Generator | None = None,
    read_position: int | None = None,
):
    """Append the [mask] token, run the block stack, read the user state.

    ``read_position`` selects which slot the user state is read from; default
    is the appended [mask] slot (next-item prediction). Returns
    (m: (B, d), activations over B x (L+1) x d).
    """
    if encoder.variant != "transformer":
        raise ConfigError(f"encode_transformer got variant {encoder.variant!r}")
    b, l, d = e.shape
    # the [mask] column goes through the same embedding pipeline as items;
    # layer norm is per-position so applying it to the lone column matches
    # having embedded it in-sequence
    mask_e = T.add(
        T.take_rows(table.weights, np.full(b, table.mask_index)),
        T.reshape(T.take_rows(table.positional, np.array([l])), (1, d)),
    )
    mask_e = T.layer_norm(mask_e, table.ln_gain, table.ln_bias)
    if dropout_rate and training:
        mask_e = T.dropout(mask_e, dropout_rate, training_flag=True, rng=rng)
    h = T.concat([e, T.reshape(mask_e, (b, 1, d))], axis=1)

    valid = np.concatenate([real, np.ones((b, 1), dtype=bool)], axis=1)
    additive = np.where(valid, 0.0, NEG_ATTENTION)[:, None, None, :]  # over keys

    hidden = [h]
    post_attention = []
    for block in encoder.blocks:
        a = _mha(block, h, additive, encoder.n_heads)
        if dropout_rate and training:
            a = T.dropout(a, dropout_rate, training_flag=True, rng=rng)
        a = T.layer_norm(T.add(h, a), block.ln1_gain, block.ln1_bias)
        post_attention.append(a)
        f = T.add(T.matmul(T.gelu(T.add(T.matmul(a, block.w1), block.b1)), block.w2), block.b2)
        if dropout_rate and training:
            f = T.dropout(f, dropout_rate, training_flag=True, rng=rng)
        h = T.layer_norm(T.add(a, f), block.ln2_gain, block.ln2_bias)
        hidden.append(h)

    pos = l if read_position is None else read_position
    state = _positions(h, pos)
    m = T.gelu(T.add(T.matmul(state, encoder.head_w), encoder.head_b))
    return m, EncoderActivations(hidden=hidden, post_attention=post_attention)


def encode_gru(encoder: EncoderParams, e: Tensor, real: np.ndarray):
    """Left-to-right gated recurrence from a zero state; pad steps are skipped
    by gating the state update, so left padding cannot change the outcome.
    Returns (final state (B, d), per-step states)."""
    if encoder.variant != "gru":
        raise ConfigError(f"encode_gru got variant {encoder.variant!r}")
    g = encoder.gru
    b, l, d = e.shape
    h = Tensor(np.zeros((b, d)))
    steps = []
    et = T.transpose(e, (1, 0, 2))
    for t in range(l):
        x = T.reshape(T.take_rows(et, np.array([t])), (b, d))
        z = T.sigmoid(T.add(T.add(T.matmul(x, g.wz), T.matmul(h, g.uz)), g.bz))
        r = T.sigmoid(T.add(T.add(T.matmul(x, g.wr), T.matmul(h, g.ur)), g.br))
        c = T.tanh_(T.add(T.add(T.matmul(x, g.wc), T.matmul(T.mul(r, h), g.uc)), g.bc))
        hn = T.add(h, T.mul(z, T.sub(c, h)))
        gate = real[:, t].astype(np.float64)[:, None]
        h = T.add(h, T.mul(gate, T.sub(hn, h)))
        steps.append(h)
    return h, EncoderActivations(hidden=steps, post_attention=[])


def encode(
    model: Model,
    batch: np.ndarray,
    training: bool = False,
    rng: np.random.Generator | None = None,
):
    """Embed + run the variant-appropriate encoder. batch: (B, max_len) padded."""
    cfg = model.config
    rate = cfg.dropout_rate if training else 0.0
    e, real = embed_sequence(model.table, batch, cfg.max_len, rate, training, rng)
    if cfg.variant == "transformer":
        return encode_transformer(model.encoder, model.table, e, real, rate, training, rng)
    return encode_gru(model.encoder, e, real)


def score(m: Tensor, table: EmbeddingTable) -> Tensor:
    """Relevance over all real items: r[j] = <m, e_j> + bias_j (shared table)."""
    items = T.take_rows(table.weights, np.arange(table.n_items))
    return T.add(T.matmul(m, T.transpose(items, (1, 0))), table.item_bias)


def score_candidates(m: Tensor, table: EmbeddingTable, candidates: np.ndarray) -> Tensor:
    """Scores for explicit candidate lists: (B, d) x (B, C) -> (B, C)."""
    b, c = candidates.shape
    e = T.take_rows(table.weights, candidates)  # (B, C, d)
    prod = T.sum_(T.mul(e, T.reshape(m, (b, 1, m.shape[1]))), axis=-1)
    bias = T.reshape(T.take_rows(T.reshape(table.item_bias, (table.n_items, 1)), candidates), (b, c))
    return T.add(prod, bias)


def named_parameters(model: Model) -> list[tuple[str, Tensor]]:
    """Stable-ordered learnable tensors; drives the optimizer and checkpoints."""
    t = model.table
    out = [("table.weights", t.weights), ("table.item_bias", t.item_bias)]
    if t.positional is not None:
        out.append(("table.positional", t.positional))
    if t.ln_gain is not None:
        out += [("table.ln_gain", t.ln_gain), ("table.ln_bias", t.ln_bias)]
    enc = model.encoder
    if enc.variant == "transformer":
        for i, blk in enumerate(enc.blocks):
            for f in ("wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo",
                      "ln1_gain", "ln1_bias", "w1", "b1", "w2", "b2", "ln2_gain", "ln2_bias"):
                out.append((f"encoder.blocks.{i}.{f}", getattr(blk, f)))
        out += [("encoder.head_w", enc.head_w), ("encoder.head_b", enc.head_b)]
    else:
        for f in ("wz", "uz", "bz", "wr", "ur", "br", "wc", "uc", "bc"):
            out.append((f"encoder.gru.{f}", getattr(enc.gru, f)))
    return out


def clone_model(model: Model) -> Model:
    """Deep copy with fresh numpy buffers (bitwise-equal values, no shared storage)."""
    copy = init_model(model.config, np.random.default_rng(0))
    src = dict(named_parameters(model))
    for name, tgt in named_parameters(copy):
        tgt.values = src[name].values.copy()
        tgt.grad = None
    copy.encoder.frozen = model.encoder.frozen
    return copy


def params_fingerprint(pairs) -> str:
    """sha256 over raw float64 bytes of (name, Tensor) pairs, order-stable."""
    h = hashlib.sha256()
    for name, t in pairs:
        h.update(name.encode())
        h.update(np.ascontiguousarray(t.values).tobytes())
    return h.hexdigest()


def catalog_hash(item_ids) -> str:
    payload = json.dumps(list(item_ids), separators=(",", ":")).encode()
    return hashlib.sha256(payload).hexdigest()


CHECKPOINT_VERSION = 1


def save_checkpoint(path, model: Model, cat_hash: str, kind: str, meta: dict | None = None) -> None:
    """Versioned JSON container: config, catalog hash, and every parameter.

    Floats serialize via repr so reloads are bitwise-exact for float64.
    """
    doc = {
        "version": CHECKPOINT_VERSION,
        "kind": kind,
        "catalog_hash": cat_hash,
        "config": {
            "variant": model.config.variant,
            "n_items": model.config.n_items,
            "d": model.config.d,
            "n_blocks": model.config.n_blocks,
            "n_heads": model.config.n_heads,
            "max_len": model.config.max_len,
            "dropout_rate": model.config.dropout_rate,
        },
        "params": {name: t.values.tolist() for name, t in named_parameters(model)},
        "meta": meta or {},
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, sort_keys=True, separators=(",", ":"))


def load_checkpoint(path, expected_catalog_hash: str | None = None):
    """Load a checkpoint -> (Model, meta dict, kind, catalog_hash).

    Refuses files written for a different catalog when an expected hash is
    given, and files with unknown version or parameter set.
    """
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("version") != CHECKPOINT_VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {doc.get('version')!r}")
    if expected_catalog_hash is not None and doc["catalog_hash"] != expected_catalog_hash:
        raise DataError(
            f"{path}: checkpoint was built for a different catalog "
            f"({doc['catalog_hash'][:12]}… vs expected {expected_catalog_hash[:12]}…)"
        )
    cfg = ModelConfig(**doc["config"])
    model = init_model(cfg, np.random.default_rng(0))
    stored = doc["params"]
    names = [n for n, _ in named_parameters(model)]
    if set(stored) != set(names):
        raise DataError(f"{path}: checkpoint parameter set does not match config")
    for name, t in named_parameters(model):
        arr = np.array(stored[name], dtype=np.float64)
        if arr.shape != t.values.shape:
            raise DataError(f"{path}: parameter {name} has shape {arr.shape}, expected {t.values.shape}")
        t.values = arr
    return model, doc.get("meta", {}), doc.get("kind", ""), doc["catalog_hash"]
