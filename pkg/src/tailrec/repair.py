"""Context-based repair of low-quality item embeddings.

A pretrained recommender embeds rarely-seen items badly. This module trains
an embedding-inference function on the *frequently* seen items — where the
pretrained rows are trustworthy targets — and then overwrites the rare-item
rows with inferred vectors. The function is two-stage:

  interpreter  one context window -> one semantic vector. Reuses the
               pretrained encoder's structure (and usually its frozen
               weights): reading the state at a masked slot is the same
               job as reading the user state during pretraining.
  aggregator   a set of window vectors -> one embedding. Self-attention
               without positional encoding (the set is unordered), mean
               pooled, then one affine layer back to d.

Training is few-shot on purpose: each step sees only a handful of windows
per target item, mimicking how little context the rare items actually have.
New items never seen in training get a row appended the same way, with no
gradient step anywhere.
"""

from __future__ import annotations

import hashlib
import json
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .data import ContextSet, ContextWindow
from .errors import ConfigError, DataError, TrainingError
from .model import (
    BlockParams,
    Model,
    ModelConfig,
    _init_block,
    _mha,
    EncoderParams,
    embed_sequence,
    encode_gru,
    encode_transformer,
    init_model,
    named_parameters,
    clone_model,
    params_fingerprint,
    trunc_normal,
)
from .optim import AdamState, adam_step
from .tensor import Tensor

__all__ = [
    "FewShotConfig",
    "InferenceTrainConfig",
    "InferenceFunction",
    "InferredEmbedding",
    "derive_window_sizes",
    "init_inference_function",
    "named_inference_parameters",
    "trainable_inference_parameters",
    "inference_fingerprint",
    "interpret_context",
    "aggregate",
    "infer_one",
    "train_inference_function",
    "reproduction_stats",
    "infer_embeddings",
    "apply_embeddings",
    "infer_new_item",
    "nearest_head_distance",
    "save_inference_function",
    "load_inference_function",
]


def derive_window_sizes(variant: str, max_len: int) -> tuple[int, int]:
    """Window extents (left, right) around a target occurrence.

    The attention variant reads a masked center, so the window is symmetric
    and must fit in max_len alongside the center slot. The recurrent variant
    only ever consumes left context (it predicts forward), so the right
    extent is zero.
    """
    if variant == "gru":
        return max_len - 1, 0
    return (max_len - 2) // 2, (max_len - 2) // 2


@dataclass(frozen=True)
class FewShotConfig:
    kappa_max: int = 10
    few_shot: bool = True  # off = feed every window each step (ablation)
    omega1: int | None = None  # None -> derived from the encoder variant
    omega2: int | None = None

    def __post_init__(self):
        if self.kappa_max < 1:
            raise ConfigError(f"kappa_max must be >= 1, got {self.kappa_max}")
        for name in ("omega1", "omega2"):
            v = getattr(self, name)
            if v is not None and v < 0:
                raise ConfigError(f"{name} must be >= 0, got {v}")

    def resolved_windows(self, variant: str, max_len: int) -> tuple[int, int]:
        w1, w2 = derive_window_sizes(variant, max_len)
        if self.omega1 is not None:
            w1 = self.omega1
        if self.omega2 is not None:
            w2 = self.omega2
        if w1 + w2 < 1:
            raise ConfigError("context windows must cover at least one item")
        return w1, w2


@dataclass(frozen=True)
class InferenceTrainConfig:
    epochs: int = 50
    learning_rate: float = 0.001
    warmup_steps: int = 100
    l2_coefficient: float = 0.0001
    dropout_rate: float = 0.1
    n_agg_blocks: int = 2
    n_agg_heads: int = 4
    seed: int = 0
    phi_alpha_init: str = "pretrained"  # "pretrained" | "scratch"
    phi_alpha_frozen: bool = True
    context_batch_cap: int = 64

    def __post_init__(self):
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")
        if self.n_agg_blocks < 1:
            raise ConfigError(f"need at least one aggregator block, got {self.n_agg_blocks}")
        if self.phi_alpha_init not in ("pretrained", "scratch"):
            raise ConfigError(f"unknown interpreter init {self.phi_alpha_init!r}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")
        if self.context_batch_cap < 1:
            raise ConfigError(f"context_batch_cap must be >= 1, got {self.context_batch_cap}")


@dataclass
class InferenceFunction:
    """Trained embedding-inference function: interpreter + aggregator."""

    variant: str
    d: int
    max_len: int
    omega1: int
    omega2: int
    kappa_max: int
    interpreter: EncoderParams  # .frozen controls whether training may touch it
    agg_blocks: list[BlockParams] = field(default_factory=list)
    agg_heads: int = 4
    out_w: Tensor | None = None
    out_b: Tensor | None = None
    init_source: str = "pretrained"
    interp_blocks: int = 0  # structural record for (de)serialization
    interp_heads: int = 0


@dataclass
class InferredEmbedding:
    item: int
    vector: np.ndarray
    provenance: str  # "original" | "inferred"


def _copy_encoder(encoder: EncoderParams) -> EncoderParams:
    def cp(t):
        return None if t is None else Tensor(t.values.copy())

    blocks = [
        BlockParams(**{f: cp(getattr(b, f)) for f in (
            "wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo",
            "ln1_gain", "ln1_bias", "w1", "b1", "w2", "b2", "ln2_gain", "ln2_bias")})
        for b in encoder.blocks
    ]
    gru = None
    if encoder.gru is not None:
        from .model import GruParams

        gru = GruParams(**{f: cp(getattr(encoder.gru, f)) for f in (
            "wz", "uz", "bz", "wr", "ur", "br", "wc", "uc", "bc")})
    return EncoderParams(
        variant=encoder.variant,
        n_heads=encoder.n_heads,
        blocks=blocks,
        gru=gru,
        head_w=cp(encoder.head_w),
        head_b=cp(encoder.head_b),
    )


def init_inference_function(
    model: Model,
    few_shot: FewShotConfig,
    cfg: InferenceTrainConfig,
    rng: np.random.Generator,
) -> InferenceFunction:
    d = model.config.d
    if d % cfg.n_agg_heads != 0:
        raise ConfigError(f"d={d} not divisible by n_agg_heads={cfg.n_agg_heads}")
    w1, w2 = few_shot.resolved_windows(model.config.variant, model.config.max_len)
    if cfg.phi_alpha_init == "pretrained":
        interpreter = _copy_encoder(model.encoder)
    else:
        scratch = init_model(model.config, rng)
        interpreter = scratch.encoder
    interpreter.frozen = cfg.phi_alpha_frozen
    agg_blocks = [_init_block(rng, d) for _ in range(cfg.n_agg_blocks)]
    return InferenceFunction(
        variant=model.config.variant,
        d=d,
        max_len=model.config.max_len,
        omega1=w1,
        omega2=w2,
        kappa_max=few_shot.kappa_max,
        interpreter=interpreter,
        agg_blocks=agg_blocks,
        agg_heads=cfg.n_agg_heads,
        out_w=Tensor(trunc_normal(rng, (d, d))),
        out_b=Tensor(np.zeros(d)),
        init_source=cfg.phi_alpha_init,
        interp_blocks=len(model.encoder.blocks),
        interp_heads=model.encoder.n_heads,
    )


_BLOCK_FIELDS = ("wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo",
                 "ln1_gain", "ln1_bias", "w1", "b1", "w2", "b2", "ln2_gain", "ln2_bias")
_GRU_FIELDS = ("wz", "uz", "bz", "wr", "ur", "br", "wc", "uc", "bc")


def named_inference_parameters(fn: InferenceFunction) -> list[tuple[str, Tensor]]:
    out = []
    if fn.variant == "transformer":
        for i, blk in enumerate(fn.interpreter.blocks):
            for f in _BLOCK_FIELDS:
                out.append((f"interpreter.blocks.{i}.{f}", getattr(blk, f)))
        out += [("interpreter.head_w", fn.interpreter.head_w),
                ("interpreter.head_b", fn.interpreter.head_b)]
    else:
        for f in _GRU_FIELDS:
            out.append((f"interpreter.gru.{f}", getattr(fn.interpreter.gru, f)))
    for i, blk in enumerate(fn.agg_blocks):
        for f in _BLOCK_FIELDS:
            out.append((f"agg.blocks.{i}.{f}", getattr(blk, f)))
    out += [("agg.out_w", fn.out_w), ("agg.out_b", fn.out_b)]
    return out


def trainable_inference_parameters(fn: InferenceFunction) -> list[tuple[str, Tensor]]:
    """Aggregator always trains; the interpreter joins only when unfrozen.
    The interpreter's user-state head is dead weight here (never on the
    forward path), so it is excluded even when unfrozen."""
    pairs = named_inference_parameters(fn)
    keep = []
    for name, t in pairs:
        if name.startswith("interpreter."):
            if fn.interpreter.frozen or name.startswith("interpreter.head_"):
                continue
        keep.append((name, t))
    return keep


def inference_fingerprint(fn: InferenceFunction) -> str:
    return params_fingerprint(named_inference_parameters(fn))


def _trim(fn: InferenceFunction, window: ContextWindow) -> tuple[tuple, tuple]:
    left = window.left[-fn.omega1:] if fn.omega1 else ()
    right = window.right[: fn.omega2] if fn.omega2 else ()
    return left, right


def _usable(fn: InferenceFunction, window: ContextWindow) -> bool:
    left, right = _trim(fn, window)
    if fn.variant == "gru":
        return len(left) > 0
    return len(left) + len(right) > 0


def interpret_context(
    fn: InferenceFunction,
    model: Model,
    windows,
    training: bool = False,
    rng: np.random.Generator | None = None,
    dropout_rate: float = 0.0,
) -> Tensor:
    """Encode context windows -> (K, d) semantic vectors.

    Attention variant: the window is laid out [left .. MASK .. right] and the
    final hidden state at the masked slot is read — the target's own row
    never enters the input. Recurrent variant: only the left context is fed
    and the final state is read. Item embeddings always come from the base
    model's table (a frozen featurizer); only fn.interpreter weights differ
    from the base encoder when scratch-initialized or fine-tuned.
    """
    if isinstance(windows, ContextWindow):
        windows = [windows]
    if not windows:
        raise DataError("no context windows to interpret")
    table = model.table
    ml = fn.max_len
    n = len(windows)
    rows = np.full((n, ml), table.pad_index, dtype=np.int64)
    centers = np.zeros(n, dtype=np.int64)
    for i, w in enumerate(windows):
        left, right = _trim(fn, w)
        if fn.variant == "gru":
            if len(left) == 0:
                raise DataError("empty context window (no left context for the recurrent variant)")
            rows[i, ml - len(left):] = left
        else:
            if len(left) == 0 and len(right) == 0:
                raise DataError("empty context window")
            seq = list(left) + [table.mask_index] + list(right)
            rows[i, ml - len(seq):] = seq
            centers[i] = ml - len(seq) + len(left)
    rate = dropout_rate if training else 0.0
    e, real = embed_sequence(table, rows, ml, rate, training, rng)
    if fn.variant == "gru":
        m, _ = encode_gru(fn.interpreter, e, real)
        return m
    _, acts = encode_transformer(fn.interpreter, table, e, real, rate, training, rng)
    h = acts.hidden[-1]  # (n, ml + 1, d)
    flat = T.reshape(h, (n * (ml + 1), fn.d))
    return T.take_rows(flat, np.arange(n) * (ml + 1) + centers)


def aggregate(
    fn: InferenceFunction,
    reprs: Tensor,
    training: bool = False,
    rng: np.random.Generator | None = None,
    dropout_rate: float = 0.0,
) -> Tensor:
    """Combine (K, d) window vectors into one (1, d) embedding.

    No positional encoding and a mean pool keep the stage permutation
    invariant: window order carries no information.
    """
    k, d = reprs.shape
    h = T.reshape(reprs, (1, k, d))
    additive = np.zeros((1, 1, 1, k))
    rate = dropout_rate if training else 0.0
    for block in fn.agg_blocks:
        a = _mha(block, h, additive, fn.agg_heads)
        if rate:
            a = T.dropout(a, rate, training_flag=True, rng=rng)
        a = T.layer_norm(T.add(h, a), block.ln1_gain, block.ln1_bias)
        f = T.add(T.matmul(T.gelu(T.add(T.matmul(a, block.w1), block.b1)), block.w2), block.b2)
        if rate:
            f = T.dropout(f, rate, training_flag=True, rng=rng)
        h = T.layer_norm(T.add(a, f), block.ln2_gain, block.ln2_bias)
    pooled = T.reshape(T.mean_(h, axis=1), (1, d))
    return T.add(T.matmul(pooled, fn.out_w), fn.out_b)


def infer_one(
    fn: InferenceFunction,
    model: Model,
    windows,
    rng: np.random.Generator | None = None,
    context_batch_cap: int = 64,
) -> np.ndarray:
    """Deterministic (eval-mode) embedding from a window list -> (d,) array.

    Items with more windows than the cap get a uniform subsample; the cap is
    a memory guard, not a modeling choice.
    """
    windows = [w for w in windows if _usable(fn, w)]
    if not windows:
        raise DataError("no usable context windows")
    if len(windows) > context_batch_cap:
        if rng is None:
            rng = np.random.default_rng(0)
        pick = rng.choice(len(windows), size=context_batch_cap, replace=False)
        windows = [windows[i] for i in np.sort(pick)]
    reps = interpret_context(fn, model, windows)
    return aggregate(fn, reps).values[0].copy()


def train_inference_function(
    model: Model,
    context_sets: list[ContextSet],
    few_shot: FewShotConfig,
    cfg: InferenceTrainConfig,
):
    """Fit the inference function so it reproduces the base model's embedding
    rows for the given target items from their contexts alone.

    Per epoch and per target item: draw kappa uniform in {1..min(K, kappa_max)},
    sample that many windows without replacement, minimize the squared L2
    distance to the item's pretrained lookup row (positional table excluded —
    the target is the row itself). Items with zero usable windows are skipped
    with a warning.

    Returns (fn, curve, skipped). curve[e] is a deterministic end-of-epoch
    measurement: eval-mode mean squared distance over a per-item window
    subset that is fixed up front, so the curve reflects optimization
    progress rather than the kappa-sampling noise of the training batches.
    """
    init_rng = np.random.default_rng([cfg.seed, 0])
    fn = init_inference_function(model, few_shot, cfg, init_rng)
    sample_rng = np.random.default_rng([cfg.seed, 1])
    drop_rng = np.random.default_rng([cfg.seed, 2])
    probe_rng = np.random.default_rng([cfg.seed, 3])

    usable: list[tuple[int, list[ContextWindow]]] = []
    skipped: list[int] = []
    for cs in context_sets:
        wins = [w for w in cs.windows if _usable(fn, w)]
        if wins:
            usable.append((cs.item, wins))
        else:
            skipped.append(cs.item)
    if skipped:
        warnings.warn(
            f"skipping {len(skipped)} target item(s) with no usable context windows",
            stacklevel=2,
        )
    if not usable:
        raise TrainingError("every target item has zero usable context windows")

    targets = {item: model.table.weights.values[item].copy() for item, _ in usable}
    # fixed per-item probe subsets for the reported curve (chosen once so the
    # end-of-epoch measurement is deterministic given the seed)
    probe: list[tuple[int, list[ContextWindow]]] = []
    for item, wins in usable:
        if len(wins) > few_shot.kappa_max:
            pick = probe_rng.choice(len(wins), size=few_shot.kappa_max, replace=False)
            wins = [wins[i] for i in np.sort(pick)]
        probe.append((item, wins))
    trainable = trainable_inference_parameters(fn)
    opt = AdamState(
        peak_lr=cfg.learning_rate,
        warmup_steps=cfg.warmup_steps,
        l2_coefficient=cfg.l2_coefficient,
    )
    base_params = named_parameters(model)
    frozen = fn.interpreter.frozen
    curve: list[float] = []

    for epoch in range(cfg.epochs):
        order = sample_rng.permutation(len(usable))
        for idx in order:
            item, wins = usable[idx]
            k_avail = len(wins)
            if few_shot.few_shot:
                kappa = int(sample_rng.integers(1, min(k_avail, few_shot.kappa_max) + 1))
            else:
                kappa = min(k_avail, cfg.context_batch_cap)
            pick = sample_rng.choice(k_avail, size=kappa, replace=False)
            chosen = [wins[i] for i in pick]
            if frozen:
                # outside the tape: gradient provably cannot reach the interpreter
                reps = interpret_context(fn, model, chosen)
            with T.Tape() as tape:
                if not frozen:
                    reps = interpret_context(
                        fn, model, chosen,
                        training=True, rng=drop_rng, dropout_rate=cfg.dropout_rate,
                    )
                e_hat = aggregate(fn, reps, training=True, rng=drop_rng,
                                  dropout_rate=cfg.dropout_rate)
                diff = T.sub(e_hat, targets[item][None, :])
                loss = T.sum_(T.mul(diff, diff))
                value = loss.item()
                if not np.isfinite(value):
                    raise TrainingError(
                        f"distance diverged (epoch {epoch}, item {item})"
                    )
                tape.backward(loss)
            try:
                adam_step(opt, [t for _, t in trainable])
            except FloatingPointError as exc:
                raise TrainingError(
                    f"training diverged (epoch {epoch}, item {item})"
                ) from exc
            T.reset_grads([t for _, t in trainable])
            if not frozen:
                # lookups route gradient into the base table; drop it, the
                # featurizer is not part of the trained function
                T.reset_grads([t for _, t in base_params])
        dists = []
        for item, wins in probe:
            e_hat = aggregate(fn, interpret_context(fn, model, wins)).values[0]
            delta = e_hat - targets[item]
            dists.append(float(np.dot(delta, delta)))
        curve.append(float(np.mean(dists)))
    return fn, curve, skipped


def reproduction_stats(
    fn: InferenceFunction,
    model: Model,
    context_sets: list[ContextSet],
    kappa: int | None = None,
    rng: np.random.Generator | None = None,
    context_batch_cap: int = 64,
) -> dict:
    """Eval-mode reproduction quality against the base model's rows.

    kappa=None uses every usable window (up to the cap); an integer samples
    that many per item, which is how the few-shot robustness of a trained
    function is probed. Items without usable windows are ignored.
    """
    if rng is None:
        rng = np.random.default_rng(0)
    sq, cos = [], []
    for cs in context_sets:
        wins = [w for w in cs.windows if _usable(fn, w)]
        if not wins:
            continue
        if kappa is not None and len(wins) > kappa:
            pick = rng.choice(len(wins), size=kappa, replace=False)
            wins = [wins[i] for i in np.sort(pick)]
        vec = infer_one(fn, model, wins, rng=rng, context_batch_cap=context_batch_cap)
        target = model.table.weights.values[cs.item]
        sq.append(float(np.sum((vec - target) ** 2)))
        denom = np.linalg.norm(vec) * np.linalg.norm(target)
        cos.append(float(np.dot(vec, target) / denom) if denom > 0 else 0.0)
    if not sq:
        raise DataError("no items with usable context windows to evaluate")
    return {
        "n_items": len(sq),
        "mean_sq_distance": float(np.mean(sq)),
        "mean_cosine": float(np.mean(cos)),
    }


def infer_embeddings(
    fn: InferenceFunction,
    model: Model,
    tail_context_sets: list[ContextSet],
    partition,
    rng: np.random.Generator | None = None,
    context_batch_cap: int = 64,
) -> list[InferredEmbedding]:
    """One entry per catalog item. Head rows pass through bitwise-original;
    tail rows with at least one usable window are replaced by the inferred
    vector; tail rows with none keep the pretrained row (still original)."""
    by_item = {cs.item: cs for cs in tail_context_sets}
    out = []
    head = set(partition.head_set)
    for item in range(model.config.n_items):
        if item in head:
            out.append(InferredEmbedding(item, model.table.weights.values[item].copy(), "original"))
            continue
        cs = by_item.get(item)
        wins = [w for w in cs.windows if _usable(fn, w)] if cs else []
        if not wins:
            out.append(InferredEmbedding(item, model.table.weights.values[item].copy(), "original"))
            continue
        vec = infer_one(fn, model, wins, rng=rng, context_batch_cap=context_batch_cap)
        out.append(InferredEmbedding(item, vec, "inferred"))
    return out


def apply_embeddings(model: Model, inferred: list[InferredEmbedding]) -> Model:
    """Fresh model with inferred rows written into the shared table.

    Only rows whose provenance is "inferred" change; every other parameter —
    including the scoring biases — is a bitwise copy. No fine-tuning happens
    after injection, so scores change exactly through the overwritten rows.
    """
    out = clone_model(model)
    d = model.config.d
    for entry in inferred:
        if entry.provenance != "inferred":
            continue
        vec = np.asarray(entry.vector, dtype=np.float64)
        if vec.shape != (d,):
            raise DataError(
                f"inferred vector for item {entry.item} has shape {vec.shape}, expected ({d},)"
            )
        if not 0 <= entry.item < model.config.n_items:
            raise DataError(f"inferred item index {entry.item} outside catalog")
        out.table.weights.values[entry.item] = vec
    return out


def infer_new_item(
    fn: InferenceFunction,
    model: Model,
    windows,
    rng: np.random.Generator | None = None,
    context_batch_cap: int = 64,
):
    """Zero-gradient embedding for an item the base model never saw.

    Windows may reference only known real items. Returns (entry, extended
    model): the new item takes the next dense index, its bias starts at 0,
    and the pad/[mask] rows shift up one slot. The input model is untouched.
    """
    if isinstance(windows, ContextWindow):
        windows = [windows]
    if not windows:
        raise DataError("no context windows for the new item")
    n = model.config.n_items
    for w in windows:
        for idx in list(w.left) + list(w.right):
            if not 0 <= idx < n:
                raise DataError(f"context window references unknown item index {idx}")
    vec = infer_one(fn, model, windows, rng=rng, context_batch_cap=context_batch_cap)

    cfg = model.config
    new_cfg = ModelConfig(
        variant=cfg.variant, n_items=n + 1, d=cfg.d, n_blocks=cfg.n_blocks,
        n_heads=cfg.n_heads, max_len=cfg.max_len, dropout_rate=cfg.dropout_rate,
    )
    extended = init_model(new_cfg, np.random.default_rng(0))
    src = dict(named_parameters(model))
    for name, tgt in named_parameters(extended):
        if name == "table.weights":
            w = src[name].values
            nw = np.empty((n + 3, cfg.d))
            nw[:n] = w[:n]
            nw[n] = vec
            nw[n + 1] = w[n]      # pad row
            nw[n + 2] = w[n + 1]  # [mask] row
            tgt.values = nw
        elif name == "table.item_bias":
            tgt.values = np.append(src[name].values, 0.0)
        else:
            tgt.values = src[name].values.copy()
        tgt.grad = None
    extended.encoder.frozen = model.encoder.frozen
    return InferredEmbedding(n, vec, "inferred"), extended


def nearest_head_distance(weights: np.ndarray, partition) -> float:
    """Mean Euclidean distance from each tail row to its closest head row."""
    head = weights[np.asarray(partition.head_set)]
    tail = weights[np.asarray(partition.tail_set)]
    # (T, H) pairwise distances; corpora here are small enough to do it flat
    d2 = np.sum(tail**2, axis=1)[:, None] - 2 * tail @ head.T + np.sum(head**2, axis=1)[None, :]
    return float(np.mean(np.sqrt(np.maximum(d2, 0.0)).min(axis=1)))


INFERENCE_CHECKPOINT_VERSION = 1


def save_inference_function(
    path,
    fn: InferenceFunction,
    source_fingerprint: str,
    catalog_hash: str = "",
    meta: dict | None = None,
) -> None:
    """Same JSON container idea as model checkpoints, tagged with the
    fingerprint of the base checkpoint the function was trained against."""
    doc = {
        "version": INFERENCE_CHECKPOINT_VERSION,
        "kind": "inference_function",
        "source_fingerprint": source_fingerprint,
        "catalog_hash": catalog_hash,
        "config": {
            "variant": fn.variant,
            "d": fn.d,
            "max_len": fn.max_len,
            "omega1": fn.omega1,
            "omega2": fn.omega2,
            "kappa_max": fn.kappa_max,
            "agg_heads": fn.agg_heads,
            "n_agg_blocks": len(fn.agg_blocks),
            "frozen": fn.interpreter.frozen,
            "init_source": fn.init_source,
            "interp_blocks": fn.interp_blocks,
            "interp_heads": fn.interp_heads,
        },
        "params": {name: t.values.tolist() for name, t in named_inference_parameters(fn)},
        "meta": meta or {},
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, sort_keys=True, separators=(",", ":"))


def _structural_fn(config: dict) -> InferenceFunction:
    """Rebuild an InferenceFunction skeleton (values filled by the caller)."""
    variant, d, ml = config["variant"], config["d"], config["max_len"]
    shell_cfg = ModelConfig(
        variant=variant, n_items=1, d=d,
        n_blocks=config["interp_blocks"] or 1,
        n_heads=config["interp_heads"] or 1,
        max_len=ml,
    )
    shell = init_model(shell_cfg, np.random.default_rng(0))
    interpreter = shell.encoder
    interpreter.frozen = config["frozen"]
    rng = np.random.default_rng(0)
    return InferenceFunction(
        variant=variant, d=d, max_len=ml,
        omega1=config["omega1"], omega2=config["omega2"],
        kappa_max=config["kappa_max"],
        interpreter=interpreter,
        agg_blocks=[_init_block(rng, d) for _ in range(config["n_agg_blocks"])],
        agg_heads=config["agg_heads"],
        out_w=Tensor(np.zeros((d, d))),
        out_b=Tensor(np.zeros(d)),
        init_source=config["init_source"],
        interp_blocks=config["interp_blocks"],
        interp_heads=config["interp_heads"],
    )


def load_inference_function(path, expected_source_fingerprint: str | None = None):
    """Load -> (fn, meta, source_fingerprint, catalog_hash). Refuses files
    whose recorded base-checkpoint fingerprint does not match the expected
    one — an inference function is only valid against the table it was
    trained to reproduce."""
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("version") != INFERENCE_CHECKPOINT_VERSION or doc.get("kind") != "inference_function":
        raise DataError(f"{path}: not an inference-function checkpoint")
    if (
        expected_source_fingerprint is not None
        and doc["source_fingerprint"] != expected_source_fingerprint
    ):
        raise DataError(
            f"{path}: trained against a different base checkpoint "
            f"({doc['source_fingerprint'][:12]}… vs expected {expected_source_fingerprint[:12]}…)"
        )
    fn = _structural_fn(doc["config"])
    stored = doc["params"]
    names = [n for n, _ in named_inference_parameters(fn)]
    if set(stored) != set(names):
        raise DataError(f"{path}: parameter set does not match recorded structure")
    for name, t in named_inference_parameters(fn):
        arr = np.array(stored[name], dtype=np.float64)
        if arr.shape != t.values.shape:
            raise DataError(f"{path}: parameter {name} has shape {arr.shape}, expected {t.values.shape}")
        t.values = arr
    return fn, doc.get("meta", {}), doc["source_fingerprint"], doc.get("catalog_hash", "")
