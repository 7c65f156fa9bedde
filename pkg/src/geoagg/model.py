"""Distance-aware set-attention regressor over geospatial point sequences.

An input sequence is the target point (row 0, its target value masked by a
learned placeholder) followed by nearby context points whose observed targets
are visible as features.  The forward pass is:

1. embed each point's covariates and (normalised) target value,
2. refresh the sequence through ``n_layers`` induced-point attention blocks,
   where ``m`` learnable summary tokens attend to the sequence and the
   sequence attends back, keeping the cost linear in sequence length,
3. aggregate into the target row with multi-head attention whose query/key
   vectors are rotated by a planar rotary encoding of the coordinates and
   whose logits are penalised by ``lam[h] * d2`` (one learnable nonnegative
   bias factor per head, or a single shared one in legacy mode), where ``d2``
   is the squared distance from the target to each sequence point,
4. map the aggregated vector through a small head (a linear bypass plus a
   tanh branch) and de-normalise to target units.

Coordinates influence the prediction only through the rotary rotation and the
distance penalty, so predictions are invariant to the target row's own target
value and to translations of the whole sequence (up to the rotary encoding's
relative-position property).

Parameters are plain named float64 matrices; the optimiser and the serialiser
treat them uniformly.  Inference over distinct sequences may run concurrently
because forward passes never mutate parameters.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, Tape, Var, _rope_apply, _rope_tables, _softmax
from .spatial import PointRecord

__all__ = [
    "ModelConfig",
    "ModelParams",
    "AttentionTrace",
    "init_params",
    "bind_params",
    "param_grads",
    "embed",
    "rope2d",
    "biased_attention",
    "induced_block",
    "forward",
    "forward_batch",
    "forward_on_tape",
    "save_params",
    "load_params",
]

PARAMS_FORMAT = "geoagg-params-v1"


@dataclass
class ModelConfig:
    """Architecture hyperparameters."""

    d_model: int = 32
    n_heads: int = 4
    n_inducing: int = 8
    l_max: int = 64
    n_layers: int = 2
    lambda_init: float = 1.0
    rope_base: float = 100.0
    legacy_single_abf: bool = False

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ContractError(
                f"d_model={self.d_model} must be divisible by n_heads={self.n_heads}"
            )
        if self.head_dim % 2 != 0:
            raise ContractError(f"head_dim={self.head_dim} must be even")
        if self.n_inducing < 1:
            raise ContractError("need at least one inducing point")
        if self.l_max < 2:
            raise ContractError("l_max must be at least 2")
        if self.n_layers < 1:
            raise ContractError("need at least one encoder layer")
        if self.lambda_init <= 0:
            raise ContractError("lambda_init must be positive")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads


@dataclass
class ModelParams:
    """Named trainable matrices plus fixed input/output normalisation constants."""

    arrays: dict[str, np.ndarray]
    norm: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def p(self) -> int:
        return self.arrays["embed_w"].shape[0] - 1

    def copy(self) -> "ModelParams":
        return ModelParams(
            arrays={k: v.copy() for k, v in self.arrays.items()},
            norm={k: v.copy() for k, v in self.norm.items()},
        )


@dataclass
class AttentionTrace:
    """Per-head attention weights of the target-aggregation pass."""

    alpha: np.ndarray  # (n_heads, n_q, L)


def _identity_norm(p: int) -> dict[str, np.ndarray]:
    return {
        "x_mean": np.zeros((1, p)),
        "x_std": np.ones((1, p)),
        "y_mean": np.zeros((1, 1)),
        "y_std": np.ones((1, 1)),
    }


def init_params(config: ModelConfig, p: int, rng: np.random.Generator) -> ModelParams:
    """Random initialisation for ``p`` covariates.

    Projections use 1/sqrt(fan_in) scaling; the output projections of the
    induced blocks and the tanh branch start at zero so the residual stream
    begins as the identity.
    """
    if p < 1:
        raise ContractError(f"need at least one covariate, got p={p}")
    d = config.d_model
    sd = 1.0 / np.sqrt(d)

    arrays: dict[str, np.ndarray] = {
        "embed_w": rng.normal(0.0, 1.0 / np.sqrt(p + 1), size=(p + 1, d)),
        "embed_b": np.zeros((1, d)),
        "y_mask": np.zeros((1, 1)),
    }
    for layer in range(config.n_layers):
        arrays[f"l{layer}.ind"] = rng.normal(0.0, 1.0, size=(config.n_inducing, d))
        for blk in ("a", "b"):
            arrays[f"l{layer}.{blk}.wq"] = rng.normal(0.0, sd, size=(d, d))
            arrays[f"l{layer}.{blk}.wk"] = rng.normal(0.0, sd, size=(d, d))
            arrays[f"l{layer}.{blk}.wv"] = rng.normal(0.0, sd, size=(d, d))
            arrays[f"l{layer}.{blk}.wo"] = np.zeros((d, d))
    arrays["agg.wq"] = rng.normal(0.0, sd, size=(d, d))
    arrays["agg.wk"] = rng.normal(0.0, sd, size=(d, d))
    arrays["agg.wv"] = rng.normal(0.0, sd, size=(d, d))
    arrays["agg.wo"] = rng.normal(0.0, sd, size=(d, d))
    lam_shape = (1, 1) if config.legacy_single_abf else (config.n_heads, 1)
    arrays["agg.lam_raw"] = np.full(lam_shape, ad.softplus_inv(config.lambda_init))
    arrays["head.w1"] = rng.normal(0.0, sd, size=(d, d))
    arrays["head.b1"] = np.zeros((1, d))
    arrays["head.w2"] = np.zeros((d, 1))
    arrays["head.w_lin"] = rng.normal(0.0, sd, size=(d, 1))
    arrays["head.b2"] = np.zeros((1, 1))

    return ModelParams(arrays=arrays, norm=_identity_norm(p))


class BoundParams:
    """Parameter matrices registered as slots on one tape."""

    def __init__(self, tape: Tape, params: ModelParams):
        self.vars = {name: tape.slot(arr) for name, arr in params.arrays.items()}
        self.norm = params.norm

    def __getitem__(self, name: str) -> Var:
        return self.vars[name]


def bind_params(tape: Tape, params: ModelParams) -> BoundParams:
    return BoundParams(tape, params)


def param_grads(tape: Tape, bound: BoundParams) -> dict[str, np.ndarray]:
    return {name: tape.grads[var.idx] for name, var in bound.vars.items()}


def _coords_of(sequence: list[PointRecord]) -> np.ndarray:
    coords = np.empty((len(sequence), 2))
    for i, rec in enumerate(sequence):
        coords[i, 0] = rec.u
        coords[i, 1] = rec.v
    return coords


def _features_of(sequence: list[PointRecord], p: int) -> np.ndarray:
    feats = np.zeros((len(sequence), p + 1))
    for i, rec in enumerate(sequence):
        if len(rec.x) != p:
            raise ContractError(
                f"record id {rec.id} carries {len(rec.x)} covariates, model expects {p}"
            )
        feats[i, :p] = rec.x
        if i > 0:
            if rec.y is None:
                raise ContractError(f"context record id {rec.id} lacks a target value")
            feats[i, p] = rec.y
    return feats


def embed(tape: Tape, bound: BoundParams, sequence: list[PointRecord]) -> Var:
    """Token embeddings for a sequence, target first with its target masked.

    Row i is ``W_e @ [x_normalised; y_normalised] + b``; row 0's target channel
    is the learned mask value instead of the point's actual target, so the
    embedding is invariant to the target row's y.
    """
    p = bound.norm["x_mean"].shape[1]
    feats = _features_of(sequence, p)
    feats[:, :p] = (feats[:, :p] - bound.norm["x_mean"]) / bound.norm["x_std"]
    feats[1:, p] = (feats[1:, p] - bound.norm["y_mean"][0, 0]) / bound.norm["y_std"][0, 0]
    feats[0, p] = 0.0

    mask_selector = np.zeros((len(sequence), p + 1))
    mask_selector[0, p] = 1.0
    fvar = ad.add_const(ad.mul_const(bound["y_mask"], mask_selector), feats)
    return ad.add(ad.matmul(fvar, bound["embed_w"]), bound["embed_b"])


def rope2d(x: Var, coords, base: float, block: int | None = None) -> Var:
    """Planar rotary rotation of query/key vectors (see :func:`autodiff.rope2d`)."""
    return ad.rope2d(x, coords, base, block)


def biased_attention(q: Var, k: Var, v: Var, sq_dist, lambdas: Var | None,
                     n_heads: int, w_out: Var | None = None,
                     want_trace: bool = False):
    """Multi-head attention with per-head squared-distance logit penalties.

    ``lambdas`` holds the already-nonnegative per-head bias factors (shape
    ``(n_heads, 1)``, or ``(1, 1)`` to share one across heads); pass ``None``
    together with ``sq_dist=None`` for plain attention.  Head outputs are
    concatenated and, when ``w_out`` is given, projected through it.
    """
    out, alpha = ad.multihead_attention(q, k, v, n_heads, lam=lambdas, sq_dist=sq_dist)
    if w_out is not None:
        out = ad.matmul(out, w_out)
    trace = AttentionTrace(alpha=alpha) if want_trace else None
    return out, trace


def induced_block(tokens: Var, inducing: Var, wq_a: Var, wk_a: Var, wv_a: Var,
                  wo_a: Var, wq_b: Var, wk_b: Var, wv_b: Var, wo_b: Var,
                  n_heads: int):
    """Induced-point attention block: summarise, then refresh.

    The inducing points attend to the tokens (m x L, plain attention since
    inducing points carry no coordinates) giving an updated summary; the
    tokens then attend back to the summary (L x m).  Both halves carry
    residual connections.  Cost is O(L * m) per call.
    """
    qa = ad.matmul(inducing, wq_a)
    ka = ad.matmul(tokens, wk_a)
    va = ad.matmul(tokens, wv_a)
    pooled, _ = ad.multihead_attention(qa, ka, va, n_heads)
    summary = ad.add(inducing, ad.matmul(pooled, wo_a))

    qb = ad.matmul(tokens, wq_b)
    kb = ad.matmul(summary, wk_b)
    vb = ad.matmul(summary, wv_b)
    spread, _ = ad.multihead_attention(qb, kb, vb, n_heads)
    refreshed = ad.add(tokens, ad.matmul(spread, wo_b))
    return summary, refreshed


def forward_on_tape(tape: Tape, bound: BoundParams, sequence: list[PointRecord],
                    config: ModelConfig, want_trace: bool = False):
    """Forward pass returning the scalar prediction as a tape Var."""
    if not sequence:
        raise ContractError("sequence must contain at least the target point")
    if len(sequence) > config.l_max:
        raise ContractError(
            f"sequence length {len(sequence)} exceeds l_max={config.l_max}"
        )
    coords = _coords_of(sequence)

    tokens = embed(tape, bound, sequence)
    for layer in range(config.n_layers):
        pref = f"l{layer}."
        _, tokens = induced_block(
            tokens, bound[pref + "ind"],
            bound[pref + "a.wq"], bound[pref + "a.wk"], bound[pref + "a.wv"],
            bound[pref + "a.wo"],
            bound[pref + "b.wq"], bound[pref + "b.wk"], bound[pref + "b.wv"],
            bound[pref + "b.wo"],
            config.n_heads,
        )

    target = ad.slice_rows(tokens, 0, 1)
    q = ad.matmul(target, bound["agg.wq"])
    k = ad.matmul(tokens, bound["agg.wk"])
    v = ad.matmul(tokens, bound["agg.wv"])
    q = ad.rope2d(q, coords[0:1], config.rope_base, config.head_dim)
    k = ad.rope2d(k, coords, config.rope_base, config.head_dim)
    sq_dist = ((coords - coords[0]) ** 2).sum(axis=1).reshape(1, -1)
    lam = ad.softplus(bound["agg.lam_raw"])
    agg, trace = biased_attention(
        q, k, v, sq_dist, lam, config.n_heads,
        w_out=bound["agg.wo"], want_trace=want_trace,
    )

    hidden = ad.tanh(ad.add(ad.matmul(agg, bound["head.w1"]), bound["head.b1"]))
    y_norm = ad.add(
        ad.add(ad.matmul(agg, bound["head.w_lin"]), ad.matmul(hidden, bound["head.w2"])),
        bound["head.b2"],
    )
    y_hat = ad.add_const(ad.mul_const(y_norm, bound.norm["y_std"]), bound.norm["y_mean"])
    return y_hat, trace


def forward(sequence: list[PointRecord], params: ModelParams, config: ModelConfig,
            want_trace: bool = False):
    """Scalar prediction for the target point (row 0) of an assembled sequence.

    Inference-only path: same arithmetic as :func:`forward_on_tape` without
    recording anything (no gradients), which keeps ensemble and explanation
    sweeps cheap.  The two paths are kept interchangeable by test.
    """
    if not sequence:
        raise ContractError("sequence must contain at least the target point")
    if len(sequence) > config.l_max:
        raise ContractError(
            f"sequence length {len(sequence)} exceeds l_max={config.l_max}"
        )
    arr = params.arrays
    norm = params.norm
    p = norm["x_mean"].shape[1]
    d = config.d_model
    n_heads = config.n_heads
    hd = config.head_dim

    coords = _coords_of(sequence)
    feats = _features_of(sequence, p)
    feats[:, :p] = (feats[:, :p] - norm["x_mean"]) / norm["x_std"]
    feats[1:, p] = (feats[1:, p] - norm["y_mean"][0, 0]) / norm["y_std"][0, 0]
    feats[0, p] = arr["y_mask"][0, 0]
    tokens = feats @ arr["embed_w"] + arr["embed_b"]

    def mha(q, k, v, lam=None, sq=None):
        nq = q.shape[0]
        length = k.shape[0]
        qh = q.reshape(nq, n_heads, hd).transpose(1, 0, 2)
        kh = k.reshape(length, n_heads, hd).transpose(1, 0, 2)
        vh = v.reshape(length, n_heads, hd).transpose(1, 0, 2)
        logits = (qh @ kh.transpose(0, 2, 1)) / math.sqrt(hd)
        if lam is not None:
            logits = logits - lam.reshape(-1, 1, 1) * sq
        alpha = _softmax(logits)
        return (alpha @ vh).transpose(1, 0, 2).reshape(nq, d), alpha

    for layer in range(config.n_layers):
        pref = f"l{layer}."
        ind = arr[pref + "ind"]
        pooled, _ = mha(ind @ arr[pref + "a.wq"], tokens @ arr[pref + "a.wk"],
                        tokens @ arr[pref + "a.wv"])
        summary = ind + pooled @ arr[pref + "a.wo"]
        spread, _ = mha(tokens @ arr[pref + "b.wq"], summary @ arr[pref + "b.wk"],
                        summary @ arr[pref + "b.wv"])
        tokens = tokens + spread @ arr[pref + "b.wo"]

    q = tokens[0:1] @ arr["agg.wq"]
    k = tokens @ arr["agg.wk"]
    v = tokens @ arr["agg.wv"]
    cos_q, sin_q = _rope_tables(coords[0:1], d, config.rope_base, hd)
    cos_k, sin_k = _rope_tables(coords, d, config.rope_base, hd)
    q = _rope_apply(q, cos_q, sin_q)
    k = _rope_apply(k, cos_k, sin_k)
    sq_dist = ((coords - coords[0]) ** 2).sum(axis=1).reshape(1, -1)
    lam = np.logaddexp(0.0, arr["agg.lam_raw"])
    agg_heads, alpha = mha(q, k, v, lam=lam, sq=sq_dist)
    agg = agg_heads @ arr["agg.wo"]

    hidden = np.tanh(agg @ arr["head.w1"] + arr["head.b1"])
    y_norm = agg @ arr["head.w_lin"] + hidden @ arr["head.w2"] + arr["head.b2"]
    y_hat = float((y_norm * norm["y_std"] + norm["y_mean"])[0, 0])
    trace = AttentionTrace(alpha=alpha.copy()) if want_trace else None
    return y_hat, trace


def forward_batch(feats, coords, params: ModelParams, config: ModelConfig) -> np.ndarray:
    """Vectorised inference over a stack of equal-length sequences.

    ``feats`` is ``(B, L, p + 1)`` of raw covariates plus the observed target
    in the last channel (the target row's channel is ignored and masked), and
    ``coords`` is ``(B, L, 2)``.  Returns ``(B,)`` predictions identical to
    calling :func:`forward` on each sequence; ensemble members and explainer
    rows ride through here in one pass.
    """
    feats = np.asarray(feats, dtype=np.float64)
    coords = np.asarray(coords, dtype=np.float64)
    if feats.ndim != 3 or coords.shape != feats.shape[:2] + (2,):
        raise ContractError(
            f"forward_batch: feats {feats.shape} and coords {coords.shape} disagree"
        )
    arr = params.arrays
    norm = params.norm
    p = norm["x_mean"].shape[1]
    if feats.shape[2] != p + 1:
        raise ContractError(
            f"forward_batch: {feats.shape[2] - 1} covariate channels, model expects {p}"
        )
    n_batch, length, _ = feats.shape
    if length > config.l_max:
        raise ContractError(f"sequence length {length} exceeds l_max={config.l_max}")
    d = config.d_model
    n_heads = config.n_heads
    hd = config.head_dim

    feats = feats.copy()
    feats[..., :p] = (feats[..., :p] - norm["x_mean"]) / norm["x_std"]
    feats[:, 1:, p] = (feats[:, 1:, p] - norm["y_mean"][0, 0]) / norm["y_std"][0, 0]
    feats[:, 0, p] = arr["y_mask"][0, 0]
    tokens = feats @ arr["embed_w"] + arr["embed_b"]

    def heads(x):
        return x.reshape(x.shape[:-1] + (n_heads, hd)).swapaxes(-3, -2)

    def mha(q, k, v, lam=None, sq=None):
        logits = (heads(q) @ heads(k).swapaxes(-2, -1)) / math.sqrt(hd)
        if lam is not None:
            logits = logits - lam.reshape(-1, 1, 1) * sq[:, None, :, :]
        alpha = _softmax(logits)
        out = alpha @ heads(v)
        return out.swapaxes(-3, -2).reshape(out.shape[:-3] + (-1, d))

    for layer in range(config.n_layers):
        pref = f"l{layer}."
        ind = arr[pref + "ind"]
        pooled = mha(ind @ arr[pref + "a.wq"], tokens @ arr[pref + "a.wk"],
                     tokens @ arr[pref + "a.wv"])
        summary = ind + pooled @ arr[pref + "a.wo"]
        spread = mha(tokens @ arr[pref + "b.wq"], summary @ arr[pref + "b.wk"],
                     summary @ arr[pref + "b.wv"])
        tokens = tokens + spread @ arr[pref + "b.wo"]

    q = tokens[:, 0:1, :] @ arr["agg.wq"]
    k = tokens @ arr["agg.wk"]
    v = tokens @ arr["agg.wv"]
    cos_q, sin_q = _rope_tables(coords[:, 0:1, :], d, config.rope_base, hd)
    cos_k, sin_k = _rope_tables(coords, d, config.rope_base, hd)
    q = _rope_apply(q, cos_q, sin_q)
    k = _rope_apply(k, cos_k, sin_k)
    sq_dist = ((coords - coords[:, 0:1, :]) ** 2).sum(axis=-1)[:, None, :]
    lam = np.logaddexp(0.0, arr["agg.lam_raw"])
    agg = mha(q, k, v, lam=lam, sq=sq_dist) @ arr["agg.wo"]

    hidden = np.tanh(agg @ arr["head.w1"] + arr["head.b1"])
    y_norm = agg @ arr["head.w_lin"] + hidden @ arr["head.w2"] + arr["head.b2"]
    return (y_norm * norm["y_std"] + norm["y_mean"]).reshape(n_batch)


# ---------------------------------------------------------------------------
# serialisation
# ---------------------------------------------------------------------------


def save_params(path, params: ModelParams, config: ModelConfig,
                train_config: dict | None = None) -> None:
    """Self-describing JSON snapshot: format tag, configs, named row-major arrays."""
    doc = {
        "format": PARAMS_FORMAT,
        "model_config": asdict(config),
        "train_config": train_config,
        "arrays": {k: v.tolist() for k, v in params.arrays.items()},
        "constants": {k: v.tolist() for k, v in params.norm.items()},
    }
    Path(path).write_text(json.dumps(doc, sort_keys=True) + "\n", encoding="utf-8")


def load_params(path):
    """Inverse of :func:`save_params`: ``(params, config, train_config_dict)``."""
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    if doc.get("format") != PARAMS_FORMAT:
        raise ContractError(
            f"unsupported parameter file format {doc.get('format')!r}, "
            f"expected {PARAMS_FORMAT!r}"
        )
    config = ModelConfig(**doc["model_config"])
    params = ModelParams(
        arrays={k: np.array(v, dtype=np.float64) for k, v in doc["arrays"].items()},
        norm={k: np.array(v, dtype=np.float64) for k, v in doc["constants"].items()},
    )
    return params, config, doc.get("train_config")
