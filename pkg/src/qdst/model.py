"""Transformer encoder ranker with query-directed sparse attention.

Post-norm BERT-style layers::

    a   = LayerNorm(x + Dropout(SparseAttention(x)))
    out = LayerNorm(a + Dropout(W2 . gelu(W1 . a + b1) + b2))

The relevance score is a linear head on the final ``[CLS]`` vector.
Everything is plain numpy with hand-written reverse mode, so training
needs no autodiff framework.
"""

from __future__ import annotations

import enum
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from .attention import (
    AttentionWeights,
    ForwardCache,
    HeadConfig,
    sparse_attention_backward,
    sparse_attention_forward,
)
from .errors import CorruptModel, InvalidInput, NumericalError
from .pattern import PatternConfig, SequenceLayout, TokenRole, build_layout, build_pattern

LN_EPS = 1e-12
FORMAT_MAGIC = b"QDST"
FORMAT_VERSION = 1

_GELU_C = math.sqrt(2.0 / math.pi)


@dataclass(frozen=True)
class ModelConfig:
    num_layers: int
    dim: int
    num_heads: int
    vocab_size: int
    max_len: int = 2048
    dropout_rate: float = 0.1
    pattern: PatternConfig = field(default_factory=PatternConfig)

    def __post_init__(self):
        if self.num_layers < 0:
            raise InvalidInput("num_layers must be non-negative")
        if self.dim < 1 or self.num_heads < 1 or self.dim % self.num_heads:
            raise InvalidInput(f"dim={self.dim} must be a positive multiple of num_heads={self.num_heads}")
        if self.max_len < 3:
            raise InvalidInput("max_len must be at least 3")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise InvalidInput("dropout_rate must lie in [0, 1)")
        if self.vocab_size < 1:
            raise InvalidInput("vocab_size must be positive")

    @property
    def heads(self) -> HeadConfig:
        return HeadConfig.for_dim(self.dim, self.num_heads)

    @property
    def ffn_dim(self) -> int:
        return 4 * self.dim

    def to_dict(self) -> dict:
        return {
            "num_layers": self.num_layers,
            "dim": self.dim,
            "num_heads": self.num_heads,
            "vocab_size": self.vocab_size,
            "max_len": self.max_len,
            "dropout_rate": self.dropout_rate,
            "pattern": self.pattern.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        pattern = PatternConfig.from_dict(d.pop("pattern", {}))
        return cls(pattern=pattern, **d)


class LossKind(str, enum.Enum):
    POINTWISE_BCE = "pointwise_bce"
    PAIRWISE_SOFTMAX = "pairwise_softmax"


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-5
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 8
    max_steps: int = 1000
    seed: int = 0
    loss_kind: LossKind = LossKind.POINTWISE_BCE

    def __post_init__(self):
        object.__setattr__(self, "loss_kind", LossKind(self.loss_kind))
        if not self.learning_rate >= 0:
            raise InvalidInput("learning_rate must be non-negative")
        for b in (self.adam_beta1, self.adam_beta2):
            if not 0.0 < b < 1.0:
                raise InvalidInput("Adam betas must lie in (0, 1)")
        if self.batch_size < 1:
            raise InvalidInput("batch_size must be positive")


def _layer_names(l: int) -> List[str]:
    p = f"layers.{l}."
    return [p + s for s in ("w_q", "w_k", "w_v", "w_f", "ln1_g", "ln1_b", "w_1", "b_1", "w_2", "b_2", "ln2_g", "ln2_b")]


def param_names(config: ModelConfig) -> List[str]:
    names = ["tok_emb", "pos_emb"]
    for l in range(config.num_layers):
        names += _layer_names(l)
    return names + ["head_w", "head_b"]


def param_shapes(config: ModelConfig) -> Dict[str, Tuple[int, ...]]:
    d, f = config.dim, config.ffn_dim
    per_layer = {
        "w_q": (d, d), "w_k": (d, d), "w_v": (d, d), "w_f": (d, d),
        "ln1_g": (d,), "ln1_b": (d,),
        "w_1": (f, d), "b_1": (f,), "w_2": (d, f), "b_2": (d,),
        "ln2_g": (d,), "ln2_b": (d,),
    }
    shapes = {"tok_emb": (config.vocab_size, d), "pos_emb": (config.max_len, d)}
    for l in range(config.num_layers):
        for k, s in per_layer.items():
            shapes[f"layers.{l}.{k}"] = s
    shapes["head_w"] = (d,)
    shapes["head_b"] = (1,)
    return shapes


class ModelParams(dict):
    """Name -> array mapping in declaration order.

    A plain dict subclass so that optimizers and serializers can iterate it
    directly; the order matches :func:`param_names`.
    """

    @classmethod
    def initialize(cls, config: ModelConfig, seed: int = 0, dtype=np.float32, std: float = 0.02) -> "ModelParams":
        rng = np.random.default_rng(seed)
        params = cls()
        for name, shape in param_shapes(config).items():
            leaf = name.rsplit(".", 1)[-1]
            if leaf.endswith("_g"):
                arr = np.ones(shape)
            elif leaf.startswith("b_") or leaf.endswith("_b"):
                arr = np.zeros(shape)
            else:
                # truncated normal at two standard deviations
                arr = rng.normal(0.0, std, size=shape)
                bad = np.abs(arr) > 2 * std
                while bad.any():
                    arr[bad] = rng.normal(0.0, std, size=int(bad.sum()))
                    bad = np.abs(arr) > 2 * std
            params[name] = arr.astype(dtype)
        return params

    def copy(self) -> "ModelParams":
        return ModelParams((k, v.copy()) for k, v in self.items())

    def astype(self, dtype) -> "ModelParams":
        return ModelParams((k, v.astype(dtype)) for k, v in self.items())

    @property
    def dtype(self):
        return next(iter(self.values())).dtype

    def check(self, config: ModelConfig):
        shapes = param_shapes(config)
        if list(self.keys()) != list(shapes):
            raise InvalidInput("parameter names do not match the model config")
        for name, shape in shapes.items():
            if self[name].shape != shape:
                raise InvalidInput(f"{name} has shape {self[name].shape}, expected {shape}")

    def attention_weights(self, layer: int) -> AttentionWeights:
        p = f"layers.{layer}."
        return AttentionWeights(self[p + "w_q"], self[p + "w_k"], self[p + "w_v"], self[p + "w_f"])


# --- elementary pieces with their backward passes -------------------------


def _layer_norm(x, g, b):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LN_EPS)
    xhat = xc * inv
    return xhat * g + b, (xhat, inv, g)


def _layer_norm_backward(dy, cache):
    xhat, inv, g = cache
    dg = (dy * xhat).sum(axis=0)
    db = dy.sum(axis=0)
    dxhat = dy * g
    dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True) - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
    return dx, dg, db


def _gelu(x):
    # tanh approximation, as in the original BERT code; in place to spare temporaries
    t = x * x
    t *= 0.044715
    t += 1.0
    t *= x
    t *= _GELU_C
    np.tanh(t, out=t)
    y = t + 1.0
    y *= x
    y *= 0.5
    return y, t


def _gelu_backward(dy, x, t):
    # d/dx = 0.5 * ((1 + t) + x * (1 - t^2) * c * (1 + 3 * 0.044715 * x^2))
    dt = x * x
    dt *= 3 * 0.044715 * _GELU_C
    dt += _GELU_C
    g = t * t
    np.subtract(1.0, g, out=g)
    g *= x
    g *= dt
    g += t
    g += 1.0
    g *= 0.5
    g *= dy
    return g


def _dropout_mask(shape, rate, rng, dtype):
    if rate <= 0.0 or rng is None:
        return None
    keep = rng.random(shape) >= rate
    return keep.astype(dtype) / (1.0 - rate)


@dataclass
class _LayerCache:
    attn: ForwardCache
    drop1: Optional[np.ndarray]
    ln1: tuple
    pre_act: np.ndarray
    tanh: np.ndarray
    act: np.ndarray
    ln1_out: np.ndarray
    drop2: Optional[np.ndarray]
    ln2: tuple


@dataclass
class EncodeCache:
    layout: SequenceLayout
    layers: List[_LayerCache] = field(default_factory=list)


def _check_layout(layout: SequenceLayout, config: ModelConfig):
    if layout.n > config.max_len:
        raise InvalidInput(f"sequence of {layout.n} tokens exceeds max_len={config.max_len}")
    ids = layout.token_ids
    if ids.size and (ids.min() < 0 or ids.max() >= config.vocab_size):
        raise InvalidInput("token id outside the vocabulary")


def encode(
    layout: SequenceLayout,
    params: ModelParams,
    config: ModelConfig,
    record_trace: bool = False,
    rng: Optional[np.random.Generator] = None,
    cache: Optional[EncodeCache] = None,
    pattern=None,
):
    """Run the encoder; returns ``(hidden, traces)``.

    ``traces`` is a per-layer list of :class:`~qdst.attention.AttentionTrace`
    when ``record_trace`` is set, else None. Dropout is active only when an
    ``rng`` is supplied. Passing an :class:`EncodeCache` keeps what
    :func:`encode_backward` needs.
    """
    _check_layout(layout, config)
    if pattern is None:
        pattern = build_pattern(layout, config.pattern)
    heads = config.heads
    n = layout.n
    x = params["tok_emb"][layout.token_ids] + params["pos_emb"][:n]
    traces = [] if record_trace else None
    rate = config.dropout_rate
    if cache is not None:
        cache.layout = layout
        cache.layers = []
    for l in range(config.num_layers):
        p = f"layers.{l}."
        acache = ForwardCache() if cache is not None else None
        att, trace = sparse_attention_forward(
            x, params.attention_weights(l), heads, pattern, record_trace=record_trace, cache=acache
        )
        if record_trace:
            traces.append(trace)
        d1 = _dropout_mask(att.shape, rate, rng, x.dtype)
        if d1 is not None:
            att = att * d1
        a, ln1 = _layer_norm(x + att, params[p + "ln1_g"], params[p + "ln1_b"])
        pre = a @ params[p + "w_1"].T + params[p + "b_1"]
        act, t = _gelu(pre)
        ff = act @ params[p + "w_2"].T + params[p + "b_2"]
        d2 = _dropout_mask(ff.shape, rate, rng, x.dtype)
        if d2 is not None:
            ff = ff * d2
        out, ln2 = _layer_norm(a + ff, params[p + "ln2_g"], params[p + "ln2_b"])
        if cache is not None:
            cache.layers.append(_LayerCache(acache, d1, ln1, pre, t, act, a, d2, ln2))
        x = out
    return x, traces


def encode_backward(d_hidden: np.ndarray, params: ModelParams, config: ModelConfig, cache: EncodeCache) -> Dict[str, np.ndarray]:
    grads = {"tok_emb": np.zeros_like(params["tok_emb"]), "pos_emb": np.zeros_like(params["pos_emb"])}
    dx = d_hidden
    for l in reversed(range(config.num_layers)):
        p = f"layers.{l}."
        c = cache.layers[l]
        dsum, grads[p + "ln2_g"], grads[p + "ln2_b"] = _layer_norm_backward(dx, c.ln2)
        dff = dsum if c.drop2 is None else dsum * c.drop2
        grads[p + "w_2"] = dff.T @ c.act
        grads[p + "b_2"] = dff.sum(axis=0)
        dpre = _gelu_backward(dff @ params[p + "w_2"], c.pre_act, c.tanh)
        grads[p + "w_1"] = dpre.T @ c.ln1_out
        grads[p + "b_1"] = dpre.sum(axis=0)
        da = dsum + dpre @ params[p + "w_1"]
        dsum1, grads[p + "ln1_g"], grads[p + "ln1_b"] = _layer_norm_backward(da, c.ln1)
        datt = dsum1 if c.drop1 is None else dsum1 * c.drop1
        ag = sparse_attention_backward(datt, c.attn)
        grads[p + "w_q"], grads[p + "w_k"], grads[p + "w_v"], grads[p + "w_f"] = ag.w_q, ag.w_k, ag.w_v, ag.w_f
        dx = dsum1 + ag.d_h
    ids = cache.layout.token_ids
    np.add.at(grads["tok_emb"], ids, dx)
    grads["pos_emb"][: len(ids)] += dx
    grads["head_w"] = np.zeros_like(params["head_w"])
    grads["head_b"] = np.zeros_like(params["head_b"])
    return grads


def score_layout(layout: SequenceLayout, params: ModelParams, config: ModelConfig) -> float:
    hidden, _ = encode(layout, params, config)
    return float(hidden[0] @ params["head_w"] + params["head_b"][0])


def score(query_tokens: Sequence[int], doc_sentences: Sequence[Sequence[int]], params: ModelParams, config: ModelConfig) -> float:
    """Relevance f(q, d) read off the final [CLS] vector. No dropout."""
    layout = build_layout(query_tokens, doc_sentences, max_len=config.max_len)
    return score_layout(layout, params, config)


def score_with_grad(layout, params, config, d_score: float, rng=None):
    """Forward + backward for one layout; returns ``(score, grads)``.

    ``d_score`` is the upstream derivative of the loss w.r.t. the score.
    """
    cache = EncodeCache(layout)
    hidden, _ = encode(layout, params, config, rng=rng, cache=cache)
    s = float(hidden[0] @ params["head_w"] + params["head_b"][0])
    return s, _backward_from_score(hidden, params, config, cache, d_score)


def _backward_from_score(hidden, params, config, cache, d_score):
    dh = np.zeros_like(hidden)
    dh[0] = d_score * params["head_w"]
    grads = encode_backward(dh, params, config, cache)
    grads["head_w"] = (d_score * hidden[0]).astype(hidden.dtype)
    grads["head_b"] = np.array([d_score], dtype=hidden.dtype)
    return grads


# --- losses, optimizer, training ------------------------------------------


@dataclass
class PointwiseExample:
    query: Sequence[int]
    sentences: Sequence[Sequence[int]]
    label: float


@dataclass
class PairwiseExample:
    query: Sequence[int]
    positive: Sequence[Sequence[int]]
    negative: Sequence[Sequence[int]]


def _softplus(x: float) -> float:
    return max(x, 0.0) + np.log1p(np.exp(-abs(x)))


def _sigmoid(x: float) -> float:
    return 1.0 / (1.0 + np.exp(-x)) if x >= 0 else np.exp(x) / (1.0 + np.exp(x))


def pointwise_bce(score_value: float, label: float) -> Tuple[float, float]:
    """Sigmoid cross-entropy and its derivative w.r.t. the score."""
    return _softplus(score_value) - label * score_value, _sigmoid(score_value) - label


def pairwise_softmax(score_pos: float, score_neg: float) -> Tuple[float, float, float]:
    """``-log softmax`` of the positive over {pos, neg}, with both derivatives."""
    diff = score_neg - score_pos
    s = _sigmoid(diff)
    return _softplus(diff), -s, s


@dataclass
class AdamState:
    m: Dict[str, np.ndarray]
    v: Dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def zeros_like(cls, params: ModelParams) -> "AdamState":
        return cls({k: np.zeros_like(p) for k, p in params.items()}, {k: np.zeros_like(p) for k, p in params.items()})


def adam_update(params: ModelParams, grads: Dict[str, np.ndarray], state: AdamState, cfg: TrainConfig):
    state.step += 1
    b1, b2, lr = cfg.adam_beta1, cfg.adam_beta2, cfg.learning_rate
    corr1 = 1.0 - b1 ** state.step
    corr2 = 1.0 - b2 ** state.step
    for name, p in params.items():
        g = grads[name]
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        if lr:
            p -= (lr * (m / corr1) / (np.sqrt(v / corr2) + cfg.adam_eps)).astype(p.dtype)


def _accumulate(total, grads, scale):
    for k, g in grads.items():
        total[k] += scale * g


def _layout_for(config, query, sentences):
    return build_layout(query, sentences, max_len=config.max_len)


def batch_loss_and_grads(batch, params, config, train_config, rng=None):
    """Mean loss over ``batch`` and its gradient for every parameter."""
    if not batch:
        raise InvalidInput("empty batch")
    total = {k: np.zeros_like(v) for k, v in params.items()}
    loss = 0.0
    scale = 1.0 / len(batch)
    for ex in batch:
        if train_config.loss_kind is LossKind.POINTWISE_BCE:
            if not isinstance(ex, PointwiseExample):
                raise InvalidInput("pointwise loss needs PointwiseExample items")
            layout = _layout_for(config, ex.query, ex.sentences)
            cache = EncodeCache(layout)
            hidden, _ = encode(layout, params, config, rng=rng, cache=cache)
            s = float(hidden[0] @ params["head_w"] + params["head_b"][0])
            l, ds = pointwise_bce(s, float(ex.label))
            _accumulate(total, _backward_from_score(hidden, params, config, cache, ds), scale)
        else:
            if not isinstance(ex, PairwiseExample):
                raise InvalidInput("pairwise loss needs PairwiseExample items")
            out = []
            for sents in (ex.positive, ex.negative):
                layout = _layout_for(config, ex.query, sents)
                cache = EncodeCache(layout)
                hidden, _ = encode(layout, params, config, rng=rng, cache=cache)
                out.append((hidden, cache, float(hidden[0] @ params["head_w"] + params["head_b"][0])))
            l, d_pos, d_neg = pairwise_softmax(out[0][2], out[1][2])
            for (hidden, cache, _), d in zip(out, (d_pos, d_neg)):
                _accumulate(total, _backward_from_score(hidden, params, config, cache, d), scale)
        loss += scale * l
    return loss, total


def train_step(batch, params: ModelParams, opt_state: AdamState, train_config: TrainConfig, config: ModelConfig, rng=None):
    """One Adam step on ``batch``; updates ``params`` in place.

    Returns ``(params, loss)``. Dropout is applied when ``rng`` is given.
    """
    loss, grads = batch_loss_and_grads(batch, params, config, train_config, rng=rng)
    if not np.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads.values()):
        norms = {k: float(np.linalg.norm(g)) for k, g in grads.items()}
        raise NumericalError(
            f"non-finite loss or gradient at step {opt_state.step + 1}",
            {"loss": loss, "step": opt_state.step + 1, "grad_norms": norms},
        )
    adam_update(params, grads, opt_state, train_config)
    return params, loss


# --- persistence -------------------------------------------------------------

_DTYPES = {"float32": np.dtype("<f4"), "float64": np.dtype("<f8")}


def save_params(path: Union[str, Path], params: ModelParams, config: ModelConfig):
    """Write ``QDST | u32 version | u32 header length | JSON header | tensors``.

    Tensors are raw little-endian values in :func:`param_names` order. They
    are float32 unless the parameters are float64, which is stored as such
    so that round trips stay exact.
    """
    params.check(config)
    dtype_name = "float64" if params.dtype == np.float64 else "float32"
    header = {
        "config": config.to_dict(),
        "dtype": dtype_name,
        "tensors": [[name, list(params[name].shape)] for name in params],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(FORMAT_MAGIC)
        fh.write(struct.pack("<II", FORMAT_VERSION, len(blob)))
        fh.write(blob)
        for name in params:
            fh.write(np.ascontiguousarray(params[name], dtype=_DTYPES[dtype_name]).tobytes())


def load_params(path: Union[str, Path], expected_config: Optional[ModelConfig] = None) -> Tuple[ModelParams, ModelConfig]:
    data = Path(path).read_bytes()
    if len(data) < 12 or data[:4] != FORMAT_MAGIC:
        raise CorruptModel(f"{path}: not a QDST model file")
    version, hlen = struct.unpack("<II", data[4:12])
    if version != FORMAT_VERSION:
        raise CorruptModel(f"{path}: format version {version}, expected {FORMAT_VERSION}")
    if len(data) < 12 + hlen:
        raise CorruptModel(f"{path}: truncated header")
    try:
        header = json.loads(data[12:12 + hlen].decode("utf-8"))
        config = ModelConfig.from_dict(header["config"])
        dtype = _DTYPES[header["dtype"]]
        manifest = [(name, tuple(shape)) for name, shape in header["tensors"]]
    except (ValueError, KeyError, TypeError) as exc:
        raise CorruptModel(f"{path}: unreadable header ({exc})") from exc
    if expected_config is not None and expected_config != config:
        raise CorruptModel(
            f"{path}: config mismatch\n  file:     {config.to_dict()}\n  expected: {expected_config.to_dict()}"
        )
    if manifest != list(param_shapes(config).items()):
        raise CorruptModel(f"{path}: tensor manifest does not match the stored config")
    offset = 12 + hlen
    params = ModelParams()
    for name, shape in manifest:
        count = int(np.prod(shape))
        nbytes = count * dtype.itemsize
        if offset + nbytes > len(data):
            raise CorruptModel(f"{path}: truncated at tensor {name}")
        arr = np.frombuffer(data, dtype=dtype, count=count, offset=offset).reshape(shape)
        params[name] = arr.astype(dtype.newbyteorder("="))
        offset += nbytes
    if offset != len(data):
        raise CorruptModel(f"{path}: {len(data) - offset} trailing bytes")
    return params, config


class Ranker:
    """Frozen parameters plus config, scoring token-id inputs."""

    def __init__(self, params: ModelParams, config: ModelConfig):
        params.check(config)
        self.params = params
        self.config = config

    def score(self, query_tokens, doc_sentences) -> float:
        return score(query_tokens, doc_sentences, self.params, self.config)

    def encode(self, query_tokens, doc_sentences, record_trace=False):
        layout = build_layout(query_tokens, doc_sentences, max_len=self.config.max_len)
        hidden, traces = encode(layout, self.params, self.config, record_trace=record_trace)
        return layout, hidden, traces

    def save(self, path):
        save_params(path, self.params, self.config)

    @classmethod
    def load(cls, path, expected_config=None) -> "Ranker":
        params, config = load_params(path, expected_config)
        return cls(params, config)
