"""Desk-scale differentiable encoder-decoder with graph-knowledge injection.

Three enhancement mechanisms over a windowed-attention transformer:

* ``decoder_attn`` - every decoder layer runs a second cross-attention over
  the graph encoder output, queried by the standard cross-attention output;
  its output projection starts at zero so an enhanced model's logits match
  the base model bit-for-bit until training moves them.
* ``doc_enhance`` - the graph embedding rows are appended to the document
  embedding and passed through one extra full-attention encoder layer, mixed
  back as ``p * layer_out + (1 - p) * concat``.
* ``text_aug`` - handled upstream by prepending rendered concept definitions
  to the input text; the model only sees the doubled input budget.

The graph encoder is a stack of attention layers over node features:
intermediate layers concatenate heads and apply ELU, the final layer
averages heads with no nonlinearity.
"""
from __future__ import annotations

import base64
import hashlib
import json
import math
import warnings
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .autograd import (
    Tensor,
    add,
    concat,
    constant,
    cross_entropy_sum,
    elu,
    embedding,
    gelu,
    layer_norm,
    leaky_relu,
    matmul,
    narrow,
    parameter,
    scale,
    softmax,
    transpose,
)
from .errors import CheckpointError, ModelConfigError
from .graph import GraphFeatures

ENHANCEMENTS = ("text_aug", "doc_enhance", "decoder_attn")

PAD_ID = 0
BOS_ID = 1
EOS_ID = 2
UNK_ID = 3
SPECIAL_TOKENS = ("<pad>", "<bos>", "<eos>", "<unk>")

_NEG_INF = -1e30


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    d_model: int = 64
    n_heads: int = 4
    n_enc_layers: int = 2
    n_dec_layers: int = 2
    attention_window: int = 128  # 0 = full attention
    max_input_tokens: int = 512
    gat_layers: int = 3
    gat_heads: int = 4
    enhancement: frozenset[str] = frozenset()
    p: float = 0.25
    d_text: int = 64
    rwpe_K: int = 8
    seed: int = 0

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ModelConfigError("d_model must be divisible by n_heads")
        if self.d_model % self.gat_heads != 0:
            raise ModelConfigError("d_model must be divisible by gat_heads")
        if not 0.0 <= self.p <= 1.0:
            raise ModelConfigError("p must lie in [0, 1]")
        if self.attention_window < 0 or self.attention_window % 2 != 0:
            raise ModelConfigError("attention_window must be even or 0")
        unknown = set(self.enhancement) - set(ENHANCEMENTS)
        if unknown:
            raise ModelConfigError(f"unknown enhancement flags: {sorted(unknown)}")
        object.__setattr__(self, "enhancement", frozenset(self.enhancement))

    @property
    def effective_max_input(self) -> int:
        return self.max_input_tokens * (2 if "text_aug" in self.enhancement else 1)

    @property
    def uses_graph(self) -> bool:
        return bool({"doc_enhance", "decoder_attn"} & self.enhancement)

    @property
    def node_feature_dim(self) -> int:
        return self.d_text + 5 + self.rwpe_K

    def to_json_dict(self) -> dict:
        d = {
            "vocab_size": self.vocab_size,
            "d_model": self.d_model,
            "n_heads": self.n_heads,
            "n_enc_layers": self.n_enc_layers,
            "n_dec_layers": self.n_dec_layers,
            "attention_window": self.attention_window,
            "max_input_tokens": self.max_input_tokens,
            "gat_layers": self.gat_layers,
            "gat_heads": self.gat_heads,
            "enhancement": sorted(self.enhancement),
            "p": self.p,
            "d_text": self.d_text,
            "rwpe_K": self.rwpe_K,
            "seed": self.seed,
        }
        return d

    @classmethod
    def from_json_dict(cls, d: Mapping) -> "ModelConfig":
        kwargs = dict(d)
        kwargs["enhancement"] = frozenset(kwargs.get("enhancement", ()))
        return cls(**kwargs)


def variant_label(enhancement: Iterable[str]) -> str:
    flags = [e for e in ENHANCEMENTS if e in set(enhancement)]
    if not flags:
        return "base"
    return "+".join(f.replace("_", "-") for f in flags)


class Vocab:
    """Token <-> id mapping with pad/bos/eos/unk specials."""

    def __init__(self, tokens: Sequence[str]):
        self.tokens = list(SPECIAL_TOKENS) + [t for t in tokens if t not in SPECIAL_TOKENS]
        self.index = {t: i for i, t in enumerate(self.tokens)}

    def __len__(self) -> int:
        return len(self.tokens)

    def encode(self, surfaces: Sequence[str]) -> np.ndarray:
        return np.array([self.index.get(s, UNK_ID) for s in surfaces], dtype=np.int64)

    def decode(self, ids: Sequence[int]) -> list[str]:
        out = []
        for i in ids:
            if i in (PAD_ID, BOS_ID, EOS_ID):
                continue
            out.append(self.tokens[int(i)])
        return out


# ---------------------------------------------------------------------------
# Parameter initialization

_INIT_STD = 0.02


def _rng_for(seed: int, name: str) -> np.random.Generator:
    digest = hashlib.blake2b(f"{seed}:{name}".encode("utf-8"), digest_size=8).digest()
    return np.random.default_rng(int.from_bytes(digest, "big"))


def _weight(params: dict[str, Tensor], seed: int, name: str, shape: tuple[int, ...], std=_INIT_STD):
    params[name] = parameter(_rng_for(seed, name).normal(0.0, std, size=shape))


def _zeros(params: dict[str, Tensor], name: str, shape: tuple[int, ...]):
    params[name] = parameter(np.zeros(shape))


def _ones(params: dict[str, Tensor], name: str, shape: tuple[int, ...]):
    params[name] = parameter(np.ones(shape))


def _attn_params(params, seed, prefix, d):
    for w in ("Wq", "Wk", "Wv", "Wo"):
        _weight(params, seed, f"{prefix}.{w}", (d, d))
    for b in ("bq", "bk", "bv", "bo"):
        _zeros(params, f"{prefix}.{b}", (d,))


def _ln_params(params, prefix, d):
    _ones(params, f"{prefix}.g", (d,))
    _zeros(params, f"{prefix}.b", (d,))


def _ffn_params(params, seed, prefix, d):
    _weight(params, seed, f"{prefix}.W1", (d, 4 * d))
    _zeros(params, f"{prefix}.b1", (4 * d,))
    _weight(params, seed, f"{prefix}.W2", (4 * d, d))
    _zeros(params, f"{prefix}.b2", (d,))


def init_params(config: ModelConfig) -> dict[str, Tensor]:
    """Create all parameters.

    Every parameter is drawn from an RNG seeded by (config.seed, name), so
    shapes shared between enhancement variants initialize identically; the
    graph cross-attention output projection starts at zero.
    """
    d = config.d_model
    seed = config.seed
    params: dict[str, Tensor] = {}
    _weight(params, seed, "embed.tok", (config.vocab_size, d))
    _zeros(params, "out.b", (config.vocab_size,))
    for i in range(config.n_enc_layers):
        _attn_params(params, seed, f"enc.{i}.attn", d)
        _ln_params(params, f"enc.{i}.ln_attn", d)
        _ffn_params(params, seed, f"enc.{i}.ffn", d)
        _ln_params(params, f"enc.{i}.ln_ffn", d)
    _ln_params(params, "enc.ln_out", d)
    for i in range(config.n_dec_layers):
        _attn_params(params, seed, f"dec.{i}.self", d)
        _ln_params(params, f"dec.{i}.ln_self", d)
        _attn_params(params, seed, f"dec.{i}.cross", d)
        _ln_params(params, f"dec.{i}.ln_cross", d)
        if "decoder_attn" in config.enhancement:
            _attn_params(params, seed, f"dec.{i}.graph", d)
            params[f"dec.{i}.graph.Wo"] = parameter(np.zeros((d, d)))
            _ln_params(params, f"dec.{i}.ln_graph", d)
        _ffn_params(params, seed, f"dec.{i}.ffn", d)
        _ln_params(params, f"dec.{i}.ln_ffn", d)
    _ln_params(params, "dec.ln_out", d)
    if config.uses_graph:
        _weight(params, seed, "gat.in.W", (config.node_feature_dim, d))
        _zeros(params, "gat.in.b", (d,))
        head_dim = d // config.gat_heads
        d_in = d
        for l in range(config.gat_layers):
            final = l == config.gat_layers - 1
            per_head = d if final else head_dim
            _weight(params, seed, f"gat.{l}.W", (d_in, config.gat_heads * per_head))
            _weight(params, seed, f"gat.{l}.a_src", (config.gat_heads * per_head, 1))
            _weight(params, seed, f"gat.{l}.a_dst", (config.gat_heads * per_head, 1))
            _zeros(params, f"gat.{l}.b", (d,))
            d_in = d
    if "doc_enhance" in config.enhancement:
        _attn_params(params, seed, "denh.attn", d)
        _ln_params(params, "denh.ln_attn", d)
        _ffn_params(params, seed, "denh.ffn", d)
        _ln_params(params, "denh.ln_ffn", d)
    return params


# ---------------------------------------------------------------------------
# Masks and positions


@lru_cache(maxsize=64)
def _band_mask(length: int, window: int, causal: bool) -> np.ndarray:
    """Additive attention mask: 0 where allowed, a large negative elsewhere.

    window 0 means full attention; otherwise position i may see positions
    within +-window//2.  ``causal`` additionally hides the future.
    """
    i = np.arange(length)[:, None]
    j = np.arange(length)[None, :]
    allowed = np.ones((length, length), dtype=bool)
    if window > 0:
        allowed &= np.abs(i - j) <= window // 2
    if causal:
        allowed &= j <= i
    return np.where(allowed, 0.0, _NEG_INF)


@lru_cache(maxsize=8)
def _positional(max_len: int, d_model: int) -> np.ndarray:
    pos = np.arange(max_len)[:, None].astype(np.float64)
    dim = np.arange(d_model)[None, :].astype(np.float64)
    angle = pos / np.power(10000.0, 2 * (dim // 2) / d_model)
    enc = np.where(dim % 2 == 0, np.sin(angle), np.cos(angle))
    return enc


# ---------------------------------------------------------------------------
# Attention blocks


def multi_head_attention(
    q_in: Tensor,
    kv_in: Tensor,
    params: Mapping[str, Tensor],
    prefix: str,
    n_heads: int,
    mask: np.ndarray | None = None,
) -> Tensor:
    d = q_in.shape[1]
    head_dim = d // n_heads
    q = add(matmul(q_in, params[f"{prefix}.Wq"]), params[f"{prefix}.bq"])
    k = add(matmul(kv_in, params[f"{prefix}.Wk"]), params[f"{prefix}.bk"])
    v = add(matmul(kv_in, params[f"{prefix}.Wv"]), params[f"{prefix}.bv"])
    mask_t = constant(mask) if mask is not None else None
    heads = []
    for h in range(n_heads):
        qh = narrow(q, 1, h * head_dim, head_dim)
        kh = narrow(k, 1, h * head_dim, head_dim)
        vh = narrow(v, 1, h * head_dim, head_dim)
        scores = scale(matmul(qh, transpose(kh)), 1.0 / math.sqrt(head_dim))
        if mask_t is not None:
            scores = add(scores, mask_t)
        heads.append(matmul(softmax(scores), vh))
    merged = concat(heads, axis=1)
    return add(matmul(merged, params[f"{prefix}.Wo"]), params[f"{prefix}.bo"])


def windowed_self_attention(
    x: Tensor,
    params: Mapping[str, Tensor],
    prefix: str,
    n_heads: int,
    window: int,
    causal: bool = False,
) -> Tensor:
    mask = _band_mask(x.shape[0], window, causal)
    return multi_head_attention(x, x, params, prefix, n_heads, mask)


def _ffn(x: Tensor, params: Mapping[str, Tensor], prefix: str) -> Tensor:
    h = gelu(add(matmul(x, params[f"{prefix}.W1"]), params[f"{prefix}.b1"]))
    return add(matmul(h, params[f"{prefix}.W2"]), params[f"{prefix}.b2"])


def _ln(x: Tensor, params: Mapping[str, Tensor], prefix: str) -> Tensor:
    return layer_norm(x, params[f"{prefix}.g"], params[f"{prefix}.b"])


def encoder_layer(
    x: Tensor,
    params: Mapping[str, Tensor],
    prefix: str,
    n_heads: int,
    window: int,
) -> Tensor:
    """Pre-norm transformer encoder layer with windowed self-attention."""
    x = add(x, windowed_self_attention(_ln(x, params, f"{prefix}.ln_attn"), params, f"{prefix}.attn", n_heads, window))
    x = add(x, _ffn(_ln(x, params, f"{prefix}.ln_ffn"), params, f"{prefix}.ffn"))
    return x


def encode(token_ids: Sequence[int] | np.ndarray, params: Mapping[str, Tensor], config: ModelConfig) -> Tensor:
    """Document embedding H_X: pre-norm encoder stack over embedded tokens."""
    ids = np.asarray(token_ids, dtype=np.int64)
    if ids.size == 0:
        raise ModelConfigError("encode requires a non-empty token sequence")
    limit = config.effective_max_input
    if ids.size > limit:
        warnings.warn(f"input of {ids.size} tokens truncated to {limit}", stacklevel=2)
        ids = ids[:limit]
    x = scale(embedding(params["embed.tok"], ids), math.sqrt(config.d_model))
    x = add(x, constant(_positional(int(ids.size), config.d_model)))
    for i in range(config.n_enc_layers):
        x = encoder_layer(x, params, f"enc.{i}", config.n_heads, config.attention_window)
    return _ln(x, params, "enc.ln_out")


# ---------------------------------------------------------------------------
# Graph encoder


def prepare_gat_mask(edges: Sequence[tuple[int, int]], n_nodes: int) -> np.ndarray:
    """Additive attention mask over the symmetrized edge set with self-loops."""
    mask = np.full((n_nodes, n_nodes), _NEG_INF)
    np.fill_diagonal(mask, 0.0)
    for s, d in edges:
        mask[s, d] = 0.0
        mask[d, s] = 0.0
    return mask


def gat_layer(
    h: Tensor,
    mask: np.ndarray,
    params: Mapping[str, Tensor],
    prefix: str,
    heads: int,
    head_dim: int,
    final: bool,
) -> Tensor:
    """One graph attention layer over a dense neighborhood mask.

    Per head: scores LeakyReLU(a_src . Wh_i + a_dst . Wh_j) are softmaxed
    over the in-neighborhood (self-loop included) and used to average the
    projected neighbor features.  Intermediate layers concatenate heads and
    apply ELU; the final layer averages heads with no nonlinearity.
    """
    n = h.shape[0]
    if mask.shape != (n, n):
        raise ModelConfigError("gat mask shape does not match node count")
    assert np.all(mask.max(axis=1) > _NEG_INF / 2), "node without any in-edge after self-loops"
    wh = matmul(h, params[f"{prefix}.W"])
    mask_t = constant(mask)
    outs = []
    for k in range(heads):
        wh_k = narrow(wh, 1, k * head_dim, head_dim)
        s = matmul(wh_k, narrow(params[f"{prefix}.a_src"], 0, k * head_dim, head_dim))
        t = matmul(wh_k, narrow(params[f"{prefix}.a_dst"], 0, k * head_dim, head_dim))
        scores = leaky_relu(add(s, transpose(t)), 0.2)
        alpha = softmax(add(scores, mask_t))
        outs.append(matmul(alpha, wh_k))
    if final:
        merged = outs[0]
        for o in outs[1:]:
            merged = add(merged, o)
        merged = scale(merged, 1.0 / heads)
        return add(merged, params[f"{prefix}.b"])
    merged = concat(outs, axis=1)
    return elu(add(merged, params[f"{prefix}.b"]))


def gat_forward(graph: GraphFeatures, params: Mapping[str, Tensor], config: ModelConfig) -> Tensor:
    """Graph embedding H_G: input projection followed by the GAT stack."""
    if graph.features.shape[1] != config.node_feature_dim:
        raise ModelConfigError(
            f"node features have dim {graph.features.shape[1]}, expected {config.node_feature_dim}"
        )
    n = graph.features.shape[0]
    if n == 0:
        raise ModelConfigError("gat_forward requires a non-empty graph")
    mask = prepare_gat_mask(graph.edges, n)
    h = add(matmul(constant(graph.features), params["gat.in.W"]), params["gat.in.b"])
    head_dim = config.d_model // config.gat_heads
    for l in range(config.gat_layers):
        final = l == config.gat_layers - 1
        h = gat_layer(
            h,
            mask,
            params,
            f"gat.{l}",
            config.gat_heads,
            config.d_model if final else head_dim,
            final,
        )
    return h


# ---------------------------------------------------------------------------
# Enhancement B: document embedding enhancement


def doc_enhance(
    h_x: Tensor,
    h_g: Tensor,
    p: float,
    params: Mapping[str, Tensor],
    config: ModelConfig,
) -> Tensor:
    """p * EncoderLayer([H_X; H_G]) + (1 - p) * [H_X; H_G] with one standard
    full-attention encoder layer over the concatenated rows."""
    if h_x.shape[1] != h_g.shape[1]:
        raise ModelConfigError("document and graph embeddings must share d_model")
    h_c = concat([h_x, h_g], axis=0)
    layer_out = encoder_layer(h_c, params, "denh", config.n_heads, window=0)
    return add(scale(layer_out, p), scale(h_c, 1.0 - p))


# ---------------------------------------------------------------------------
# Decoder


def decode_step(
    y_prefix: Sequence[int] | np.ndarray,
    h_memory: Tensor,
    h_graph: Tensor | None,
    params: Mapping[str, Tensor],
    config: ModelConfig,
) -> Tensor:
    """Logits at every prefix position (T x vocab).

    Layer order: causal self-attention, cross-attention over the document
    memory, then (when ``decoder_attn`` is active) graph cross-attention
    whose queries come from the standard cross-attention output, then the
    feed-forward block.  All sublayers are pre-norm residual.
    """
    ids = np.asarray(y_prefix, dtype=np.int64)
    if ids.size == 0:
        raise ModelConfigError("decode_step requires a non-empty prefix")
    graph_active = "decoder_attn" in config.enhancement
    if graph_active and (h_graph is None or h_graph.shape[0] == 0):
        raise ModelConfigError("decoder_attn is active but no graph embedding was provided")
    x = scale(embedding(params["embed.tok"], ids), math.sqrt(config.d_model))
    x = add(x, constant(_positional(int(ids.size), config.d_model)))
    causal = _band_mask(int(ids.size), 0, True)
    for i in range(config.n_dec_layers):
        x = add(x, multi_head_attention(_ln(x, params, f"dec.{i}.ln_self"), x, params, f"dec.{i}.self", config.n_heads, causal))
        # Queries for any graph attention come from this cross-attention output.
        x = add(x, multi_head_attention(_ln(x, params, f"dec.{i}.ln_cross"), h_memory, params, f"dec.{i}.cross", config.n_heads))
        if graph_active:
            x = add(x, multi_head_attention(_ln(x, params, f"dec.{i}.ln_graph"), h_graph, params, f"dec.{i}.graph", config.n_heads))
        x = add(x, _ffn(_ln(x, params, f"dec.{i}.ln_ffn"), params, f"dec.{i}.ffn"))
    x = _ln(x, params, "dec.ln_out")
    return add(matmul(x, transpose(params["embed.tok"])), params["out.b"])


# ---------------------------------------------------------------------------
# Loss


@dataclass
class Sample:
    """One teacher-forced training example; targets end with EOS."""

    input_ids: np.ndarray
    target_ids: np.ndarray
    graph: GraphFeatures | None = None


def encode_memory(sample: Sample, params: Mapping[str, Tensor], config: ModelConfig) -> tuple[Tensor, Tensor | None]:
    """Encoder side shared by training and generation: document embedding,
    optionally enhanced, plus the graph embedding when any flag needs it."""
    h_x = encode(sample.input_ids, params, config)
    h_g = None
    if config.uses_graph:
        if sample.graph is None:
            raise ModelConfigError("model variant requires a graph but the sample has none")
        h_g = gat_forward(sample.graph, params, config)
    h_mem = h_x
    if "doc_enhance" in config.enhancement:
        h_mem = doc_enhance(h_x, h_g, config.p, params, config)
    return h_mem, h_g


def forward_loss(batch: Sequence[Sample], params: Mapping[str, Tensor], config: ModelConfig) -> Tensor:
    """Mean token cross-entropy over all non-pad target positions."""
    if not batch:
        raise ModelConfigError("forward_loss requires a non-empty batch")
    total: Tensor | None = None
    count = 0
    for sample in batch:
        h_mem, h_g = encode_memory(sample, params, config)
        targets = np.asarray(sample.target_ids, dtype=np.int64)
        dec_in = np.concatenate([[BOS_ID], targets[:-1]])
        logits = decode_step(dec_in, h_mem, h_g if "decoder_attn" in config.enhancement else None, params, config)
        nll, n = cross_entropy_sum(logits, targets, ignore_index=PAD_ID)
        total = nll if total is None else add(total, nll)
        count += n
    if count == 0:
        raise ModelConfigError("batch contains no non-pad target tokens")
    return scale(total, 1.0 / count)


# ---------------------------------------------------------------------------
# Checkpoints

_CKPT_FORMAT = "graphlay-checkpoint"
_CKPT_VERSION = 1


def save_checkpoint(path: str | Path, config: ModelConfig, vocab: Vocab, params: Mapping[str, Tensor]) -> None:
    obj = {
        "header": {"format": _CKPT_FORMAT, "version": _CKPT_VERSION},
        "config": config.to_json_dict(),
        "vocab": vocab.tokens[len(SPECIAL_TOKENS):],
        "params": {
            name: {
                "shape": list(t.data.shape),
                "dtype": "float64",
                "data": base64.b64encode(np.ascontiguousarray(t.data).tobytes()).decode("ascii"),
            }
            for name, t in sorted(params.items())
        },
    }
    Path(path).write_text(json.dumps(obj, sort_keys=True) + "\n", encoding="utf-8")


def load_checkpoint(path: str | Path) -> tuple[ModelConfig, Vocab, dict[str, Tensor]]:
    try:
        obj = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as e:
        raise CheckpointError(f"unreadable checkpoint {path}: {e}") from None
    header = obj.get("header", {})
    if header.get("format") != _CKPT_FORMAT:
        raise CheckpointError(f"{path} is not a model checkpoint")
    if header.get("version") != _CKPT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {header.get('version')}")
    config = ModelConfig.from_json_dict(obj["config"])
    vocab = Vocab(obj["vocab"])
    params = {}
    for name, entry in obj["params"].items():
        raw = base64.b64decode(entry["data"])
        arr = np.frombuffer(raw, dtype=np.float64).reshape(entry["shape"]).copy()
        params[name] = parameter(arr)
    return config, vocab, params
