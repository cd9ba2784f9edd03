"""Decoder-only model assembly: block topologies, parameters, checkpoints.

Two residual layouts are supported.  The sequential block applies its
sublayers one after the other,

    h   = x + Attn(Norm1(x))
    out = h + Mlp(Norm2(h))

while the parallel block feeds both sublayers from the same input and sums,

    out = x + Attn(Norm1(x)) + Mlp(Norm2(x))

with separate norm parameters in both cases.  Norm flavor (rms / layer)
and MLP flavor (gated silu / plain gelu) are chosen per topology; the
final pre-logit norm reuses the block's norm flavor.  Projections carry
no biases.

Checkpoints are a flat little-endian float64 blob in declared parameter
order plus a JSON sidecar recording names, shapes, offsets, and a hash of
the model configuration, so a round trip is bit-exact.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Optional, Union

import numpy as np

from .attention import (AttentionConfig, AttentionParams, attention_forward,
                        init_attention_params)
from .exceptions import ParameterError, RangeError, ShapeError
from .rope import RopeCache, RopeConfig
from .tensor import (Tensor, add, cross_entropy_with_logits, embedding, gelu,
                     layer_norm, matmul, mul, narrow, rms_norm, silu, transpose)

_BLOCK_KINDS = ("sequential", "parallel")
_NORM_KINDS = ("rms", "layer")
_MLP_KINDS = ("swiglu_silu", "gelu")


@dataclass(frozen=True)
class BlockTopology:
    """How a residual block wires its sublayers together."""

    kind: str
    norm_kind: str
    mlp_kind: str

    def __post_init__(self):
        if self.kind not in _BLOCK_KINDS:
            raise ParameterError(f"block kind must be one of {_BLOCK_KINDS}, got {self.kind!r}")
        if self.norm_kind not in _NORM_KINDS:
            raise ParameterError(f"norm kind must be one of {_NORM_KINDS}, got {self.norm_kind!r}")
        if self.mlp_kind not in _MLP_KINDS:
            raise ParameterError(f"mlp kind must be one of {_MLP_KINDS}, got {self.mlp_kind!r}")

    @classmethod
    def sequential(cls) -> "BlockTopology":
        return cls("sequential", "rms", "swiglu_silu")

    @classmethod
    def parallel(cls) -> "BlockTopology":
        return cls("parallel", "layer", "gelu")


@dataclass(frozen=True)
class ModelConfig:
    """Complete hyperparameter description of one model."""

    vocab_size: int
    n_layers: int
    model_dim: int
    attention: AttentionConfig
    topology: BlockTopology
    mlp_hidden: int
    tie_embeddings: bool = True
    norm_eps: float = 1e-5

    def __post_init__(self):
        if self.vocab_size < 2:
            raise ParameterError(f"vocab_size must be at least 2, got {self.vocab_size}")
        if self.n_layers < 0:
            raise ParameterError(f"n_layers must be nonnegative, got {self.n_layers}")
        if self.model_dim != self.attention.model_dim:
            raise ParameterError(
                f"model_dim {self.model_dim} != attention model_dim {self.attention.model_dim}")
        if self.mlp_hidden < 1:
            raise ParameterError(f"mlp_hidden must be positive, got {self.mlp_hidden}")
        if self.norm_eps <= 0.0:
            raise ParameterError(f"norm_eps must be positive, got {self.norm_eps}")


@dataclass
class NormParams:
    gain: Tensor
    bias: Optional[Tensor] = None  # present for layer norm only


@dataclass
class SwigluParams:
    w_gate: Tensor
    w_up: Tensor
    w_down: Tensor


@dataclass
class GeluMlpParams:
    w_in: Tensor
    w_out: Tensor


@dataclass
class BlockParams:
    norm1: NormParams
    attn: AttentionParams
    norm2: NormParams
    mlp: Union[SwigluParams, GeluMlpParams]


@dataclass
class ModelParams:
    embedding: Tensor
    blocks: list
    final_norm: NormParams
    unembed: Optional[Tensor] = None  # absent when embeddings are tied


def _init_norm(topology: BlockTopology, dim: int) -> NormParams:
    gain = Tensor(np.ones(dim), requires_grad=True)
    if topology.norm_kind == "layer":
        return NormParams(gain=gain, bias=Tensor(np.zeros(dim), requires_grad=True))
    return NormParams(gain=gain)


def init_model_params(config: ModelConfig, rng: np.random.Generator,
                      std: float = 0.02) -> ModelParams:
    """Gaussian init; residual-output projections are shrunk by depth.

    Drawing order is fixed and independent of the rotary fraction, so two
    models differing only in that fraction start from identical weights
    when seeded identically.
    """
    d = config.model_dim
    # Keep the residual stream's variance flat across depth.
    out_std = std / np.sqrt(2.0 * max(config.n_layers, 1))
    blocks = []
    for _ in range(config.n_layers):
        attn = init_attention_params(config.attention, rng, std=std, out_std=out_std)
        if config.topology.mlp_kind == "swiglu_silu":
            mlp = SwigluParams(
                w_gate=Tensor(rng.normal(0.0, std, (d, config.mlp_hidden)), requires_grad=True),
                w_up=Tensor(rng.normal(0.0, std, (d, config.mlp_hidden)), requires_grad=True),
                w_down=Tensor(rng.normal(0.0, out_std, (config.mlp_hidden, d)),
                              requires_grad=True),
            )
        else:
            mlp = GeluMlpParams(
                w_in=Tensor(rng.normal(0.0, std, (d, config.mlp_hidden)), requires_grad=True),
                w_out=Tensor(rng.normal(0.0, out_std, (config.mlp_hidden, d)),
                             requires_grad=True),
            )
        blocks.append(BlockParams(
            norm1=_init_norm(config.topology, d),
            attn=attn,
            norm2=_init_norm(config.topology, d),
            mlp=mlp,
        ))
    params = ModelParams(
        embedding=Tensor(rng.normal(0.0, std, (config.vocab_size, d)), requires_grad=True),
        blocks=blocks,
        final_norm=_init_norm(config.topology, d),
    )
    if not config.tie_embeddings:
        params.unembed = Tensor(rng.normal(0.0, std, (d, config.vocab_size)),
                                requires_grad=True)
    return params


def named_parameters(params: ModelParams) -> list:
    """Flat (name, tensor) list in the declared checkpoint order."""
    items = [("embedding", params.embedding)]

    def norm_items(prefix: str, norm: NormParams) -> Iterator:
        yield f"{prefix}.gain", norm.gain
        if norm.bias is not None:
            yield f"{prefix}.bias", norm.bias

    for i, block in enumerate(params.blocks):
        prefix = f"blocks.{i}"
        items.extend(norm_items(f"{prefix}.norm1", block.norm1))
        attn = block.attn
        items.extend([(f"{prefix}.attn.wq", attn.wq), (f"{prefix}.attn.wk", attn.wk),
                      (f"{prefix}.attn.wv", attn.wv), (f"{prefix}.attn.wo", attn.wo)])
        if attn.qk is not None:
            items.extend([(f"{prefix}.attn.qk.gain_q", attn.qk.gain_q),
                          (f"{prefix}.attn.qk.gain_k", attn.qk.gain_k)])
        items.extend(norm_items(f"{prefix}.norm2", block.norm2))
        mlp = block.mlp
        if isinstance(mlp, SwigluParams):
            items.extend([(f"{prefix}.mlp.w_gate", mlp.w_gate),
                          (f"{prefix}.mlp.w_up", mlp.w_up),
                          (f"{prefix}.mlp.w_down", mlp.w_down)])
        else:
            items.extend([(f"{prefix}.mlp.w_in", mlp.w_in),
                          (f"{prefix}.mlp.w_out", mlp.w_out)])
    items.extend(norm_items("final_norm", params.final_norm))
    if params.unembed is not None:
        items.append(("unembed", params.unembed))
    return items


def count_parameters(params: ModelParams) -> int:
    return sum(t.size for name, t in named_parameters(params))


def param_count(config: ModelConfig) -> int:
    """Closed-form parameter count for a configuration."""
    d, hd = config.model_dim, config.attention.head_dim
    q_width = config.attention.n_heads * hd
    kv_width = config.attention.n_kv_heads * hd
    norm = d * (2 if config.topology.norm_kind == "layer" else 1)
    attn = d * q_width + 2 * d * kv_width + q_width * d
    if config.attention.qk_norm:
        attn += 2 * hd
    mlp = 3 * d * config.mlp_hidden if config.topology.mlp_kind == "swiglu_silu" \
        else 2 * d * config.mlp_hidden
    per_block = 2 * norm + attn + mlp
    total = config.vocab_size * d + config.n_layers * per_block + norm
    if not config.tie_embeddings:
        total += d * config.vocab_size
    return total


def _norm_forward(x: Tensor, norm: NormParams, config: ModelConfig) -> Tensor:
    if config.topology.norm_kind == "layer":
        return layer_norm(x, norm.gain, norm.bias, config.norm_eps)
    return rms_norm(x, norm.gain, config.norm_eps)


def _mlp_forward(x: Tensor, mlp) -> Tensor:
    if isinstance(mlp, SwigluParams):
        return matmul(mul(silu(matmul(x, mlp.w_gate)), matmul(x, mlp.w_up)), mlp.w_down)
    return matmul(gelu(matmul(x, mlp.w_in)), mlp.w_out)


def block_forward(x: Tensor, block: BlockParams, config: ModelConfig,
                  cache: Optional[RopeCache], causal: bool = True,
                  collect: Optional[dict] = None) -> Tensor:
    attn_in = _norm_forward(x, block.norm1, config)
    attn_out = attention_forward(attn_in, block.attn, config.attention, cache,
                                 causal=causal, collect=collect)
    if config.topology.kind == "sequential":
        h = add(x, attn_out)
        return add(h, _mlp_forward(_norm_forward(h, block.norm2, config), block.mlp))
    mlp_out = _mlp_forward(_norm_forward(x, block.norm2, config), block.mlp)
    return add(add(x, attn_out), mlp_out)


def lm_forward(tokens, params: ModelParams, config: ModelConfig,
               cache: Optional[RopeCache], causal: bool = True) -> Tensor:
    """Token ids [batch, seq] to next-token logits [batch, seq, vocab]."""
    tokens = np.asarray(tokens)
    if tokens.ndim != 2:
        raise ShapeError(f"lm_forward: tokens must be [batch, seq], got {tokens.shape}")
    seq = tokens.shape[1]
    if seq > config.attention.rope.max_positions:
        raise RangeError(f"lm_forward: seq {seq} exceeds max_positions "
                         f"{config.attention.rope.max_positions}")
    h = embedding(params.embedding, tokens)
    for block in params.blocks:
        h = block_forward(h, block, config, cache, causal=causal)
    h = _norm_forward(h, params.final_norm, config)
    unembed = transpose(params.embedding, (1, 0)) if config.tie_embeddings \
        else params.unembed
    return matmul(h, unembed)


def next_token_loss(tokens, params: ModelParams, config: ModelConfig,
                    cache: Optional[RopeCache], causal: bool = True,
                    loss_mask=None) -> Tensor:
    """Mean shifted cross-entropy: position t's logits predict token t + 1.

    ``loss_mask``, if given, has shape [batch, seq - 1] and weights the
    prediction of each label token (label j is ``tokens[:, j + 1]``).
    """
    tokens = np.asarray(tokens)
    if tokens.ndim != 2 or tokens.shape[1] < 2:
        raise ShapeError(f"next_token_loss: need [batch, seq >= 2] tokens, got {tokens.shape}")
    logits = lm_forward(tokens, params, config, cache, causal=causal)
    trimmed = narrow(logits, 1, 0, tokens.shape[1] - 1)
    return cross_entropy_with_logits(trimmed, tokens[:, 1:], loss_mask)


# ---------------------------------------------------------------------------
# Config serialization and checkpoints
# ---------------------------------------------------------------------------

def config_to_dict(config: ModelConfig) -> dict:
    return dataclasses.asdict(config)


def config_from_dict(d: dict) -> ModelConfig:
    """Rebuild a ModelConfig from its dict form, checking derived fields."""
    rope_d = dict(d["attention"]["rope"])
    declared = rope_d.pop("rotary_dims", None)
    rope = RopeConfig(**rope_d)
    if declared is not None and declared != rope.rotary_dims:
        raise ParameterError(
            f"declared rotary_dims {declared} contradicts derived {rope.rotary_dims}")
    attn_d = dict(d["attention"])
    attn_d["rope"] = rope
    attention = AttentionConfig(**attn_d)
    topo = BlockTopology(**d["topology"])
    rest = {k: v for k, v in d.items() if k not in ("attention", "topology")}
    return ModelConfig(attention=attention, topology=topo, **rest)


def config_hash(config: ModelConfig) -> str:
    payload = json.dumps(config_to_dict(config), sort_keys=True).encode()
    return hashlib.sha256(payload).hexdigest()


CHECKPOINT_FORMAT = "flat-float64-v1"


def save_checkpoint(path, params: ModelParams, config: ModelConfig) -> None:
    """Write ``path`` (raw float64 blob) and ``path.json`` (manifest)."""
    path = Path(path)
    named = named_parameters(params)
    manifest_params = []
    offset = 0
    with open(path, "wb") as f:
        for name, tensor in named:
            arr = np.ascontiguousarray(tensor.data, dtype="<f8")
            arr.tofile(f)
            manifest_params.append({"name": name, "shape": list(tensor.shape),
                                    "offset": offset})
            offset += tensor.size
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "dtype": "<f8",
        "total_elements": offset,
        "parameters": manifest_params,
        "config": config_to_dict(config),
        "config_hash": config_hash(config),
    }
    with open(str(path) + ".json", "w") as f:
        json.dump(manifest, f, indent=1, sort_keys=True)


def load_checkpoint(path) -> tuple:
    """Read a checkpoint back into (params, config), bit-exactly."""
    path = Path(path)
    with open(str(path) + ".json") as f:
        manifest = json.load(f)
    if manifest.get("format") != CHECKPOINT_FORMAT:
        raise ParameterError(f"unrecognized checkpoint format {manifest.get('format')!r}")
    config = config_from_dict(manifest["config"])
    if config_hash(config) != manifest["config_hash"]:
        raise ParameterError("checkpoint manifest config hash does not match its config")
    flat = np.fromfile(path, dtype="<f8")
    if flat.size != manifest["total_elements"]:
        raise ShapeError(f"checkpoint holds {flat.size} elements, manifest declares "
                         f"{manifest['total_elements']}")
    if sys.byteorder != "little":
        flat = flat.astype(np.float64)
    params = init_model_params(config, np.random.default_rng(0))
    named = named_parameters(params)
    entries = manifest["parameters"]
    if [e["name"] for e in entries] != [n for n, _ in named]:
        raise ShapeError("checkpoint parameter names do not match this configuration")
    for entry, (_, tensor) in zip(entries, named):
        shape = tuple(entry["shape"])
        if shape != tensor.shape:
            raise ShapeError(f"checkpoint shape {shape} != expected {tensor.shape} "
                             f"for {entry['name']}")
        start = entry["offset"]
        tensor.data = flat[start:start + tensor.size].reshape(shape).copy()
    return params, config
