"""Slot-query decoder: learnable queries attend to a video through a pre-norm
transformer decoder and come out as K ordered step-slot vectors.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .core import DataError, EmbeddingSequence, NumericalError

CKPT_MAGIC = b"SCKP"


@dataclass(frozen=True)
class ModelConfig:
    dim: int = 32
    num_slots: int = 8
    num_layers: int = 2
    num_heads: int = 4
    ff_multiplier: int = 4
    dropout_rate: float = 0.1

    def __post_init__(self):
        if self.dim % self.num_heads != 0:
            raise DataError(f"dim {self.dim} not divisible by num_heads {self.num_heads}")
        if self.dim % 2 != 0:
            raise DataError("dim must be even for sinusoidal position codes")
        if self.num_slots < 1:
            raise DataError("num_slots must be >= 1")
        if not (0.0 <= self.dropout_rate < 1.0):
            raise DataError("dropout_rate must lie in [0, 1)")


@dataclass
class ModelParams:
    """Named parameter arrays; `names` fixes the serialization order."""

    config: ModelConfig
    tensors: dict

    @property
    def names(self) -> list[str]:
        return sorted(self.tensors)

    @property
    def queries(self) -> np.ndarray:
        return self.tensors["queries"]

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, {k: v.copy() for k, v in self.tensors.items()})


def init_params(config: ModelConfig, seed: int = 0) -> ModelParams:
    """Zero-mean normal (std 0.02) weights; unit norm gains, zero biases."""
    rng = np.random.default_rng(seed)
    d, m = config.dim, config.ff_multiplier * config.dim
    tensors = {"queries": rng.normal(0.0, 0.02, size=(config.num_slots, d))}

    def attn(prefix):
        for w in ("wq", "wk", "wv", "wo"):
            tensors[f"{prefix}.{w}"] = rng.normal(0.0, 0.02, size=(d, d))
        for b in ("bq", "bk", "bv", "bo"):
            tensors[f"{prefix}.{b}"] = np.zeros(d)

    def norm(prefix):
        tensors[f"{prefix}.gain"] = np.ones(d)
        tensors[f"{prefix}.bias"] = np.zeros(d)

    for i in range(config.num_layers):
        attn(f"layers.{i}.self_attn")
        attn(f"layers.{i}.cross_attn")
        norm(f"layers.{i}.norm1")
        norm(f"layers.{i}.norm2")
        norm(f"layers.{i}.norm3")
        tensors[f"layers.{i}.ff.w1"] = rng.normal(0.0, 0.02, size=(d, m))
        tensors[f"layers.{i}.ff.b1"] = np.zeros(m)
        tensors[f"layers.{i}.ff.w2"] = rng.normal(0.0, 0.02, size=(m, d))
        tensors[f"layers.{i}.ff.b2"] = np.zeros(d)
    norm("final_norm")
    return ModelParams(config, tensors)


def sinusoidal_pe(length: int, dim: int) -> np.ndarray:
    """Interleaved sine/cosine position table, shape (length, dim)."""
    if dim % 2 != 0:
        raise DataError("sinusoidal position codes need an even dim")
    positions = np.arange(length, dtype=np.float64)[:, None]
    freqs = np.power(10000.0, -np.arange(0, dim, 2, dtype=np.float64) / dim)
    table = np.empty((length, dim))
    table[:, 0::2] = np.sin(positions * freqs)
    table[:, 1::2] = np.cos(positions * freqs)
    return table


def _attention(nodes, prefix, q_in, kv_in, num_heads):
    d = q_in.shape[-1]
    dh = d // num_heads
    scale = 1.0 / np.sqrt(dh)

    def project(name_w, name_b, x):
        return ad.add(ad.matmul(x, nodes[f"{prefix}.{name_w}"]), nodes[f"{prefix}.{name_b}"])

    def split_heads(x, n):
        return ad.transpose(ad.reshape(x, (n, num_heads, dh)), (1, 0, 2))

    nq, nk = q_in.shape[0], kv_in.shape[0]
    q = split_heads(project("wq", "bq", q_in), nq)
    k = split_heads(project("wk", "bk", kv_in), nk)
    v = split_heads(project("wv", "bv", kv_in), nk)
    scores = ad.mul(ad.matmul(q, ad.transpose(k, (0, 2, 1))), scale)
    weights = ad.softmax(scores, axis=-1)
    mixed = ad.matmul(weights, v)  # (H, nq, dh)
    merged = ad.reshape(ad.transpose(mixed, (1, 0, 2)), (nq, d))
    return project("wo", "bo", merged)


def forward_nodes(nodes, config: ModelConfig, video: np.ndarray,
                  training: bool = False, rng: np.random.Generator | None = None):
    """Decoder forward pass over parameter nodes; returns the slot Tensor.

    Pre-norm layer order: norm > self-attention over slots, norm >
    cross-attention to the video (with sinusoidal position codes added), norm >
    feed-forward; residual connections around each block, dropout on block
    outputs while training, and a final output norm.
    """
    if video.shape[1] != config.dim:
        raise DataError(f"video dim {video.shape[1]} != model dim {config.dim}")
    if training and config.dropout_rate > 0.0 and rng is None:
        raise DataError("training forward needs a random source for dropout")

    v_in = ad.constant(video + sinusoidal_pe(video.shape[0], config.dim))
    x = nodes["queries"]

    def maybe_drop(t):
        if training and config.dropout_rate > 0.0:
            return ad.dropout(t, config.dropout_rate, rng)
        return t

    def ln(prefix, t):
        return ad.layer_norm(t, nodes[f"{prefix}.gain"], nodes[f"{prefix}.bias"])

    for i in range(config.num_layers):
        base = f"layers.{i}"
        h_in = ln(f"{base}.norm1", x)
        h = _attention(nodes, f"{base}.self_attn", h_in, h_in, config.num_heads)
        x = ad.add(x, maybe_drop(h))
        h = _attention(nodes, f"{base}.cross_attn", ln(f"{base}.norm2", x), v_in, config.num_heads)
        x = ad.add(x, maybe_drop(h))
        h = ln(f"{base}.norm3", x)
        h = ad.add(ad.matmul(ad.gelu(ad.add(ad.matmul(h, nodes[f"{base}.ff.w1"]), nodes[f"{base}.ff.b1"])),
                             nodes[f"{base}.ff.w2"]), nodes[f"{base}.ff.b2"])
        x = ad.add(x, maybe_drop(h))
    out = ln("final_norm", x)
    if not np.isfinite(out.data).all():
        raise NumericalError("non-finite activation in decoder output")
    return out


def param_nodes(params: ModelParams, tape: ad.Tape) -> dict:
    return {name: ad.leaf(arr, tape) for name, arr in params.tensors.items()}


def forward(params: ModelParams, video: EmbeddingSequence,
            training: bool = False, rng: np.random.Generator | None = None) -> EmbeddingSequence:
    """Run the decoder and return the K step slots as an EmbeddingSequence."""
    tape = ad.Tape()
    nodes = param_nodes(params, tape)
    out = forward_nodes(nodes, params.config, video.data, training=training, rng=rng)
    return EmbeddingSequence(out.data, "slots")


def attention_tensor(video: np.ndarray, slots: ad.Tensor, temperature: float) -> ad.Tensor:
    """Per-frame softmax over slot cosine similarities, shape (N, K)."""
    if temperature <= 0.0:
        raise DataError("temperature must be positive")
    sims = ad.cosine_matrix(ad.constant(video), slots)
    return ad.softmax(ad.mul(sims, 1.0 / temperature), axis=-1)


def attention_map(video: EmbeddingSequence, slots: EmbeddingSequence, temperature: float = 0.03) -> np.ndarray:
    if video.dim != slots.dim:
        raise DataError("video and slots must share dim")
    return attention_tensor(video.data, ad.constant(slots.data), temperature).data


def backward(tape: ad.Tape, loss: ad.Tensor, nodes: dict) -> dict:
    """Gradients for every parameter node; untouched parameters get zeros."""
    return ad.backward(tape, loss, nodes)


# --- checkpoints -------------------------------------------------------------

def save_checkpoint(path, params: ModelParams, step: int = 0, seed: int = 0) -> None:
    """JSON header (config, step, seed, tensor shapes) + float32 payload."""
    header = {
        "config": asdict(params.config),
        "step": int(step),
        "seed": int(seed),
        "tensors": [{"name": n, "shape": list(params.tensors[n].shape)} for n in params.names],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for name in params.names:
            fh.write(params.tensors[name].astype("<f4").tobytes(order="C"))


def load_checkpoint(path) -> tuple[ModelParams, int, int]:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != CKPT_MAGIC:
        raise DataError(f"{path}: not a checkpoint file")
    (blob_len,) = struct.unpack_from("<I", raw, 4)
    header = json.loads(raw[8:8 + blob_len].decode("utf-8"))
    config = ModelConfig(**header["config"])
    tensors = {}
    offset = 8 + blob_len
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape))
        end = offset + 4 * count
        if end > len(raw):
            raise DataError(f"{path}: truncated checkpoint payload")
        tensors[entry["name"]] = np.frombuffer(raw[offset:end], dtype="<f4").astype(np.float64).reshape(shape)
        offset = end
    if offset != len(raw):
        raise DataError(f"{path}: trailing bytes in checkpoint")
    return ModelParams(config, tensors), header["step"], header["seed"]
