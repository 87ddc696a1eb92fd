"""Toy T5-style encoder-decoder with a YES/NO relevance head.

The model is deliberately small and deterministic. It serves two roles:
the vanilla per-pair (monoT5-style) reranker, and the exactness oracle the
packed broadcasting encoder in :mod:`etr.bqe` is checked against.
"""

from __future__ import annotations

import enum
import hashlib
import io
import json
import math
import zipfile
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from etr.tensor_core import NEG_LARGE, check_mask, masked_attention, rms_norm, softmax_rows, visible_mask

CHECKPOINT_FORMAT = "etr-toy-t5"
CHECKPOINT_VERSION = 1
INIT_STD = 0.02


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 512
    d_model: int = 64
    n_heads: int = 8
    d_head: int = 8
    d_ff: int = 256
    n_enc_layers: int = 2
    n_dec_layers: int = 2
    n_buckets: int = 32
    max_distance: int = 128
    yes_id: int = 1
    no_id: int = 2
    decoder_start_id: int = 3
    pad_id: int = 0

    def validate(self) -> None:
        for name in ("vocab_size", "d_model", "n_heads", "d_head", "d_ff", "n_buckets", "max_distance"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.n_enc_layers < 0 or self.n_dec_layers < 0:
            raise ValueError("layer counts must be non-negative")
        if self.d_model != self.n_heads * self.d_head:
            raise ValueError(f"d_model ({self.d_model}) != n_heads * d_head ({self.n_heads * self.d_head})")
        if self.yes_id == self.no_id:
            raise ValueError("yes_id and no_id must differ")
        for name in ("yes_id", "no_id", "decoder_start_id", "pad_id"):
            if not 0 <= getattr(self, name) < self.vocab_size:
                raise ValueError(f"{name} must be in [0, vocab_size)")
        if self.n_buckets % 2 or self.max_distance <= self.n_buckets // 4:
            raise ValueError("n_buckets must be even and max_distance > n_buckets / 4")

    @property
    def n_reserved(self) -> int:
        return max(self.yes_id, self.no_id, self.decoder_start_id, self.pad_id) + 1


class ScoreVariant(str, enum.Enum):
    FULL_MONO = "FULL_MONO"
    QUERY_BLIND = "QUERY_BLIND"


def param_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Name -> shape for every parameter, in canonical order."""
    d, f = config.d_model, config.d_ff
    shapes: dict[str, tuple[int, ...]] = {
        "embedding": (config.vocab_size, d),
        "rel_bias": (config.n_buckets, config.n_heads),
    }
    for i in range(config.n_enc_layers):
        p = f"enc.{i}."
        shapes[p + "attn_norm"] = (d,)
        for w in ("q", "k", "v", "o"):
            shapes[p + "attn." + w] = (d, d)
        shapes[p + "ff_norm"] = (d,)
        shapes[p + "ff.wi"] = (d, f)
        shapes[p + "ff.wo"] = (f, d)
    shapes["enc.final_norm"] = (d,)
    for i in range(config.n_dec_layers):
        p = f"dec.{i}."
        for block in ("self", "cross"):
            shapes[p + block + "_norm"] = (d,)
            for w in ("q", "k", "v", "o"):
                shapes[p + block + "." + w] = (d, d)
        shapes[p + "ff_norm"] = (d,)
        shapes[p + "ff.wi"] = (d, f)
        shapes[p + "ff.wo"] = (f, d)
    shapes["dec.final_norm"] = (d,)
    return shapes


@dataclass(frozen=True, eq=False)
class ModelParams:
    config: ModelConfig
    seed: int
    arrays: dict[str, np.ndarray] = field(repr=False)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.arrays[name]

    @property
    def n_params(self) -> int:
        return sum(a.size for a in self.arrays.values())

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name, arr in self.arrays.items():
            h.update(name.encode())
            h.update(np.ascontiguousarray(arr, dtype=np.float64).tobytes())
        return h.hexdigest()


def init_model(config: ModelConfig = ModelConfig(), seed: int = 0) -> ModelParams:
    """Seeded N(0, 0.02) weights; RMS-norm gains start at one."""
    config.validate()
    rng = np.random.default_rng(seed)
    arrays = {}
    for name, shape in param_shapes(config).items():
        if name.endswith("_norm"):
            arr = np.ones(shape)
        else:
            arr = rng.normal(0.0, INIT_STD, size=shape)
        arr.setflags(write=False)
        arrays[name] = arr
    return ModelParams(config, seed, arrays)


def save_checkpoint(params: ModelParams, target) -> None:
    """Write an ``.npz`` holding every array plus a JSON header.

    The header (key ``__meta__``) records format name, version, the full
    ModelConfig and the init seed. Arrays are stored raw, so load is bit-exact.
    Zip entries carry a fixed timestamp, so equal params give equal bytes.
    """
    meta = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": asdict(params.config),
        "seed": params.seed,
        "names": list(params.arrays),
    }
    entries = {"__meta__": np.array(json.dumps(meta, sort_keys=True)), **params.arrays}
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w", zipfile.ZIP_STORED) as zf:
        for name, arr in entries.items():
            raw = io.BytesIO()
            np.lib.format.write_array(raw, np.asarray(arr), allow_pickle=False)
            info = zipfile.ZipInfo(f"{name}.npy", date_time=(1980, 1, 1, 0, 0, 0))
            zf.writestr(info, raw.getvalue())
    if hasattr(target, "write"):
        target.write(buf.getvalue())
    else:
        Path(target).write_bytes(buf.getvalue())


def load_checkpoint(path: str | Path) -> ModelParams:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"model checkpoint not found: {path}")
    with np.load(path, allow_pickle=False) as data:
        meta = json.loads(str(data["__meta__"]))
        if meta.get("format") != CHECKPOINT_FORMAT or meta.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint format in {path}: {meta.get('format')} v{meta.get('version')}")
        config = ModelConfig(**meta["config"])
        config.validate()
        arrays = {}
        for name in meta["names"]:
            arr = np.array(data[name], dtype=np.float64)
            arr.setflags(write=False)
            arrays[name] = arr
    expected = param_shapes(config)
    if {k: v.shape for k, v in arrays.items()} != expected:
        raise ValueError(f"checkpoint {path} has parameter shapes inconsistent with its config")
    return ModelParams(config, int(meta["seed"]), arrays)


def text_to_ids(tokens: Sequence[str], config: ModelConfig) -> list[int]:
    """Hash analyzer tokens into the non-reserved part of the vocabulary."""
    lo = config.n_reserved
    span = config.vocab_size - lo
    return [lo + zlib.crc32(t.encode("utf-8")) % span for t in tokens]


# --- position bias -----------------------------------------------------------


def relative_bucket(relative_position: int, n_buckets: int = 32, max_distance: int = 128) -> int:
    """Bidirectional T5 bucket for ``key_position - query_position``."""
    half = n_buckets // 2
    bucket = half if relative_position > 0 else 0
    n = abs(relative_position)
    max_exact = half // 2
    if n < max_exact:
        return bucket + n
    large = max_exact + int(math.log(n / max_exact) / math.log(max_distance / max_exact) * (half - max_exact))
    return bucket + min(large, half - 1)


def relative_buckets(rel: np.ndarray, n_buckets: int, max_distance: int) -> np.ndarray:
    """Vectorised :func:`relative_bucket` over an integer array."""
    rel = np.asarray(rel, dtype=np.int64)
    half = n_buckets // 2
    max_exact = half // 2
    out = np.where(rel > 0, half, 0)
    n = np.abs(rel)
    with np.errstate(divide="ignore"):
        scaled = np.log(np.maximum(n, 1) / max_exact) / math.log(max_distance / max_exact) * (half - max_exact)
    large = np.minimum(max_exact + scaled.astype(np.int64), half - 1)
    return out + np.where(n < max_exact, n, large)


def position_bias(positions: Sequence[int], params: ModelParams) -> np.ndarray:
    """``(n_heads, n, n)`` bias from pairwise effective-position offsets."""
    pos = np.asarray(positions, dtype=np.int64)
    rel = pos[None, :] - pos[:, None]
    cfg = params.config
    buckets = relative_buckets(rel, cfg.n_buckets, cfg.max_distance)
    return params["rel_bias"][buckets].transpose(2, 0, 1)


# --- forward passes ------------------------------------------------------------


def _attend(x: np.ndarray, memory: np.ndarray, params: ModelParams, prefix: str, mask, bias) -> np.ndarray:
    q = x @ params[prefix + ".q"]
    k = memory @ params[prefix + ".k"]
    v = memory @ params[prefix + ".v"]
    out = masked_attention(q, k, v, mask, bias, n_heads=params.config.n_heads)
    return out @ params[prefix + ".o"]


def _feed_forward(x: np.ndarray, params: ModelParams, prefix: str) -> np.ndarray:
    h = rms_norm(x, params[prefix + "ff_norm"])
    return np.maximum(h @ params[prefix + "ff.wi"], 0.0) @ params[prefix + "ff.wo"]


def _check_tokens(tokens: Sequence[int], config: ModelConfig) -> np.ndarray:
    ids = np.asarray(tokens, dtype=np.int64)
    if ids.ndim != 1 or ids.size == 0:
        raise ValueError("token sequence must be non-empty and 1-D")
    if ids.min() < 0 or ids.max() >= config.vocab_size:
        raise ValueError("token id out of vocabulary range")
    return ids


def encode(tokens: Sequence[int], mask: np.ndarray, positions: Sequence[int], params: ModelParams) -> np.ndarray:
    """Encoder hidden states, ``(len(tokens), d_model)``.

    ``positions`` are effective positions; the relative bias between tokens i
    and j is looked up from ``positions[j] - positions[i]``. The bias is
    computed once and shared by every layer.
    """
    cfg = params.config
    ids = _check_tokens(tokens, cfg)
    n = ids.size
    mask = np.asarray(mask, dtype=np.float64)
    if mask.shape != (n, n):
        raise ValueError(f"encoder mask shape {mask.shape} != {(n, n)}")
    if len(positions) != n:
        raise ValueError(f"{len(positions)} positions for {n} tokens")
    check_mask(mask)
    bias = position_bias(positions, params)
    x = params["embedding"][ids]
    for i in range(cfg.n_enc_layers):
        p = f"enc.{i}."
        h = rms_norm(x, params[p + "attn_norm"])
        x = x + _attend(h, h, params, p + "attn", mask, bias)
        x = x + _feed_forward(x, params, p)
    return rms_norm(x, params["enc.final_norm"])


def decode_yes_no_logits(
    encoder_states: np.ndarray, self_mask: np.ndarray, cross_mask: np.ndarray, params: ModelParams
) -> np.ndarray:
    """``(k, 2)`` YES/NO logits for k decoder rows each seeded with the start token.

    No position bias is used in the decoder: each row is a single position.
    """
    cfg = params.config
    self_mask = np.asarray(self_mask, dtype=np.float64)
    cross_mask = np.asarray(cross_mask, dtype=np.float64)
    k = self_mask.shape[0]
    if self_mask.shape != (k, k) or cross_mask.shape != (k, encoder_states.shape[0]):
        raise ValueError(
            f"decoder mask shapes {self_mask.shape}, {cross_mask.shape} inconsistent "
            f"with {k} rows over {encoder_states.shape[0]} encoder states"
        )
    check_mask(self_mask)
    check_mask(cross_mask)
    emb = params["embedding"]
    y = np.repeat(emb[cfg.decoder_start_id][None, :], k, axis=0)
    for i in range(cfg.n_dec_layers):
        p = f"dec.{i}."
        h = rms_norm(y, params[p + "self_norm"])
        y = y + _attend(h, h, params, p + "self", self_mask, None)
        h = rms_norm(y, params[p + "cross_norm"])
        y = y + _attend(h, encoder_states, params, p + "cross", cross_mask, None)
        y = y + _feed_forward(y, params, p)
    y = rms_norm(y, params["dec.final_norm"])
    # tied output projection, T5 rescaling
    head = emb[[cfg.yes_id, cfg.no_id]] * cfg.d_model**-0.5
    return y @ head.T


def yes_probability(logits: np.ndarray) -> np.ndarray:
    """Softmax over the (YES, NO) pair, YES column."""
    return softmax_rows(np.atleast_2d(logits))[:, 0]


def decode_score(encoder_states: np.ndarray, cross_mask: np.ndarray, params: ModelParams) -> float:
    """Relevance probability from a single decoder start position."""
    cross_mask = np.atleast_2d(np.asarray(cross_mask, dtype=np.float64))
    if cross_mask.shape[0] != 1:
        raise ValueError("decode_score takes a single-row cross mask")
    logits = decode_yes_no_logits(encoder_states, np.zeros((1, 1)), cross_mask, params)
    return float(yes_probability(logits)[0])


def pair_encoder_mask(query_len: int, title_len: int, variant: ScoreVariant) -> np.ndarray:
    n = query_len + title_len
    visible = np.ones((n, n), dtype=bool)
    if ScoreVariant(variant) is ScoreVariant.QUERY_BLIND:
        visible[:query_len, query_len:] = False
    return visible_mask(visible)


def mono_score_pair(
    query: Sequence[int],
    title: Sequence[int],
    variant: ScoreVariant | str,
    params: ModelParams,
) -> float:
    """Vanilla one-pair-per-pass score of ``[query ++ title]``."""
    if len(query) == 0 or len(title) == 0:
        raise ValueError("query and title must be non-empty")
    tokens = list(query) + list(title)
    mask = pair_encoder_mask(len(query), len(title), ScoreVariant(variant))
    states = encode(tokens, mask, range(len(tokens)), params)
    return decode_score(states, np.zeros((1, len(tokens))), params)


__all__ = [
    "NEG_LARGE",
    "ModelConfig",
    "ModelParams",
    "ScoreVariant",
    "decode_score",
    "decode_yes_no_logits",
    "encode",
    "init_model",
    "load_checkpoint",
    "mono_score_pair",
    "param_shapes",
    "relative_bucket",
    "save_checkpoint",
    "text_to_ids",
]
