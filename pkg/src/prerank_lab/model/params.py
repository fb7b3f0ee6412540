"""Parameter containers, initialization, and byte-stable checkpoints.

Parameters live in a plain name -> float64 array dict.  Initialization
draws every tensor from its own named substream, so two models built
from the same seed agree bitwise.  Checkpoints are a JSON header (format
tag, kind, metadata, tensor index) followed by the raw little-endian
float64 payload; identical parameters always produce identical bytes.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..config import ModelConfig, SimConfig
from ..seeding import substream

CHECKPOINT_MAGIC = b"PRLB"
CHECKPOINT_FORMAT = "prerank-lab-checkpoint"
CHECKPOINT_VERSION = 1

BEHAVIOR_PARTITIONS = ("recent", "short", "long")


@dataclass(frozen=True)
class VocabSpec:
    """Embedding table sizes, decoupled from where the ids come from."""

    n_terms: int
    n_profiles: int
    n_profile_features: int
    n_items: int
    n_categories: int
    n_brands: int
    n_freq_buckets: int
    n_queries: int = 1  # only query-history features need this

    @classmethod
    def from_sim_config(cls, cfg: SimConfig) -> "VocabSpec":
        return cls(
            n_terms=cfg.term_vocab,
            n_profiles=cfg.profile_vocab,
            n_profile_features=cfg.n_profile_features,
            n_items=cfg.n_items,
            n_categories=cfg.n_categories,
            n_brands=cfg.n_brands,
            n_freq_buckets=cfg.n_freq_buckets,
            n_queries=cfg.n_queries,
        )

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def feature_widths(cfg: ModelConfig, vocab: VocabSpec) -> dict[str, int]:
    """Derived concat widths used by both towers."""
    d_user = vocab.n_profile_features * cfg.d_profile
    d_semantic = 3 * cfg.d_term
    d_side = cfg.d_category + cfg.d_freq
    d_behavior = len(BEHAVIOR_PARTITIONS) * cfg.d_behavior
    return {
        "user": d_user,
        "semantic": d_semantic,
        "side": d_side,
        "behavior": d_behavior,
        "query_in": d_user + d_side + d_semantic + d_behavior,
        "item_in": cfg.d_item_id + cfg.d_category + cfg.d_brand + cfg.d_term,
    }


def tensor_shapes(cfg: ModelConfig, vocab: VocabSpec) -> dict[str, tuple[int, ...]]:
    widths = feature_widths(cfg, vocab)
    shapes: dict[str, tuple[int, ...]] = {
        "emb_query_term": (vocab.n_terms, cfg.d_term),
        "emb_title_term": (vocab.n_terms, cfg.d_term),
        "emb_profile": (vocab.n_profiles, cfg.d_profile),
        "emb_item_id": (vocab.n_items, cfg.d_item_id),
        "emb_category": (vocab.n_categories, cfg.d_category),
        "emb_brand": (vocab.n_brands, cfg.d_brand),
        "emb_freq": (vocab.n_freq_buckets, cfg.d_freq),
        "q_attn_W": (widths["user"], cfg.d_proj),
        "q_attn_b": (cfg.d_proj,),
    }
    for part in BEHAVIOR_PARTITIONS:
        shapes[f"beh_W_{part}"] = (widths["semantic"], cfg.d_behavior)
        shapes[f"beh_b_{part}"] = (cfg.d_behavior,)
    for tower, d_in in (("q", widths["query_in"]), ("p", widths["item_in"])):
        prev = d_in
        for i, width in enumerate(cfg.hidden, start=1):
            shapes[f"{tower}_fc{i}_W"] = (prev, width)
            shapes[f"{tower}_fc{i}_b"] = (width,)
            shapes[f"{tower}_ln{i}_g"] = (width,)
            shapes[f"{tower}_ln{i}_b"] = (width,)
            prev = width
        shapes[f"{tower}_out_W"] = (prev, cfg.out_dim)
        shapes[f"{tower}_out_b"] = (cfg.out_dim,)
    return shapes


def init_params(cfg: ModelConfig, vocab: VocabSpec, seed: int) -> dict[str, np.ndarray]:
    """Fan-in scaled uniform init; layer-norm gains 1, every bias 0."""
    params: dict[str, np.ndarray] = {}
    for name, shape in tensor_shapes(cfg, vocab).items():
        rng = substream(seed, "init", name)
        if "_ln" in name and name.endswith("_g"):
            params[name] = np.ones(shape)
        elif name.endswith("_b"):
            params[name] = np.zeros(shape)
        else:
            # embedding rows scale with their width, matrices with fan-in
            fan = shape[1] if name.startswith("emb_") else shape[0]
            bound = 1.0 / np.sqrt(fan)
            params[name] = rng.uniform(-bound, bound, size=shape)
    return params


def zeros_like_params(params: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    return {name: np.zeros_like(value) for name, value in params.items()}


def params_to_vector(params: dict[str, np.ndarray]) -> np.ndarray:
    return np.concatenate([params[name].ravel() for name in sorted(params)])


def vector_to_params(vec: np.ndarray, template: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    out: dict[str, np.ndarray] = {}
    pos = 0
    for name in sorted(template):
        size = template[name].size
        out[name] = vec[pos : pos + size].reshape(template[name].shape).copy()
        pos += size
    if pos != vec.size:
        raise ValueError("vector length does not match the parameter template")
    return out


# ----------------------------------------------------------------------
# checkpoints


def save_checkpoint(
    path: str | Path, params: dict[str, np.ndarray], *, kind: str, meta: dict | None = None
) -> None:
    names = sorted(params)
    header = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "kind": kind,
        "meta": meta or {},
        "tensors": [{"name": n, "shape": list(params[n].shape)} for n in names],
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(len(blob).to_bytes(8, "little"))
        fh.write(blob)
        for name in names:
            fh.write(np.ascontiguousarray(params[name], dtype="<f8").tobytes())


def load_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], str, dict]:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"{path} is not a checkpoint file")
        n = int.from_bytes(fh.read(8), "little")
        header = json.loads(fh.read(n).decode("utf-8"))
        if header.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"{path} has an unknown checkpoint format")
        params: dict[str, np.ndarray] = {}
        for entry in header["tensors"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            data = np.frombuffer(fh.read(count * 8), dtype="<f8").reshape(shape)
            params[entry["name"]] = data.astype(np.float64)
    return params, header["kind"], header["meta"]
