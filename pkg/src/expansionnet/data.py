"""Synthetic scene/caption data, dataset files and the region-feature container.

A scene is a small set of objects, each a (size, color, shape) triple. Its
feature matrix has one row per detected object: the concatenation of fixed
per-attribute embedding vectors plus gaussian noise. Rows are shuffled, and an
object is sometimes detected twice. Captions list the distinct objects in a
canonical order (shape, then color, then size), e.g.
``"a small red circle and a large blue square"``; a minority of references use
an alternative opening phrase.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigurationError, FormatError
from .vocab import EOS, PAD, SOS, Vocabulary, build_vocab


@dataclass
class SceneSample:
    id: int
    features: np.ndarray
    refs: list[str] = field(default_factory=list)

    def to_json(self) -> dict:
        return {"id": int(self.id), "features": self.features.tolist(), "refs": list(self.refs)}

    @classmethod
    def from_json(cls, doc: dict) -> "SceneSample":
        feats = np.asarray(doc["features"], dtype=np.float64)
        return cls(int(doc["id"]), feats.reshape(len(doc["features"]), -1), list(doc.get("refs", [])))


@dataclass
class SceneSpec:
    """Attribute inventory and generation knobs for synthetic scenes."""

    colors: tuple[str, ...] = ("red", "blue", "green", "yellow", "purple", "orange")
    shapes: tuple[str, ...] = ("circle", "square", "triangle", "star", "cross")
    sizes: tuple[str, ...] = ("small", "large")
    min_objects: int = 1
    max_objects: int = 3
    noise: float = 0.1
    duplicate_prob: float = 0.3
    refs_per_scene: int = 5
    variant_prob: float = 0.2
    variants: tuple[str, ...] = ("there is {}", "a picture of {}")
    color_dim: int = 12
    shape_dim: int = 12
    size_dim: int = 8
    embedding_seed: int = 1234

    def validate(self) -> None:
        if not self.colors or not self.shapes or not self.sizes:
            raise ConfigurationError("attribute sets (colors, shapes, sizes) must be non-empty")
        if not 1 <= self.min_objects <= self.max_objects:
            raise ConfigurationError(f"bad object range {self.min_objects}..{self.max_objects}")
        if self.max_objects > len(self.colors) * len(self.shapes) * len(self.sizes):
            raise ConfigurationError("max_objects exceeds the number of distinct objects")
        if not 1 <= self.refs_per_scene <= 5:
            raise ConfigurationError("refs_per_scene must be in 1..5")
        if self.noise < 0:
            raise ConfigurationError("noise must be nonnegative")

    @property
    def d_feature(self) -> int:
        return self.color_dim + self.shape_dim + self.size_dim

    def attribute_embeddings(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        rng = np.random.default_rng(self.embedding_seed)
        return (
            rng.normal(size=(len(self.colors), self.color_dim)),
            rng.normal(size=(len(self.shapes), self.shape_dim)),
            rng.normal(size=(len(self.sizes), self.size_dim)),
        )


Obj = tuple[int, int, int]  # (size, color, shape) indices


def object_feature(obj: Obj, spec: SceneSpec, tables=None) -> np.ndarray:
    colors, shapes, sizes = tables if tables is not None else spec.attribute_embeddings()
    size, color, shape = obj
    return np.concatenate([colors[color], shapes[shape], sizes[size]])


def canonical_order(objects: Iterable[Obj]) -> list[Obj]:
    return sorted(set(objects), key=lambda o: (o[2], o[1], o[0]))


def describe(objects: Sequence[Obj], spec: SceneSpec) -> str:
    phrases = [f"a {spec.sizes[s]} {spec.colors[c]} {spec.shapes[h]}" for s, c, h in canonical_order(objects)]
    return " and ".join(phrases)


def generate_scene(sample_id: int, rng: np.random.Generator, spec: SceneSpec, tables) -> SceneSample:
    k = int(rng.integers(spec.min_objects, spec.max_objects + 1))
    n_combos = len(spec.sizes) * len(spec.colors) * len(spec.shapes)
    picks = rng.choice(n_combos, size=k, replace=False)
    objects: list[Obj] = []
    for p in picks:
        shape, rest = divmod(int(p), len(spec.sizes) * len(spec.colors))
        color, size = divmod(rest, len(spec.sizes))
        objects.append((size, color, shape))
    detections = list(objects)
    if rng.random() < spec.duplicate_prob:
        detections.append(objects[int(rng.integers(k))])
    rows = np.stack([object_feature(o, spec, tables) for o in detections])
    if spec.noise > 0:
        rows = rows + rng.normal(0.0, spec.noise, size=rows.shape)
    rows = rows[rng.permutation(len(rows))]
    body = describe(objects, spec)
    refs = []
    for _ in range(spec.refs_per_scene):
        if spec.variants and rng.random() < spec.variant_prob:
            refs.append(spec.variants[int(rng.integers(len(spec.variants)))].format(body))
        else:
            refs.append(body)
    return SceneSample(sample_id, rows, refs)


def generate_dataset(
    n_samples: int, seed: int, spec: SceneSpec | None = None, ratios=(0.8, 0.1, 0.1)
) -> dict[str, list[SceneSample]]:
    """Deterministic train/val/test splits (disjoint by id)."""
    spec = spec or SceneSpec()
    spec.validate()
    if n_samples < 1:
        raise ConfigurationError("n_samples must be positive")
    rng = np.random.default_rng(seed)
    tables = spec.attribute_embeddings()
    scenes = [generate_scene(i, rng, spec, tables) for i in range(n_samples)]
    order = rng.permutation(n_samples)
    n_train = int(round(ratios[0] * n_samples))
    n_val = int(round(ratios[1] * n_samples))
    cut = {"train": order[:n_train], "val": order[n_train : n_train + n_val], "test": order[n_train + n_val :]}
    return {name: [scenes[i] for i in sorted(idx)] for name, idx in cut.items()}


# -- dataset files ----------------------------------------------------------


def write_jsonl(path: str | os.PathLike, samples: Iterable[SceneSample]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for s in samples:
            fh.write(json.dumps(s.to_json(), separators=(",", ":")))
            fh.write("\n")


def read_jsonl(path: str | os.PathLike) -> list[SceneSample]:
    with open(path, encoding="utf-8") as fh:
        return [SceneSample.from_json(json.loads(line)) for line in fh if line.strip()]


def write_dataset_dir(out_dir: str | os.PathLike, splits: dict[str, list[SceneSample]], min_freq: int = 1) -> Vocabulary:
    os.makedirs(out_dir, exist_ok=True)
    for name, samples in splits.items():
        write_jsonl(os.path.join(out_dir, f"{name}.jsonl"), samples)
    vocab = build_vocab((r for s in splits["train"] for r in s.refs), min_freq=min_freq)
    vocab.save(os.path.join(out_dir, "vocab.json"))
    return vocab


def load_dataset_dir(data_dir: str | os.PathLike) -> tuple[dict[str, list[SceneSample]], Vocabulary]:
    if not os.path.isdir(data_dir):
        raise FileNotFoundError(f"data directory not found: {data_dir}")
    splits = {}
    for name in ("train", "val", "test"):
        path = os.path.join(data_dir, f"{name}.jsonl")
        if os.path.exists(path):
            splits[name] = read_jsonl(path)
    return splits, Vocabulary.load(os.path.join(data_dir, "vocab.json"))


# -- region-feature container ------------------------------------------------

FEATURE_MAGIC = b"EXPF"
FEATURE_VERSION = 1


def save_features(path: str | os.PathLike, samples: Iterable[SceneSample]) -> None:
    """Write features as ``EXPF | version u32 | count u64 | (id u64, N u32, d u32, float32 data)*``."""
    samples = list(samples)
    parts = [FEATURE_MAGIC, struct.pack("<IQ", FEATURE_VERSION, len(samples))]
    for s in samples:
        feats = np.asarray(s.features, dtype="<f4")
        if feats.ndim != 2:
            raise ValueError(f"scene {s.id}: features must be a matrix, got shape {feats.shape}")
        parts.append(struct.pack("<QII", int(s.id), *feats.shape))
        parts.append(np.ascontiguousarray(feats).tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


def load_features(path: str | os.PathLike) -> list[SceneSample]:
    with open(path, "rb") as fh:
        buf = fh.read()
    pos = 0

    def take(n: int, what: str) -> bytes:
        nonlocal pos
        if pos + n > len(buf):
            raise FormatError(f"truncated feature file while reading {what}", pos)
        chunk = buf[pos : pos + n]
        pos += n
        return chunk

    if take(4, "magic") != FEATURE_MAGIC:
        raise FormatError("bad magic, expected b'EXPF'", 0)
    (version,) = struct.unpack("<I", take(4, "version"))
    if version != FEATURE_VERSION:
        raise FormatError(f"unsupported feature container version {version}", 4)
    (count,) = struct.unpack("<Q", take(8, "image count"))
    out = []
    for _ in range(count):
        image_id, n, d = struct.unpack("<QII", take(16, "image header"))
        raw = take(4 * n * d, f"features of image {image_id}")
        feats = np.frombuffer(raw, dtype="<f4").astype(np.float32).reshape(n, d)
        out.append(SceneSample(int(image_id), feats))
    if pos != len(buf):
        raise FormatError("trailing bytes after last image", pos)
    return out


# -- batching ------------------------------------------------------------------


def pad_features(feature_list: Sequence[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    """Stack variable-length feature matrices; returns (B x Nmax x d, valid mask)."""
    n_max = max(f.shape[0] for f in feature_list)
    d = feature_list[0].shape[1]
    out = np.zeros((len(feature_list), n_max, d))
    valid = np.zeros((len(feature_list), n_max), dtype=bool)
    for i, f in enumerate(feature_list):
        out[i, : len(f)] = f
        valid[i, : len(f)] = True
    return out, valid


def pad_sequences(seqs: Sequence[Sequence[int]], length: int | None = None) -> np.ndarray:
    length = length or max(len(s) for s in seqs)
    out = np.full((len(seqs), length), PAD, dtype=np.int64)
    for i, s in enumerate(seqs):
        out[i, : len(s)] = s[:length]
    return out


def encode_refs(samples: Sequence[SceneSample], vocab: Vocabulary, max_len: int) -> list[list[list[int]]]:
    """Token ids ``[sos, ..., eos]`` per reference, truncated to ``max_len``."""
    out = []
    for s in samples:
        enc = []
        for ref in s.refs:
            ids = vocab.encode(ref)
            if len(ids) > max_len:
                ids = ids[: max_len - 1] + [EOS]
            enc.append(ids)
        out.append(enc)
    return out

