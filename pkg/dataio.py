# 容器格式（小端）：
#   b"CPFE" | version u32 | entry count u32
#   每个 entry: name length u32 | name utf-8 | rank u32 | dims u32 * rank | f32 payload
#   crc32 u32（header 与 crc 之间的所有字节）

import math
import os
import struct
import zlib
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Iterator, Mapping, Optional, Sequence, Union

import filelock
import numpy as np

from log import logger
from settings import CHECKPOINT_MAGIC, CHECKPOINT_VERSION, MANIFEST_VERSION
from utils import ConfigError, check_keys, dump_json, load_json, lock_path

PathLike = Union[str, Path]

_HEADER = struct.Struct("<4sII")
_U32 = struct.Struct("<I")


class DatasetError(ValueError):
    """Dataset directory fails validation"""


class CheckpointError(ValueError):
    """Container or checkpoint file is unreadable or does not match"""


# --------------------------------------------------------------------------
# container codec
# --------------------------------------------------------------------------


def encode_container(entries: Mapping[str, np.ndarray]) -> bytes:
    body = bytearray()
    for name, array in entries.items():
        encoded = name.encode("utf-8")
        array = np.asarray(array)
        body += _U32.pack(len(encoded)) + encoded
        body += _U32.pack(array.ndim)
        body += struct.pack(f"<{array.ndim}I", *array.shape)
        body += np.ascontiguousarray(array, dtype="<f4").tobytes()
    header = _HEADER.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, len(entries))
    return header + bytes(body) + _U32.pack(zlib.crc32(body))


def decode_container(blob: bytes, source: PathLike = "<bytes>") -> dict[str, np.ndarray]:
    if len(blob) < _HEADER.size + _U32.size:
        raise CheckpointError(f"{source}: truncated container ({len(blob)} bytes)")
    magic, version, count = _HEADER.unpack_from(blob, 0)
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{source}: bad magic {magic!r}, expected {CHECKPOINT_MAGIC!r}")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{source}: unsupported format version {version}")
    body = blob[_HEADER.size : -_U32.size]
    (crc,) = _U32.unpack_from(blob, len(blob) - _U32.size)
    if zlib.crc32(body) != crc:
        raise CheckpointError(f"{source}: CRC mismatch, file is corrupted")

    entries = {}
    offset = 0
    try:
        for _ in range(count):
            (name_len,) = _U32.unpack_from(body, offset)
            offset += _U32.size
            name = body[offset : offset + name_len].decode("utf-8")
            offset += name_len
            (rank,) = _U32.unpack_from(body, offset)
            offset += _U32.size
            dims = struct.unpack_from(f"<{rank}I", body, offset)
            offset += 4 * rank
            nbytes = math.prod(dims) * 4
            if offset + nbytes > len(body):
                raise CheckpointError(f"{source}: entry {name!r} truncated")
            if name in entries:
                raise CheckpointError(f"{source}: duplicate entry {name!r}")
            if nbytes:
                payload = np.frombuffer(body, dtype="<f4", count=math.prod(dims), offset=offset)
                entries[name] = payload.reshape(dims).astype(np.float32)
            else:
                entries[name] = np.zeros(dims, dtype=np.float32)
            offset += nbytes
    except struct.error as e:
        raise CheckpointError(f"{source}: truncated container: {e}")
    if offset != len(body):
        raise CheckpointError(f"{source}: {len(body) - offset} trailing bytes after {count} entries")
    return entries


def write_container(path: PathLike, entries: Mapping[str, np.ndarray]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with filelock.FileLock(lock_path(path)):
        tmp.write_bytes(encode_container(entries))
        os.replace(tmp, path)


def read_container(path: PathLike) -> dict[str, np.ndarray]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"No such file: {path}")
    return decode_container(path.read_bytes(), source=path)


# --------------------------------------------------------------------------
# checkpoints
# --------------------------------------------------------------------------


def save_checkpoint(params, path: PathLike) -> None:
    """Write every named parameter of ``params`` (anything with ``named_parameters()``)"""
    named = params.named_parameters()
    write_container(path, {name: p.data for name, p in named.items()})
    logger.info(f"Checkpoint written: {path} ({len(named)} tensors)")


def load_checkpoint(path: PathLike, params):
    """Load a checkpoint into ``params``; names and shapes must match exactly"""
    entries = read_container(path)
    named = params.named_parameters()
    unknown = sorted(set(entries) - set(named))
    if unknown:
        raise CheckpointError(f"{path}: unknown parameter(s) {', '.join(unknown)}")
    missing = sorted(set(named) - set(entries))
    if missing:
        raise CheckpointError(f"{path}: missing parameter(s) {', '.join(missing)}")
    for name, p in named.items():
        if entries[name].shape != p.shape:
            raise CheckpointError(f"{path}: {name} has shape {entries[name].shape}, model expects {p.shape}")
        p.data = entries[name].astype(p.dtype)
        p.zero_grad()
    logger.info(f"Checkpoint loaded: {path}")
    return params


# --------------------------------------------------------------------------
# dataset types
# --------------------------------------------------------------------------


@dataclass
class DatasetManifest:
    version: int
    d_region: int
    d_word: int
    captions_per_image: int
    images: list
    captions: list

    @property
    def num_images(self) -> int:
        return len(self.images)

    @property
    def num_captions(self) -> int:
        return len(self.captions)


@dataclass
class ImageFeatures:
    id: str
    regions: np.ndarray
    boxes: np.ndarray
    image_size: tuple
    label_words: list

    @property
    def m(self) -> int:
        return self.regions.shape[0]


@dataclass
class CaptionFeatures:
    id: str
    image_id: str
    words: np.ndarray
    tokens: list

    @property
    def n(self) -> int:
        return self.words.shape[0]


@dataclass
class Dataset:
    manifest: DatasetManifest
    images: list
    captions: list
    root: Optional[Path] = None
    image_index: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.image_index = {img.id: i for i, img in enumerate(self.images)}

    def image(self, image_id: str) -> ImageFeatures:
        return self.images[self.image_index[image_id]]

    def caption(self, caption_id: str) -> CaptionFeatures:
        for cap in self.captions:
            if cap.id == caption_id:
                return cap
        raise KeyError(caption_id)

    def ground_truth(self) -> list[int]:
        """Column of each caption's image, in caption order"""
        return [self.image_index[cap.image_id] for cap in self.captions]


@dataclass
class Batch:
    captions: list
    images: list
    image_index: list

    def __len__(self) -> int:
        return len(self.captions)


# --------------------------------------------------------------------------
# loading
# --------------------------------------------------------------------------


def _require(raw: dict, key: str, source) -> object:
    if key not in raw:
        raise DatasetError(f"{source}: missing field '{key}'")
    return raw[key]


def _entry(entries: dict, name: str, source) -> np.ndarray:
    if name not in entries:
        raise DatasetError(f"{source}: missing entry '{name}'")
    return entries[name]


def _check_finite(array: np.ndarray, what: str, source) -> None:
    if not np.all(np.isfinite(array)):
        raise DatasetError(f"{source}: {what} contains NaN or infinite values")


def _load_image(root: Path, raw: dict, manifest: DatasetManifest) -> ImageFeatures:
    image_id = _require(raw, "id", root / "manifest.json")
    path = root / _require(raw, "file", f"image {image_id}")
    if not path.exists():
        raise DatasetError(f"{path}: feature file for image {image_id} not found")
    entries = read_container(path)
    regions = _entry(entries, "regions", path)
    boxes = _entry(entries, "boxes", path)
    size = _entry(entries, "image_size", path)
    counts = _entry(entries, "label_counts", path)
    labels = _entry(entries, "label_words", path)

    if regions.ndim != 2 or regions.shape[0] < 1:
        raise DatasetError(f"{path}: image {image_id}: regions must be [m x d_region] with m >= 1, got {regions.shape}")
    if regions.shape[1] != manifest.d_region:
        raise DatasetError(
            f"{path}: image {image_id}: regions has {regions.shape[1]} columns, manifest d_region={manifest.d_region}"
        )
    m = regions.shape[0]
    if boxes.shape != (m, 4):
        raise DatasetError(f"{path}: image {image_id}: boxes must be [{m} x 4], got {boxes.shape}")
    if size.shape != (2,):
        raise DatasetError(f"{path}: image {image_id}: image_size must hold (w, h)")
    if counts.shape != (m,) or np.any(counts < 0):
        raise DatasetError(f"{path}: image {image_id}: label_counts must hold {m} non-negative counts")
    if labels.ndim != 2 or labels.shape[1] != manifest.d_word or labels.shape[0] != int(counts.sum()):
        raise DatasetError(
            f"{path}: image {image_id}: label_words {labels.shape} does not match counts / d_word={manifest.d_word}"
        )
    for what, array in (("regions", regions), ("boxes", boxes), ("label_words", labels)):
        _check_finite(array, f"image {image_id}: {what}", path)

    w, h = float(size[0]), float(size[1])
    x1, y1, x2, y2 = boxes.T
    if not (np.all(0 <= x1) and np.all(x1 <= x2) and np.all(x2 <= w) and np.all(0 <= y1) and np.all(y1 <= y2) and np.all(y2 <= h)):
        raise DatasetError(f"{path}: image {image_id}: boxes outside the {w:g}x{h:g} image")

    bounds = np.concatenate([[0], np.cumsum(counts.astype(np.int64))])
    label_words = [labels[bounds[i] : bounds[i + 1]] for i in range(m)]
    return ImageFeatures(id=image_id, regions=regions, boxes=boxes, image_size=(w, h), label_words=label_words)


def _load_caption(root: Path, raw: dict, manifest: DatasetManifest, image_ids: set) -> CaptionFeatures:
    caption_id = _require(raw, "id", root / "manifest.json")
    image_id = _require(raw, "image_id", f"caption {caption_id}")
    if image_id not in image_ids:
        raise DatasetError(f"{root / 'manifest.json'}: caption {caption_id} references unknown image {image_id}")
    path = root / _require(raw, "file", f"caption {caption_id}")
    if not path.exists():
        raise DatasetError(f"{path}: feature file for caption {caption_id} not found")
    words = _entry(read_container(path), "words", path)
    if words.ndim != 2 or words.shape[0] < 1:
        raise DatasetError(f"{path}: caption {caption_id}: words must be [n x d_word] with n >= 1, got {words.shape}")
    if words.shape[1] != manifest.d_word:
        raise DatasetError(
            f"{path}: caption {caption_id}: words has {words.shape[1]} columns, manifest d_word={manifest.d_word}"
        )
    _check_finite(words, f"caption {caption_id}: words", path)
    tokens = list(raw.get("tokens") or [f"w{i}" for i in range(words.shape[0])])
    if len(tokens) != words.shape[0]:
        raise DatasetError(f"{path}: caption {caption_id}: {len(tokens)} tokens for {words.shape[0]} word vectors")
    return CaptionFeatures(id=caption_id, image_id=image_id, words=words, tokens=tokens)


def load_manifest(root: PathLike) -> DatasetManifest:
    source = Path(root) / "manifest.json"
    if not source.exists():
        raise DatasetError(f"{source}: manifest not found")
    raw = load_json(source)
    values = {f.name: _require(raw, f.name, source) for f in fields(DatasetManifest)}
    manifest = DatasetManifest(**values)
    if manifest.version != MANIFEST_VERSION:
        raise DatasetError(f"{source}: unsupported manifest version {manifest.version}")
    for key in ("d_region", "d_word", "captions_per_image"):
        if int(getattr(manifest, key)) < 1:
            raise DatasetError(f"{source}: {key} must be >= 1")
    if not manifest.images:
        raise DatasetError(f"{source}: no images")
    if not manifest.captions:
        raise DatasetError(f"{source}: no captions")
    return manifest


def load_dataset(root: PathLike) -> Dataset:
    """Load and eagerly validate a dataset directory"""
    root = Path(root)
    manifest = load_manifest(root)
    images = [_load_image(root, raw, manifest) for raw in manifest.images]
    image_ids = [img.id for img in images]
    if len(set(image_ids)) != len(image_ids):
        raise DatasetError(f"{root / 'manifest.json'}: duplicate image ids")
    captions = [_load_caption(root, raw, manifest, set(image_ids)) for raw in manifest.captions]
    if len({cap.id for cap in captions}) != len(captions):
        raise DatasetError(f"{root / 'manifest.json'}: duplicate caption ids")

    per_image = {image_id: 0 for image_id in image_ids}
    for cap in captions:
        per_image[cap.image_id] += 1
    uneven = [image_id for image_id, count in per_image.items() if count != manifest.captions_per_image]
    if uneven:
        raise DatasetError(
            f"{root / 'manifest.json'}: image {uneven[0]} has {per_image[uneven[0]]} captions, "
            f"captions_per_image={manifest.captions_per_image}"
        )
    logger.info(f"Loaded dataset {root}: {len(images)} images, {len(captions)} captions")
    return Dataset(manifest=manifest, images=images, captions=captions, root=root)


# --------------------------------------------------------------------------
# synthetic generation
# --------------------------------------------------------------------------


@dataclass
class SyntheticSpec:
    num_images: int = 8
    captions_per_image: int = 2
    m: int = 6
    n: int = 5
    d_region: int = 32
    d_word: int = 24
    concepts: int = 3
    noise: float = 0.05
    seed: int = 7
    # concept pairs to draw each image's subset from; None -> num_images + concepts
    pool_size: Optional[int] = None

    @classmethod
    def from_json(cls, path: PathLike) -> "SyntheticSpec":
        raw = load_json(path)
        check_keys(raw, {f.name for f in fields(cls)}, path)
        return cls(**raw)

    @property
    def pool(self) -> int:
        return self.pool_size if self.pool_size is not None else self.num_images + self.concepts

    def validate(self) -> None:
        for key in ("num_images", "captions_per_image", "m", "n", "d_region", "d_word", "concepts"):
            if getattr(self, key) < 1:
                raise ConfigError(f"synthetic spec: {key} must be >= 1")
        if self.concepts > min(self.m, self.n):
            raise ConfigError(f"synthetic spec: concepts={self.concepts} exceeds min(m, n)={min(self.m, self.n)}")
        if self.noise < 0:
            raise ConfigError("synthetic spec: noise must be >= 0")
        if self.pool < self.concepts:
            raise ConfigError(f"synthetic spec: pool_size={self.pool} smaller than concepts={self.concepts}")
        if math.comb(self.pool, self.concepts) < self.num_images:
            raise ConfigError(
                f"synthetic spec: only {math.comb(self.pool, self.concepts)} distinct concept subsets "
                f"for {self.num_images} images"
            )


def _unit_rows(rng: np.random.Generator, count: int, dim: int) -> np.ndarray:
    rows = rng.standard_normal((count, dim))
    return rows / np.linalg.norm(rows, axis=1, keepdims=True)


def _noisy(rng: np.random.Generator, vector: np.ndarray, noise: float) -> np.ndarray:
    # noise is the expected norm of the perturbation
    return vector + rng.standard_normal(vector.shape) * noise / math.sqrt(vector.shape[-1])


def _random_boxes(rng: np.random.Generator, count: int, w: int, h: int) -> np.ndarray:
    x = np.sort(rng.integers(0, w + 1, size=(count, 2)), axis=1)
    y = np.sort(rng.integers(0, h + 1, size=(count, 2)), axis=1)
    return np.stack([x[:, 0], y[:, 0], x[:, 1], y[:, 1]], axis=1).astype(np.float32)


def gen_synthetic(spec: SyntheticSpec, root: PathLike) -> Path:
    """Write a dataset with planted region/word correspondences.

    A pool of concept pairs is drawn: unit word-space vectors and their images
    under a fixed random linear map, renormalised, in region space. Every
    image plants a distinct subset of ``concepts`` pool members into random
    region rows; the other regions are distractors. Each caption of the image
    plants the paired word vectors among filler words.
    """
    spec.validate()
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(spec.seed)

    word_concepts = _unit_rows(rng, spec.pool, spec.d_word)
    pairing = rng.standard_normal((spec.d_word, spec.d_region)) / math.sqrt(spec.d_word)
    region_concepts = word_concepts @ pairing
    region_concepts /= np.linalg.norm(region_concepts, axis=1, keepdims=True)

    subsets: list[tuple] = []
    while len(subsets) < spec.num_images:
        subset = tuple(sorted(int(c) for c in rng.choice(spec.pool, size=spec.concepts, replace=False)))
        if subset not in subsets:
            subsets.append(subset)

    images, captions = [], []
    planted = {"images": {}, "captions": {}}
    with filelock.FileLock(lock_path(root)):
        for i, subset in enumerate(subsets):
            image_id = f"img{i:04d}"
            regions = _unit_rows(rng, spec.m, spec.d_region)
            concept_rows = rng.choice(spec.m, size=spec.concepts, replace=False)
            labels = []
            for row in range(spec.m):
                labels.append(_unit_rows(rng, int(rng.integers(0, 3)), spec.d_word))
            for concept, row in zip(subset, concept_rows):
                regions[row] = _noisy(rng, region_concepts[concept], spec.noise)
                labels[row] = _noisy(rng, word_concepts[concept], spec.noise)[None, :]
            w, h = int(rng.integers(320, 641)), int(rng.integers(320, 641))
            write_container(
                root / "images" / f"{image_id}.bin",
                {
                    "regions": regions,
                    "boxes": _random_boxes(rng, spec.m, w, h),
                    "image_size": np.array([w, h]),
                    "label_counts": np.array([len(rows) for rows in labels]),
                    "label_words": np.concatenate(labels, axis=0).reshape(-1, spec.d_word),
                },
            )
            images.append({"id": image_id, "file": f"images/{image_id}.bin"})
            planted["images"][image_id] = {str(c): int(r) for c, r in zip(subset, concept_rows)}

            for j in range(spec.captions_per_image):
                caption_id = f"cap{i:04d}_{j}"
                words = _unit_rows(rng, spec.n, spec.d_word)
                tokens = [f"filler{int(t)}" for t in rng.integers(0, 1000, size=spec.n)]
                concept_cols = rng.choice(spec.n, size=spec.concepts, replace=False)
                for concept, col in zip(subset, concept_cols):
                    words[col] = _noisy(rng, word_concepts[concept], spec.noise)
                    tokens[col] = f"concept{concept}"
                write_container(root / "captions" / f"{caption_id}.bin", {"words": words})
                captions.append(
                    {"id": caption_id, "image_id": image_id, "file": f"captions/{caption_id}.bin", "tokens": tokens}
                )
                planted["captions"][caption_id] = {str(c): int(col) for c, col in zip(subset, concept_cols)}

        write_container(root / "pairing.bin", {"pairing": pairing})
        dump_json(planted, root / "planted.json")
        dump_json(
            {
                "version": MANIFEST_VERSION,
                "d_region": spec.d_region,
                "d_word": spec.d_word,
                "captions_per_image": spec.captions_per_image,
                "images": images,
                "captions": captions,
            },
            root / "manifest.json",
        )
        dump_json(asdict(spec), root / "synthetic_spec.json")
    logger.info(f"Generated synthetic dataset {root}: {len(images)} images, {len(captions)} captions")
    return root


# --------------------------------------------------------------------------
# batching
# --------------------------------------------------------------------------


def batch_iter(
    captions: Sequence[CaptionFeatures],
    images: Union[Sequence[ImageFeatures], Mapping[str, ImageFeatures]],
    batch_size: int,
    seed: int,
    epoch: int,
) -> Iterator[Batch]:
    """Shuffle captions per (seed, epoch) and pair each with its own image"""
    if batch_size < 1:
        raise ValueError(f"batch size must be >= 1, got {batch_size}")
    by_id = dict(images) if isinstance(images, Mapping) else {img.id: img for img in images}
    order = np.random.default_rng([seed, epoch]).permutation(len(captions))
    for start in range(0, len(order), batch_size):
        chunk = [captions[int(k)] for k in order[start : start + batch_size]]
        batch_images, image_index, slots = [], [], {}
        for cap in chunk:
            if cap.image_id not in slots:
                slots[cap.image_id] = len(batch_images)
                batch_images.append(by_id[cap.image_id])
            image_index.append(slots[cap.image_id])
        yield Batch(captions=chunk, images=batch_images, image_index=image_index)
