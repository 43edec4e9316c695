"""Deterministic synthetic episode generator and on-disk episode format.

Episodes are generated directly in patch-feature space. Each benchmark owns
two disjoint class vocabularies (train ids 0..C-1, test ids C..2C-1), each a
set of unit-norm prototypes constructed so that every pair has cosine
similarity exactly equal to the class-overlap knob. The background
distribution interpolates between an independent random direction and the
prototype mean, controlled by the background-overlap knob, so the two
feature-confusion failure modes are dialed in independently.

Object patches are the class prototype plus Gaussian noise; objects occupy
non-overlapping axis-aligned rectangles of grid patches and their bounding
boxes are exact in normalized coordinates. Support prototypes are the mean
of k noisy shots, resampled per episode.
"""

from __future__ import annotations

import hashlib
import io
import json
import struct
from dataclasses import asdict, dataclass
from typing import Iterator

import numpy as np

from .errors import ConfigError, CorruptionError, GenerationError

_MAGIC = b"FDEP"
_FORMAT_VERSION = 1

SPLITS = ("train", "test")


@dataclass(frozen=True)
class BenchmarkSpec:
    class_count: int = 4
    shots: int = 10
    capacity: int = 5           # support sequence length N (classes + placeholders)
    grid_rows: int = 8
    grid_cols: int = 8
    feature_dim: int = 32
    objects_min: int = 2
    objects_max: int = 4
    bg_overlap: float = 0.6     # object-background confusion knob, in [0, 1]
    class_overlap: float = 0.6  # object-object confusion knob, in [0, 1]
    noise_std: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.class_count < 1:
            raise ConfigError("class_count must be >= 1")
        if self.class_count > self.capacity:
            raise ConfigError(
                f"class_count {self.class_count} exceeds capacity {self.capacity}")
        if not (0.0 <= self.bg_overlap <= 1.0 and 0.0 <= self.class_overlap <= 1.0):
            raise ConfigError("overlap knobs must lie in [0, 1]")
        if self.grid_rows < 2 or self.grid_cols < 2:
            raise ConfigError("grid extents must be >= 2")
        if self.feature_dim < self.class_count + 2:
            raise ConfigError(
                f"feature_dim {self.feature_dim} too small for "
                f"{self.class_count} classes (need >= C + 2)")
        if self.shots < 1:
            raise ConfigError("shots must be >= 1")
        if not (1 <= self.objects_min <= self.objects_max):
            raise ConfigError("objects range must satisfy 1 <= min <= max")

    @property
    def num_patches(self) -> int:
        return self.grid_rows * self.grid_cols


@dataclass
class Episode:
    index: int
    split: str
    class_ids: list[int]        # length C, the vocabulary of this split
    support: np.ndarray         # (C, d_raw) k-shot mean prototypes
    patches: np.ndarray         # (P, d_raw) query patch features
    grid: tuple[int, int]
    boxes: np.ndarray           # (G, 4) normalized (cx, cy, w, h)
    labels: np.ndarray          # (G,) class ids

    def object_patch_mask(self) -> np.ndarray:
        """Boolean (P,) mask of patches covered by any ground-truth box."""
        rows, cols = self.grid
        mask = np.zeros(rows * cols, dtype=bool)
        for box in self.boxes:
            cx, cy, w, h = box
            c0 = int(round((cx - w / 2) * cols))
            c1 = int(round((cx + w / 2) * cols))
            r0 = int(round((cy - h / 2) * rows))
            r1 = int(round((cy + h / 2) * rows))
            for r in range(r0, r1):
                for c in range(c0, c1):
                    mask[r * cols + c] = True
        return mask


def _split_code(split: str) -> int:
    if split not in SPLITS:
        raise ConfigError(f"unknown split '{split}' (expected one of {SPLITS})")
    return SPLITS.index(split)


def class_id_range(spec: BenchmarkSpec, split: str) -> list[int]:
    base = _split_code(split) * spec.class_count
    return list(range(base, base + spec.class_count))


def class_prototypes(spec: BenchmarkSpec, split: str) -> np.ndarray:
    """(C, d_raw) unit-norm prototypes with pairwise cosine similarity equal
    to the class-overlap knob: an orthonormal frame blended with one shared
    direction."""
    rng = np.random.default_rng([spec.seed, 7919, _split_code(split)])
    c, d = spec.class_count, spec.feature_dim
    gauss = rng.normal(size=(d, c + 1))
    q, _ = np.linalg.qr(gauss)
    frame = q[:, :c].T          # orthonormal rows u_i
    shared = q[:, c]            # unit vector orthogonal to every u_i
    sigma = spec.class_overlap
    protos = np.sqrt(1.0 - sigma) * frame + np.sqrt(sigma) * shared[None, :]
    return protos


def background_direction(spec: BenchmarkSpec, split: str) -> np.ndarray:
    """Unit mean of the background patch distribution."""
    rng = np.random.default_rng([spec.seed, 104729, _split_code(split)])
    raw = rng.normal(size=spec.feature_dim)
    independent = raw / np.linalg.norm(raw)
    protos = class_prototypes(spec, split)
    proto_mean = protos.mean(axis=0)
    proto_mean = proto_mean / np.linalg.norm(proto_mean)
    mix = (1.0 - spec.bg_overlap) * independent + spec.bg_overlap * proto_mean
    return mix / np.linalg.norm(mix)


def _place_objects(rng: np.random.Generator, spec: BenchmarkSpec,
                   count: int) -> list[tuple[int, int, int, int]]:
    """Non-overlapping (r0, c0, height, width) patch rectangles."""
    rows, cols = spec.grid_rows, spec.grid_cols
    occupied = np.zeros((rows, cols), dtype=bool)
    rects = []
    attempts = 0
    max_attempts = 250 * count
    while len(rects) < count:
        attempts += 1
        if attempts > max_attempts:
            raise GenerationError(
                f"could not place {count} objects on a {rows}x{cols} grid "
                f"after {max_attempts} attempts")
        h = int(rng.integers(1, min(3, rows) + 1))
        w = int(rng.integers(1, min(3, cols) + 1))
        r0 = int(rng.integers(0, rows - h + 1))
        c0 = int(rng.integers(0, cols - w + 1))
        if occupied[r0:r0 + h, c0:c0 + w].any():
            continue
        occupied[r0:r0 + h, c0:c0 + w] = True
        rects.append((r0, c0, h, w))
    return rects


def generate_episode(spec: BenchmarkSpec, index: int, split: str = "train") -> Episode:
    """Deterministically build episode ``index`` of the given split."""
    if index < 0:
        raise ConfigError("episode index must be non-negative")
    rng = np.random.default_rng([spec.seed, _split_code(split), index])
    protos = class_prototypes(spec, split)
    bg_mean = background_direction(spec, split)
    ids = class_id_range(spec, split)
    c, d = spec.class_count, spec.feature_dim
    rows, cols = spec.grid_rows, spec.grid_cols

    count = int(rng.integers(spec.objects_min, spec.objects_max + 1))
    rects = _place_objects(rng, spec, count)
    object_classes = rng.integers(0, c, size=count)

    patches = bg_mean[None, :] + spec.noise_std * rng.normal(size=(rows * cols, d))
    boxes = np.zeros((count, 4))
    labels = np.zeros(count, dtype=np.int64)
    for i, ((r0, c0, h, w), cls) in enumerate(zip(rects, object_classes)):
        proto = protos[cls]
        for r in range(r0, r0 + h):
            for col in range(c0, c0 + w):
                patches[r * cols + col] = proto + spec.noise_std * rng.normal(size=d)
        boxes[i] = [(c0 + w / 2) / cols, (r0 + h / 2) / rows, w / cols, h / rows]
        labels[i] = ids[cls]

    shots = protos[:, None, :] + spec.noise_std * rng.normal(size=(c, spec.shots, d))
    support = shots.mean(axis=1)

    return Episode(index=index, split=split, class_ids=ids, support=support,
                   patches=patches, grid=(rows, cols), boxes=boxes, labels=labels)


def single_class_view(episode: Episode, class_id: int) -> Episode:
    """The same query content with the support reduced to one class; ground
    truths of other classes are dropped (they become background for this
    view). Used by the single-class baseline ablation (N = C = 1)."""
    if class_id not in episode.class_ids:
        raise ConfigError(f"class {class_id} not in episode vocabulary")
    keep = episode.labels == class_id
    row = episode.class_ids.index(class_id)
    return Episode(index=episode.index, split=episode.split,
                   class_ids=[class_id],
                   support=episode.support[row:row + 1].copy(),
                   patches=episode.patches, grid=episode.grid,
                   boxes=episode.boxes[keep].copy(),
                   labels=episode.labels[keep].copy())


# -- binary episode files -------------------------------------------------------


def _encode_episode(ep: Episode) -> bytes:
    buf = io.BytesIO()
    buf.write(struct.pack("<QBI", ep.index, _split_code(ep.split), len(ep.class_ids)))
    buf.write(np.asarray(ep.class_ids, dtype="<u4").tobytes())
    buf.write(struct.pack("<II", *ep.grid))
    for arr in (ep.support, ep.patches, ep.boxes):
        a = np.ascontiguousarray(arr, dtype="<f8")
        buf.write(struct.pack("<II", *a.shape))
        buf.write(a.tobytes())
    buf.write(struct.pack("<I", len(ep.labels)))
    buf.write(np.asarray(ep.labels, dtype="<u4").tobytes())
    return buf.getvalue()


def _decode_episode(blob: bytes) -> Episode:
    buf = io.BytesIO(blob)

    def read(fmt):
        size = struct.calcsize(fmt)
        raw = buf.read(size)
        if len(raw) != size:
            raise CorruptionError("episode record truncated")
        return struct.unpack(fmt, raw)

    index, split_code, c = read("<QBI")
    if split_code >= len(SPLITS):
        raise CorruptionError(f"episode record has invalid split code {split_code}")
    ids_raw = buf.read(4 * c)
    if len(ids_raw) != 4 * c:
        raise CorruptionError("episode record truncated")
    class_ids = np.frombuffer(ids_raw, dtype="<u4").astype(int).tolist()
    grid = read("<II")
    mats = []
    for _ in range(3):
        r, k = read("<II")
        raw = buf.read(8 * r * k)
        if len(raw) != 8 * r * k:
            raise CorruptionError("episode record truncated")
        mats.append(np.frombuffer(raw, dtype="<f8").reshape(r, k).copy())
    (g,) = read("<I")
    raw = buf.read(4 * g)
    if len(raw) != 4 * g:
        raise CorruptionError("episode record truncated")
    labels = np.frombuffer(raw, dtype="<u4").astype(np.int64)
    return Episode(index=index, split=SPLITS[split_code], class_ids=class_ids,
                   support=mats[0], patches=mats[1], grid=(grid[0], grid[1]),
                   boxes=mats[2], labels=labels)


def write_episodes(spec: BenchmarkSpec, count: int, path,
                   split: str = "train", start_index: int = 0) -> dict:
    """Materialize ``count`` consecutive episodes into one file; returns the
    manifest (format version, spec, split, count, per-episode digests, and
    the manifest digest printed by the CLI)."""
    records = [_encode_episode(generate_episode(spec, start_index + i, split))
               for i in range(count)]
    digests = [hashlib.sha256(r).digest() for r in records]

    spec_json = json.dumps({"spec": asdict(spec), "split": split,
                            "start_index": start_index},
                           sort_keys=True).encode("utf-8")
    header = io.BytesIO()
    header.write(_MAGIC)
    header.write(struct.pack("<II", _FORMAT_VERSION, len(records)))
    header.write(struct.pack("<I", len(spec_json)))
    header.write(spec_json)
    for d in digests:
        header.write(d)
    header_bytes = header.getvalue()

    with open(path, "wb") as fh:
        fh.write(header_bytes)
        for r in records:
            fh.write(struct.pack("<Q", len(r)))
            fh.write(r)

    manifest_digest = hashlib.sha256(header_bytes).hexdigest()
    return {"format_version": _FORMAT_VERSION, "count": count, "split": split,
            "spec": asdict(spec), "start_index": start_index,
            "episode_digests": [d.hex() for d in digests],
            "manifest_digest": manifest_digest}


def read_episodes(path) -> tuple[dict, list[Episode]]:
    """Load an episode file, validating structure and per-episode digests."""
    with open(path, "rb") as fh:
        blob = fh.read()
    buf = io.BytesIO(blob)
    magic = buf.read(4)
    if magic != _MAGIC:
        raise CorruptionError(f"{path}: not an episode file (bad magic {magic!r})")

    def read(fmt):
        size = struct.calcsize(fmt)
        raw = buf.read(size)
        if len(raw) != size:
            raise CorruptionError(f"{path}: truncated header")
        return struct.unpack(fmt, raw)

    version, count = read("<II")
    if version != _FORMAT_VERSION:
        raise CorruptionError(f"{path}: unsupported format version {version}")
    (spec_len,) = read("<I")
    spec_json = buf.read(spec_len)
    if len(spec_json) != spec_len:
        raise CorruptionError(f"{path}: truncated header")
    try:
        meta = json.loads(spec_json.decode("utf-8"))
        spec = BenchmarkSpec(**meta["spec"])
    except (ValueError, KeyError, TypeError) as exc:
        raise CorruptionError(f"{path}: unreadable spec block: {exc}") from exc

    digests = []
    for _ in range(count):
        d = buf.read(32)
        if len(d) != 32:
            raise CorruptionError(f"{path}: truncated digest table")
        digests.append(d)

    header_bytes = blob[:buf.tell()]
    episodes = []
    for i in range(count):
        raw = buf.read(8)
        if len(raw) != 8:
            raise CorruptionError(f"{path}: truncated before episode {i}")
        (rec_len,) = struct.unpack("<Q", raw)
        record = buf.read(rec_len)
        if len(record) != rec_len:
            raise CorruptionError(f"{path}: truncated inside episode {i}")
        if hashlib.sha256(record).digest() != digests[i]:
            raise CorruptionError(f"{path}: digest mismatch for episode {i}")
        episodes.append(_decode_episode(record))

    manifest = {"format_version": version, "count": count,
                "split": meta["split"], "spec": asdict(spec),
                "start_index": meta.get("start_index", 0),
                "episode_digests": [d.hex() for d in digests],
                "manifest_digest": hashlib.sha256(header_bytes).hexdigest()}
    return manifest, episodes


def nearest_prototype_accuracy(spec: BenchmarkSpec, split: str,
                               episode_count: int) -> float:
    """Oracle patch classifier: assign each patch to the most-similar center
    among {class prototypes, background mean}; returns mean accuracy. Used to
    validate that the confusion knobs really produce confusion."""
    protos = class_prototypes(spec, split)
    bg = background_direction(spec, split)
    centers = np.vstack([protos, bg[None, :]])
    centers = centers / np.linalg.norm(centers, axis=1, keepdims=True)
    correct = 0
    total = 0
    for i in range(episode_count):
        ep = generate_episode(spec, i, split)
        mask = ep.object_patch_mask()
        truth = np.full(len(mask), spec.class_count)  # background index
        rows, cols = ep.grid
        for box, label in zip(ep.boxes, ep.labels):
            cls = ep.class_ids.index(int(label))
            cx, cy, w, h = box
            c0, c1 = int(round((cx - w / 2) * cols)), int(round((cx + w / 2) * cols))
            r0, r1 = int(round((cy - h / 2) * rows)), int(round((cy + h / 2) * rows))
            for r in range(r0, r1):
                for col in range(c0, c1):
                    truth[r * cols + col] = cls
        feats = ep.patches / np.linalg.norm(ep.patches, axis=1, keepdims=True)
        pred = (feats @ centers.T).argmax(axis=1)
        correct += int((pred == truth).sum())
        total += len(mask)
    return correct / total


def separation_margins(spec: BenchmarkSpec, split: str,
                       episode_count: int) -> tuple[float, float]:
    """(object-background margin, inter-class margin) averaged over episodes.

    Object-background margin: cosine to the true class center minus cosine to
    the background center for object patches, and vice versa for background
    patches. Inter-class margin: cosine to the true class center minus the
    best other class, object patches only.
    """
    protos = class_prototypes(spec, split)
    bg = background_direction(spec, split)
    protos_u = protos / np.linalg.norm(protos, axis=1, keepdims=True)
    ob_vals = []
    oo_vals = []
    for i in range(episode_count):
        ep = generate_episode(spec, i, split)
        rows, cols = ep.grid
        truth = np.full(spec.num_patches, -1)
        for box, label in zip(ep.boxes, ep.labels):
            cls = ep.class_ids.index(int(label))
            cx, cy, w, h = box
            c0, c1 = int(round((cx - w / 2) * cols)), int(round((cx + w / 2) * cols))
            r0, r1 = int(round((cy - h / 2) * rows)), int(round((cy + h / 2) * rows))
            for r in range(r0, r1):
                for col in range(c0, c1):
                    truth[r * cols + col] = cls
        feats = ep.patches / np.linalg.norm(ep.patches, axis=1, keepdims=True)
        sim_cls = feats @ protos_u.T
        sim_bg = feats @ bg
        for p in range(spec.num_patches):
            if truth[p] >= 0:
                ob_vals.append(sim_cls[p, truth[p]] - sim_bg[p])
                if spec.class_count > 1:
                    others = np.delete(sim_cls[p], truth[p])
                    oo_vals.append(sim_cls[p, truth[p]] - others.max())
            else:
                ob_vals.append(sim_bg[p] - sim_cls[p].max())
    oo = float(np.mean(oo_vals)) if oo_vals else float("nan")
    return float(np.mean(ob_vals)), oo
