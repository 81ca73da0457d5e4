"""Word-image dataset construction: procedural per-writer glyph atlases,
horizontal word composition, writer-disjoint splits, and manifest I/O.

Synthetic glyphs stand in for a handwritten corpus: every character gets a
base stroke pattern shared by its row (shape family) plus a column-specific
mark, and every writer applies a deterministic affine-plus-noise distortion.
A real atlas can be mounted from a directory with the same layout.
"""

from __future__ import annotations

import hashlib
import io
from dataclasses import dataclass
from pathlib import Path, PurePosixPath

import numpy as np
from PIL import Image

from .alphabet import LabelMap, label_map_hash, rows_of, save_label_map

GLYPH_SIZE = 32
DEFAULT_MIN_LEN = 2
DEFAULT_MAX_LEN = 12

# per-writer distortion bounds
MAX_ROTATION_DEG = 8.0
MAX_TRANSLATION_PX = 2.0
MAX_WIDTH_DELTA = 1.0
NOISE_SIGMA = 0.05

# seed-stream tags so the base/column/writer/noise draws never collide
_BASE_TAG = 101
_COL_TAG = 211
_WRITER_TAG = 307
_NOISE_TAG = 401


class GlyphMissingError(LookupError):
    """Atlas has no glyph for the requested (char_id, writer_id)."""


class ManifestError(ValueError):
    """Manifest file is malformed or references bad image data."""


@dataclass(frozen=True)
class GlyphImage:
    pixels: np.ndarray  # (32, 32) float32 in [0, 1], ink = 1.0
    char_id: int
    writer_id: int

    def __post_init__(self):
        if self.pixels.shape != (GLYPH_SIZE, GLYPH_SIZE):
            raise ValueError(f"glyph must be {GLYPH_SIZE}x{GLYPH_SIZE}, got {self.pixels.shape}")
        if self.pixels.min() < 0.0 or self.pixels.max() > 1.0:
            raise ValueError("glyph pixel values must lie in [0, 1]")


@dataclass(frozen=True)
class WordSample:
    image: np.ndarray  # (32, 32 * L) float32 in [0, 1]
    chars: tuple[int, ...]
    rows: tuple[int, ...]
    writer_id: int
    word_id: str

    def __post_init__(self):
        expect = (GLYPH_SIZE, GLYPH_SIZE * len(self.chars))
        if self.image.shape != expect:
            raise ValueError(f"word image shape {self.image.shape}, expected {expect}")
        if len(self.rows) != len(self.chars):
            raise ValueError("rows and chars must have equal length")


@dataclass(frozen=True)
class ManifestRecord:
    word_id: str
    writer_id: int
    path: str  # POSIX-style, relative to the manifest directory
    sha256: str
    chars: tuple[int, ...]
    rows: tuple[int, ...]


@dataclass
class DatasetManifest:
    root: Path
    seed: int
    label_map_path: str
    label_map_sha256: str
    atlas: str
    splits: dict[str, list[ManifestRecord]]

    def writer_ids(self, split: str) -> set[int]:
        return {rec.writer_id for rec in self.splits[split]}


# ---------------------------------------------------------------------------
# glyph synthesis


def _segment_ink(canvas_pts, p0, p1, width):
    v = p1 - p0
    denom = max(float(v @ v), 1e-9)
    t = np.clip(((canvas_pts - p0) @ v) / denom, 0.0, 1.0)
    proj = p0 + t[:, None] * v
    dist = np.linalg.norm(canvas_pts - proj, axis=1)
    # solid core of radius width/2 with a one-pixel soft edge
    return np.clip(0.5 * width + 0.5 - dist, 0.0, 1.0)


_GRID_Y, _GRID_X = np.mgrid[0:GLYPH_SIZE, 0:GLYPH_SIZE]
_CANVAS_PTS = np.stack([_GRID_X + 0.5, _GRID_Y + 0.5], axis=-1).reshape(-1, 2).astype(np.float64)

_COL_ANCHORS = [(24.0, 7.0), (7.0, 24.0), (25.0, 25.0), (7.0, 7.0), (16.0, 5.0), (5.0, 16.0)]


def _base_segments(row_key: int, seed: int):
    """Stroke skeleton shared by every character of one row (shape family)."""
    rng = np.random.default_rng([seed, _BASE_TAG, row_key])
    n_strokes = int(rng.integers(2, 4))
    segments = []
    for _ in range(n_strokes):
        p0 = rng.uniform(6.0, 26.0, size=2)
        p1 = rng.uniform(6.0, 26.0, size=2)
        # avoid degenerate dots
        if np.linalg.norm(p1 - p0) < 6.0:
            p1 = p0 + (p1 - p0) * 3.0 + rng.uniform(-2.0, 2.0, size=2)
        width = rng.uniform(2.2, 3.2)
        segments.append((p0, np.clip(p1, 2.0, 30.0), width))
    return segments


def _column_segment(col_key: int, seed: int):
    """Distinguishing mark added for one column position, shared across rows."""
    rng = np.random.default_rng([seed, _COL_TAG, col_key])
    anchor = np.asarray(_COL_ANCHORS[col_key % len(_COL_ANCHORS)])
    p0 = anchor + rng.uniform(-2.5, 2.5, size=2)
    angle = rng.uniform(0.0, 2.0 * np.pi)
    length = rng.uniform(4.0, 7.0)
    p1 = p0 + length * np.array([np.cos(angle), np.sin(angle)])
    width = rng.uniform(1.8, 2.6)
    return np.clip(p0, 2.0, 30.0), np.clip(p1, 2.0, 30.0), width


def _writer_params(writer_id: int, seed: int):
    rng = np.random.default_rng([seed, _WRITER_TAG, writer_id])
    theta = np.deg2rad(rng.uniform(-MAX_ROTATION_DEG, MAX_ROTATION_DEG))
    shift = rng.uniform(-MAX_TRANSLATION_PX, MAX_TRANSLATION_PX, size=2)
    width_delta = rng.uniform(-MAX_WIDTH_DELTA, MAX_WIDTH_DELTA)
    return theta, shift, width_delta


def _apply_writer(segments, theta, shift, width_delta):
    center = np.array([GLYPH_SIZE / 2.0, GLYPH_SIZE / 2.0])
    rot = np.array([[np.cos(theta), -np.sin(theta)], [np.sin(theta), np.cos(theta)]])
    out = []
    for p0, p1, width in segments:
        q0 = (p0 - center) @ rot.T + center + shift
        q1 = (p1 - center) @ rot.T + center + shift
        out.append((q0, q1, max(0.8, width + width_delta)))
    return out


def synth_glyph(char_id: int, writer_id: int, seed: int, label_map: LabelMap | None = None) -> GlyphImage:
    """Deterministic procedural glyph for (char_id, writer_id, seed).

    With a label map, characters in the same row share their base strokes and
    the column index picks the distinguishing mark; without one, each char_id
    gets its own base pattern.
    """
    if char_id < 0 or writer_id < 0:
        raise ValueError("char_id and writer_id must be non-negative")
    if label_map is not None:
        if char_id >= label_map.num_chars:
            raise ValueError(f"char_id {char_id} outside label map [0, {label_map.num_chars})")
        row_key = label_map.row_of[char_id]
        col_key = label_map.column_of(char_id)
    else:
        row_key, col_key = char_id, 0

    segments = _base_segments(row_key, seed) + [_column_segment(col_key, seed)]
    segments = _apply_writer(segments, *_writer_params(writer_id, seed))

    flat = np.zeros(GLYPH_SIZE * GLYPH_SIZE)
    for p0, p1, width in segments:
        flat = np.maximum(flat, _segment_ink(_CANVAS_PTS, p0, p1, width))
    img = flat.reshape(GLYPH_SIZE, GLYPH_SIZE)

    noise_rng = np.random.default_rng([seed, _NOISE_TAG, char_id, writer_id])
    img = img + noise_rng.normal(0.0, NOISE_SIGMA, img.shape)
    return GlyphImage(np.clip(img, 0.0, 1.0).astype(np.float32), char_id, writer_id)


class SyntheticAtlas:
    """Procedural glyph source; glyphs are computed on demand and cached."""

    def __init__(self, label_map: LabelMap, seed: int):
        self.label_map = label_map
        self.seed = seed
        self._cache: dict[tuple[int, int], np.ndarray] = {}

    def glyph(self, char_id: int, writer_id: int) -> np.ndarray:
        if not 0 <= char_id < self.label_map.num_chars:
            raise GlyphMissingError(f"no glyph for char {char_id} (writer {writer_id})")
        key = (char_id, writer_id)
        if key not in self._cache:
            self._cache[key] = synth_glyph(char_id, writer_id, self.seed, self.label_map).pixels
        return self._cache[key]

    def describe(self) -> str:
        return "synthetic"


class DirectoryAtlas:
    """Glyphs from disk, laid out as <root>/<writer_id>/<char_id>.png
    (8-bit grayscale, 32x32)."""

    def __init__(self, root, label_map: LabelMap):
        self.root = Path(root)
        self.label_map = label_map
        self._cache: dict[tuple[int, int], np.ndarray] = {}

    def glyph(self, char_id: int, writer_id: int) -> np.ndarray:
        key = (char_id, writer_id)
        if key in self._cache:
            return self._cache[key]
        path = self.root / str(writer_id) / f"{char_id}.png"
        if not path.is_file():
            raise GlyphMissingError(f"no glyph for char {char_id}, writer {writer_id}: {path}")
        img = Image.open(path)
        if img.mode != "L":
            raise ManifestError(f"atlas glyph {path} is not 8-bit grayscale")
        arr = np.asarray(img)
        if arr.shape != (GLYPH_SIZE, GLYPH_SIZE):
            raise ManifestError(f"atlas glyph {path} has shape {arr.shape}")
        pixels = (arr.astype(np.float32) / 255.0).astype(np.float32)
        self._cache[key] = pixels
        return pixels

    def describe(self) -> str:
        return f"dir:{self.root}"


def export_atlas(atlas, out_root, writer_ids) -> int:
    """Write every (char, writer) glyph as PNG in the directory layout read
    by DirectoryAtlas. Returns the number of files written."""
    out_root = Path(out_root)
    count = 0
    for writer_id in writer_ids:
        wdir = out_root / str(writer_id)
        wdir.mkdir(parents=True, exist_ok=True)
        for char_id in range(atlas.label_map.num_chars):
            _write_png(atlas.glyph(char_id, writer_id), wdir / f"{char_id}.png")
            count += 1
    return count


# ---------------------------------------------------------------------------
# word composition and dataset build


def compose_word_image(chars, writer_id: int, atlas, word_id: str = "") -> WordSample:
    """Concatenate the writer's glyphs horizontally, in sequence order."""
    chars = tuple(int(c) for c in chars)
    if not chars:
        raise ValueError("cannot compose an empty word")
    blocks = [atlas.glyph(c, writer_id) for c in chars]
    image = np.concatenate(blocks, axis=1)
    return WordSample(
        image=image,
        chars=chars,
        rows=rows_of(chars, atlas.label_map),
        writer_id=writer_id,
        word_id=word_id,
    )


def plan_writer_splits(counts) -> dict[str, tuple[int, ...]]:
    """Assign consecutive writer ids to train/val/test; disjoint by construction."""
    names = ("train", "val", "test")
    if len(counts) != 3 or any(int(c) < 1 for c in counts):
        raise ValueError(f"need three positive writer counts, got {counts}")
    out = {}
    start = 0
    for name, count in zip(names, counts):
        out[name] = tuple(range(start, start + int(count)))
        start += int(count)
    return out


def expected_counts(word_counts, writer_counts) -> dict[str, int]:
    """Sample count law per split: |split| = words x writers. Pure arithmetic;
    generates nothing."""
    names = ("train", "val", "test")
    if len(word_counts) != 3 or len(writer_counts) != 3:
        raise ValueError("need three word counts and three writer counts")
    return {n: int(w) * int(r) for n, w, r in zip(names, word_counts, writer_counts)}


def random_words(count: int, num_chars: int, rng, min_len: int = DEFAULT_MIN_LEN,
                 max_len: int = DEFAULT_MAX_LEN) -> list[tuple[int, ...]]:
    """Sample `count` distinct words with uniform lengths in [min_len, max_len]."""
    if min_len < 1 or max_len < min_len:
        raise ValueError(f"bad length bounds [{min_len}, {max_len}]")
    words: list[tuple[int, ...]] = []
    seen = set()
    attempts = 0
    while len(words) < count:
        attempts += 1
        if attempts > 200 * count + 1000:
            raise ValueError(
                f"could not sample {count} distinct words from {num_chars} chars "
                f"with lengths [{min_len}, {max_len}]"
            )
        length = int(rng.integers(min_len, max_len + 1))
        word = tuple(int(x) for x in rng.integers(0, num_chars, size=length))
        if word not in seen:
            seen.add(word)
            words.append(word)
    return words


def _write_png(pixels: np.ndarray, path: Path) -> tuple[bytes, str]:
    data = np.clip(np.rint(pixels * 255.0), 0, 255).astype(np.uint8)
    buf = io.BytesIO()
    Image.fromarray(data, mode="L").save(buf, format="PNG")
    raw = buf.getvalue()
    path.write_bytes(raw)
    return raw, hashlib.sha256(raw).hexdigest()


def _validate_build_inputs(words_by_split, writers_by_split, label_map, min_len, max_len):
    if set(words_by_split) != set(writers_by_split):
        raise ValueError(
            f"split names differ: words {sorted(words_by_split)} vs writers {sorted(writers_by_split)}"
        )
    seen_writers: dict[int, str] = {}
    for split, writers in writers_by_split.items():
        if not writers:
            raise ValueError(f"split {split!r} has no writers")
        for w in writers:
            if w in seen_writers:
                raise ValueError(
                    f"writer {w} appears in both {seen_writers[w]!r} and {split!r}; "
                    "splits must be writer-disjoint"
                )
            seen_writers[w] = split
    for split, words in words_by_split.items():
        if not words:
            raise ValueError(f"split {split!r} has no words")
        for idx, word in enumerate(words):
            if not min_len <= len(word) <= max_len:
                raise ValueError(
                    f"{split} word {idx} has length {len(word)}, outside [{min_len}, {max_len}]"
                )
            for c in word:
                if not 0 <= int(c) < label_map.num_chars:
                    raise ValueError(f"{split} word {idx} uses char id {c}, not in the label map")


def build_dataset(words_by_split, writers_by_split, atlas, out_dir, seed: int,
                  min_len: int = DEFAULT_MIN_LEN, max_len: int = DEFAULT_MAX_LEN) -> DatasetManifest:
    """Render every (word, writer) pair per split and write images, the label
    map, and the manifest under out_dir. Fully deterministic given the atlas
    and seed; all validation happens before anything is written."""
    label_map = atlas.label_map
    _validate_build_inputs(words_by_split, writers_by_split, label_map, min_len, max_len)

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    save_label_map(label_map, out_dir / "label_map.tsv")

    splits: dict[str, list[ManifestRecord]] = {}
    for split, words in words_by_split.items():
        (out_dir / "images" / split).mkdir(parents=True, exist_ok=True)
        records = []
        for word_idx, word in enumerate(words):
            word_id = f"w{word_idx:05d}"
            for writer_id in writers_by_split[split]:
                sample = compose_word_image(word, writer_id, atlas, word_id=word_id)
                rel = PurePosixPath("images") / split / f"{word_id}_wr{writer_id:03d}.png"
                _, digest = _write_png(sample.image, out_dir / Path(rel))
                records.append(
                    ManifestRecord(
                        word_id=word_id,
                        writer_id=writer_id,
                        path=str(rel),
                        sha256=digest,
                        chars=sample.chars,
                        rows=sample.rows,
                    )
                )
        splits[split] = records

    manifest = DatasetManifest(
        root=out_dir,
        seed=seed,
        label_map_path="label_map.tsv",
        label_map_sha256=label_map_hash(label_map),
        atlas=atlas.describe(),
        splits=splits,
    )
    save_manifest(manifest, out_dir / "manifest.tsv")
    return manifest


# ---------------------------------------------------------------------------
# manifest I/O


def _ids_to_str(ids) -> str:
    return ",".join(str(int(x)) for x in ids)


def _ids_from_str(text: str) -> tuple[int, ...]:
    return tuple(int(x) for x in text.split(",")) if text else ()


def save_manifest(manifest: DatasetManifest, path) -> None:
    lines = [
        "#rowctc-manifest v=1",
        f"#seed={manifest.seed}",
        f"#label_map={manifest.label_map_path}",
        f"#label_map_sha256={manifest.label_map_sha256}",
        f"#atlas={manifest.atlas}",
        "#fields=split word_id writer_id path sha256 chars rows",
    ]
    for split, records in manifest.splits.items():
        for rec in records:
            lines.append(
                "\t".join(
                    (
                        split,
                        rec.word_id,
                        str(rec.writer_id),
                        rec.path,
                        rec.sha256,
                        _ids_to_str(rec.chars),
                        _ids_to_str(rec.rows),
                    )
                )
            )
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def load_manifest(path) -> DatasetManifest:
    """Parse a manifest and verify every referenced image file exists.

    Pixel-level checks (dimensions, checksums) happen in iterate_split.
    """
    path = Path(path)
    if not path.is_file():
        raise ManifestError(f"manifest not found: {path}")
    root = path.parent
    header: dict[str, str] = {}
    splits: dict[str, list[ManifestRecord]] = {}
    with open(path, "r", encoding="utf-8") as fh:
        first = fh.readline().rstrip("\n")
        if first != "#rowctc-manifest v=1":
            raise ManifestError(f"unrecognized manifest header {first!r}")
        for lineno, line in enumerate(fh, start=2):
            line = line.rstrip("\n")
            if not line:
                continue
            if line.startswith("#"):
                key, _, value = line[1:].partition("=")
                header[key] = value
                continue
            parts = line.split("\t")
            if len(parts) != 7:
                raise ManifestError(f"line {lineno}: expected 7 tab-separated fields")
            split, word_id, writer_id, rel, digest, chars, rows = parts
            try:
                rec = ManifestRecord(
                    word_id=word_id,
                    writer_id=int(writer_id),
                    path=rel,
                    sha256=digest,
                    chars=_ids_from_str(chars),
                    rows=_ids_from_str(rows),
                )
            except ValueError as exc:
                raise ManifestError(f"line {lineno}: {exc}") from exc
            splits.setdefault(split, []).append(rec)

    for key in ("seed", "label_map", "label_map_sha256", "atlas"):
        if key not in header:
            raise ManifestError(f"manifest header missing #{key}=")
    for split, records in splits.items():
        for rec in records:
            if not (root / Path(rec.path)).is_file():
                raise ManifestError(f"{split} image missing: {root / Path(rec.path)}")

    return DatasetManifest(
        root=root,
        seed=int(header["seed"]),
        label_map_path=header["label_map"],
        label_map_sha256=header["label_map_sha256"],
        atlas=header["atlas"],
        splits=splits,
    )


def iterate_split(manifest: DatasetManifest, split: str):
    """Yield WordSamples in manifest order, verifying checksum and dimensions."""
    if split not in manifest.splits:
        raise ManifestError(f"manifest has no split {split!r} (has {sorted(manifest.splits)})")
    for rec in manifest.splits[split]:
        full = manifest.root / Path(rec.path)
        try:
            raw = full.read_bytes()
        except OSError as exc:
            raise ManifestError(f"cannot read image {full}: {exc}") from exc
        if hashlib.sha256(raw).hexdigest() != rec.sha256:
            raise ManifestError(f"checksum mismatch for {full}")
        arr = np.asarray(Image.open(io.BytesIO(raw)))
        expect = (GLYPH_SIZE, GLYPH_SIZE * len(rec.chars))
        if arr.shape != expect:
            raise ManifestError(f"{full} has shape {arr.shape}, manifest implies {expect}")
        yield WordSample(
            image=(arr.astype(np.float32) / 255.0),
            chars=rec.chars,
            rows=rec.rows,
            writer_id=rec.writer_id,
            word_id=rec.word_id,
        )
