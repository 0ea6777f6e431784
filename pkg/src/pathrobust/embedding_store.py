"""Tile-embedding matrices, the PEB1 binary format, and cohort manifests.

PEB1 layout (all little-endian, no padding, no checksum)::

    bytes 0-3    magic b"PEB1"
    bytes 4-7    u32 version (1)
    bytes 8-11   u32 n_tiles
    bytes 12-15  u32 dim
    bytes 16-    n_tiles * dim binary32 values, row-major

Row ``i`` of every slide in a cohort is the same registered tissue location,
so tile correspondence between two slides is positional.

Manifests are JSON Lines, one slide per line::

    {"slide_id": "st00_sc00", "staining": "st00", "scanner": "sc00",
     "path": "slides/st00_sc00.peb", "n_tiles": 16278, "dim": 768}

Relative paths are resolved against the manifest's directory.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional

import numpy as np

from ._kernels import strict_sq_norms
from .exceptions import EmbeddingFormatError, ManifestError, ValidationError

MAGIC = b"PEB1"
VERSION = 1
HEADER = struct.Struct("<4sIII")
HEADER_SIZE = HEADER.size  # 16

UNIT_NORM_TOL = 1e-5


@dataclass(frozen=True)
class SlideRecord:
    slide_id: str
    staining_id: str
    scanner_id: str
    path: Path
    n_tiles: int
    dim: int

    def __post_init__(self):
        object.__setattr__(self, "path", Path(self.path))
        if self.n_tiles <= 0 or self.dim <= 0:
            raise ManifestError(
                f"slide {self.slide_id!r}: n_tiles and dim must be positive "
                f"(got {self.n_tiles}, {self.dim})"
            )

    def to_json(self, relative_to: Optional[Path] = None) -> str:
        path = self.path
        if relative_to is not None:
            try:
                path = Path(os.path.relpath(path, relative_to))
            except ValueError:
                pass
        record = {
            "slide_id": self.slide_id,
            "staining": self.staining_id,
            "scanner": self.scanner_id,
            "path": path.as_posix(),
            "n_tiles": self.n_tiles,
            "dim": self.dim,
        }
        return json.dumps(record)


@dataclass(frozen=True)
class CohortManifest:
    """Ordered slide records sharing one tessellation (same n_tiles and dim)."""

    slides: tuple[SlideRecord, ...]
    digest: str = ""
    _by_id: dict = field(default_factory=dict, init=False, repr=False, compare=False)

    def __post_init__(self):
        if not self.slides:
            raise ManifestError("empty manifest")
        seen_pairs = {}
        by_id = {}
        first = self.slides[0]
        for rec in self.slides:
            if rec.slide_id in by_id:
                raise ManifestError(f"duplicate slide_id {rec.slide_id!r}")
            key = (rec.staining_id, rec.scanner_id)
            if key in seen_pairs:
                raise ManifestError(
                    f"duplicate (staining, scanner) pair {key} for slides "
                    f"{seen_pairs[key]!r} and {rec.slide_id!r}"
                )
            if rec.n_tiles != first.n_tiles or rec.dim != first.dim:
                raise ManifestError(
                    f"slide {rec.slide_id!r} has shape {rec.n_tiles}x{rec.dim}, "
                    f"expected {first.n_tiles}x{first.dim} like {first.slide_id!r}"
                )
            seen_pairs[key] = rec.slide_id
            by_id[rec.slide_id] = rec
        self._by_id.update(by_id)

    @property
    def stainings(self) -> frozenset[str]:
        return frozenset(r.staining_id for r in self.slides)

    @property
    def scanners(self) -> frozenset[str]:
        return frozenset(r.scanner_id for r in self.slides)

    @property
    def n_tiles(self) -> int:
        return self.slides[0].n_tiles

    @property
    def dim(self) -> int:
        return self.slides[0].dim

    def __len__(self) -> int:
        return len(self.slides)

    def __getitem__(self, slide_id: str) -> SlideRecord:
        return self._by_id[slide_id]


def _parse_record(line: str, lineno: int, base: Path) -> SlideRecord:
    try:
        obj = json.loads(line)
    except json.JSONDecodeError as exc:
        raise ManifestError(f"line {lineno}: not valid JSON ({exc.msg})") from None
    if not isinstance(obj, dict):
        raise ManifestError(f"line {lineno}: expected a JSON object")
    missing = [k for k in ("slide_id", "staining", "scanner", "path", "n_tiles", "dim") if k not in obj]
    if missing:
        raise ManifestError(f"line {lineno}: missing field(s) {', '.join(missing)}")
    n_tiles, dim = obj["n_tiles"], obj["dim"]
    if not (isinstance(n_tiles, int) and isinstance(dim, int)) or isinstance(n_tiles, bool):
        raise ManifestError(f"line {lineno}: n_tiles and dim must be integers")
    path = Path(obj["path"])
    if not path.is_absolute():
        path = base / path
    try:
        return SlideRecord(
            slide_id=str(obj["slide_id"]),
            staining_id=str(obj["staining"]),
            scanner_id=str(obj["scanner"]),
            path=path,
            n_tiles=n_tiles,
            dim=dim,
        )
    except ManifestError as exc:
        raise ManifestError(f"line {lineno}: {exc}") from None


def _read_records(path: Path) -> tuple[tuple[SlideRecord, ...], bytes]:
    raw = path.read_bytes()
    records = []
    for lineno, line in enumerate(raw.decode("utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        records.append(_parse_record(line, lineno, path.parent))
    return tuple(records), raw


def load_manifest(path) -> CohortManifest:
    """Read a JSON Lines manifest; slide order is file order.

    Blank lines are skipped.  Raises ``ManifestError`` for malformed lines
    (with the 1-based line number), duplicate (staining, scanner) pairs and
    shape disagreements, and ``OSError`` if the file cannot be read.
    """
    records, raw = _read_records(Path(path))
    return CohortManifest(records, digest=hashlib.sha256(raw).hexdigest())


def load_slide_records(path) -> tuple[SlideRecord, ...]:
    """Read manifest lines without the one-slide-per-condition grid rule.

    Slide ids must still be unique.  Used for slide-level cohorts where many
    slides share a staining and scanner and tile counts vary.
    """
    records, _ = _read_records(Path(path))
    seen = set()
    for rec in records:
        if rec.slide_id in seen:
            raise ManifestError(f"duplicate slide_id {rec.slide_id!r}")
        seen.add(rec.slide_id)
    if not records:
        raise ManifestError("empty manifest")
    return records


def write_manifest(records: Iterable[SlideRecord], path) -> CohortManifest:
    path = Path(path)
    records = tuple(records)
    CohortManifest(records)  # validate before touching disk
    text = "".join(r.to_json(relative_to=path.parent) + "\n" for r in records)
    _atomic_write(path, text.encode("utf-8"))
    return load_manifest(path)


@dataclass(frozen=True)
class EmbeddingMatrix:
    """N x d tile features of one slide.

    Raw matrices hold float32 values as stored on disk.  ``normalize_rows``
    returns float64 unit rows with ``normalized=True``; the extra precision
    keeps rank decisions independent of a float32 re-rounding step.
    """

    values: np.ndarray
    normalized: bool = False

    def __post_init__(self):
        v = self.values
        if v.ndim != 2:
            raise ValidationError(f"embedding matrix must be 2-D, got shape {v.shape}")
        if v.shape[0] == 0 or v.shape[1] == 0:
            raise ValidationError(f"embedding matrix must be non-empty, got shape {v.shape}")
        bad = ~np.isfinite(v)
        if bad.any():
            r, c = np.argwhere(bad)[0]
            raise ValidationError(f"non-finite value at row {r}, col {c}")
        if self.normalized:
            norms = np.sqrt(strict_sq_norms(np.ascontiguousarray(v, dtype=np.float64)))
            off = np.abs(norms - 1.0) > UNIT_NORM_TOL
            if off.any():
                raise ValidationError(
                    f"row {int(np.argmax(off))} is not unit norm (norm={norms[off][0]:.6g})"
                )
        v.setflags(write=False)

    @classmethod
    def from_array(cls, array) -> "EmbeddingMatrix":
        arr = np.array(array, dtype=np.float32, order="C", copy=True)
        return cls(arr)

    @property
    def n_tiles(self) -> int:
        return self.values.shape[0]

    @property
    def dim(self) -> int:
        return self.values.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    def __eq__(self, other):
        if not isinstance(other, EmbeddingMatrix):
            return NotImplemented
        return (
            self.normalized == other.normalized
            and self.values.dtype == other.values.dtype
            and self.values.shape == other.values.shape
            and self.values.tobytes() == other.values.tobytes()
        )

    __hash__ = None


def read_embedding_header(path) -> tuple[int, int]:
    """Return ``(n_tiles, dim)`` after checking magic, version and file size."""
    path = Path(path)
    with open(path, "rb") as fh:
        head = fh.read(HEADER_SIZE)
    n_tiles, dim = _check_header(head, path)
    expected = HEADER_SIZE + 4 * n_tiles * dim
    actual = path.stat().st_size
    if actual != expected:
        raise EmbeddingFormatError(
            f"{path}: payload size mismatch, header declares {n_tiles}x{dim} "
            f"({expected} bytes) but file has {actual} bytes"
        )
    return n_tiles, dim


def _check_header(head: bytes, path) -> tuple[int, int]:
    if len(head) < HEADER_SIZE:
        raise EmbeddingFormatError(f"{path}: truncated header ({len(head)} bytes)")
    magic, version, n_tiles, dim = HEADER.unpack(head)
    if magic != MAGIC:
        raise EmbeddingFormatError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise EmbeddingFormatError(f"{path}: unsupported version {version}")
    if n_tiles == 0 or dim == 0:
        raise EmbeddingFormatError(f"{path}: empty matrix {n_tiles}x{dim}")
    return n_tiles, dim


def read_embedding_file(path) -> EmbeddingMatrix:
    path = Path(path)
    data = path.read_bytes()
    n_tiles, dim = _check_header(data[:HEADER_SIZE], path)
    payload = len(data) - HEADER_SIZE
    expected = 4 * n_tiles * dim
    if payload < expected:
        raise EmbeddingFormatError(
            f"{path}: truncated payload, header declares {n_tiles}x{dim} "
            f"({n_tiles * dim} floats) but only {payload // 4} present"
        )
    if payload > expected:
        raise EmbeddingFormatError(f"{path}: {payload - expected} trailing bytes after payload")
    values = np.frombuffer(data, dtype="<f4", count=n_tiles * dim, offset=HEADER_SIZE)
    values = values.astype(np.float32).reshape(n_tiles, dim)
    try:
        return EmbeddingMatrix(values)
    except ValidationError as exc:
        raise EmbeddingFormatError(f"{path}: {exc}") from None


def encode_embedding(matrix: EmbeddingMatrix) -> bytes:
    values = np.ascontiguousarray(matrix.values, dtype="<f4")
    n_tiles, dim = values.shape
    return HEADER.pack(MAGIC, VERSION, n_tiles, dim) + values.tobytes()


def write_embedding_file(matrix: EmbeddingMatrix, path) -> None:
    """Write ``matrix`` as PEB1.  Normalized float64 matrices are stored as float32."""
    _atomic_write(Path(path), encode_embedding(matrix))


def _atomic_write(path: Path, data: bytes) -> None:
    tmp = path.with_name(f".{path.name}.{os.getpid()}.tmp")
    try:
        with open(tmp, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    finally:
        if tmp.exists():
            tmp.unlink()


def normalize_rows(matrix: EmbeddingMatrix) -> EmbeddingMatrix:
    """Scale every row to unit Euclidean norm (float64 result).

    Raises ``ValidationError`` naming the first all-zero row.
    """
    if matrix.normalized:
        return matrix
    v = np.ascontiguousarray(matrix.values, dtype=np.float64)
    norms = np.sqrt(strict_sq_norms(v))
    zero = norms == 0.0
    if zero.any():
        raise ValidationError(f"zero row at index {int(np.argmax(zero))}; cosine similarity undefined")
    return EmbeddingMatrix(v / norms[:, None], normalized=True)


def concat_cls_mean(cls_token, patch_tokens) -> np.ndarray:
    """Slide-agnostic tile embedding: class token followed by the mean patch token."""
    cls_token = np.asarray(cls_token, dtype=np.float64)
    patch_tokens = np.asarray(patch_tokens, dtype=np.float64)
    if cls_token.ndim != 1:
        raise ValidationError("class token must be a vector")
    if patch_tokens.ndim != 2 or patch_tokens.shape[0] == 0:
        raise ValidationError("patch tokens must be a non-empty P x d matrix")
    if patch_tokens.shape[1] != cls_token.shape[0]:
        raise ValidationError(
            f"dimension mismatch: class token has {cls_token.shape[0]}, "
            f"patch tokens have {patch_tokens.shape[1]}"
        )
    return np.concatenate([cls_token, patch_tokens.mean(axis=0)])
