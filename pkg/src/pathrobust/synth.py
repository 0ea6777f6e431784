"""Seeded synthetic staining x scanner cohorts for tests and demos.

Every slide shares one base matrix of random unit tiles.  Slide (s, c) is
``normalize(base + sigma_st * O_s + sigma_sc * O_c)`` where ``O_s`` and
``O_c`` are Gaussian offset matrices drawn once per staining and per
scanner (entries with variance 1/dim, so offset rows have norm ~1).
Raising either sigma moves slides further from each other.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .embedding_store import (
    CohortManifest,
    EmbeddingMatrix,
    SlideRecord,
    write_embedding_file,
    write_manifest,
)
from .exceptions import ValidationError

MANIFEST_NAME = "manifest.jsonl"


@dataclass(frozen=True)
class SynthSpec:
    n_stainings: int = 13
    n_scanners: int = 7
    n_tiles: int = 256
    dim: int = 32
    staining_noise: float = 0.2
    scanner_noise: float = 0.1
    seed: int = 0

    def __post_init__(self):
        for name in ("n_stainings", "n_scanners", "n_tiles", "dim"):
            if getattr(self, name) < 1:
                raise ValidationError(f"{name} must be >= 1")
        if self.staining_noise < 0 or self.scanner_noise < 0:
            raise ValidationError("noise scales must be non-negative")
        if self.seed < 0:
            raise ValidationError("seed must be non-negative")


def staining_id(s: int) -> str:
    return f"st{s:02d}"


def scanner_id(c: int) -> str:
    return f"sc{c:02d}"


def _unit_rows(x: np.ndarray) -> np.ndarray:
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def _offset(spec: SynthSpec, axis: int, index: int) -> np.ndarray:
    rng = np.random.default_rng([spec.seed, axis, index])
    return rng.standard_normal((spec.n_tiles, spec.dim)) / np.sqrt(spec.dim)


def synth_cohort(spec: SynthSpec, out_dir) -> CohortManifest:
    """Write one PEB1 file per (staining, scanner) plus ``manifest.jsonl``."""
    out_dir = Path(out_dir)
    slide_dir = out_dir / "slides"
    slide_dir.mkdir(parents=True, exist_ok=True)

    base = _unit_rows(np.random.default_rng([spec.seed, 0]).standard_normal((spec.n_tiles, spec.dim)))
    scanner_offsets = {}
    records = []
    for s in range(spec.n_stainings):
        st_off = _offset(spec, 1, s) if spec.staining_noise else None
        for c in range(spec.n_scanners):
            x = base.copy()
            if st_off is not None:
                x += spec.staining_noise * st_off
            if spec.scanner_noise:
                if c not in scanner_offsets:
                    scanner_offsets[c] = _offset(spec, 2, c)
                x += spec.scanner_noise * scanner_offsets[c]
            sid = f"{staining_id(s)}_{scanner_id(c)}"
            path = slide_dir / f"{sid}.peb"
            write_embedding_file(EmbeddingMatrix.from_array(_unit_rows(x)), path)
            records.append(SlideRecord(sid, staining_id(s), scanner_id(c), path, spec.n_tiles, spec.dim))
    return write_manifest(records, out_dir / MANIFEST_NAME)
