"""Binary artifact formats shared across the pipeline.

Matrix files ("PLMB"): magic, u32 version=1, u32 rows, u32 dim, then rows of
little-endian f32. A sidecar index file holds one `article_id<TAB>sentence_index`
line per row.

Checkpoint files ("PLMC"): magic, u32 version=1, u32 metadata length, UTF-8
JSON metadata, u32 section count, then sections of
(u32 name length, name bytes, u32 rank, u32 dims..., f32 little-endian payload).
Section names are stable dotted identifiers such as `planner.w_o` or
`lm.layer3.adapter.e_a`.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .errors import MissingArtifactError, ValidationError

MATRIX_MAGIC = b"PLMB"
CHECKPOINT_MAGIC = b"PLMC"
FORMAT_VERSION = 1


def _u32(value: int) -> bytes:
    return struct.pack("<I", value)


def _read_u32(fh) -> int:
    raw = fh.read(4)
    if len(raw) != 4:
        raise ValidationError("truncated file")
    return struct.unpack("<I", raw)[0]


# -- matrix format -------------------------------------------------------------


def write_matrix(path: Path, matrix: np.ndarray) -> None:
    matrix = np.ascontiguousarray(matrix, dtype="<f4")
    if matrix.ndim != 2:
        raise ValidationError(f"matrix must be 2-D, got shape {matrix.shape}")
    with open(path, "wb") as fh:
        fh.write(MATRIX_MAGIC)
        fh.write(_u32(FORMAT_VERSION))
        fh.write(_u32(matrix.shape[0]))
        fh.write(_u32(matrix.shape[1]))
        fh.write(matrix.tobytes())


def read_matrix(path: Path) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise MissingArtifactError(str(path))
    with open(path, "rb") as fh:
        if fh.read(4) != MATRIX_MAGIC:
            raise ValidationError(f"{path}: not a PLMB matrix file")
        version = _read_u32(fh)
        if version != FORMAT_VERSION:
            raise ValidationError(f"{path}: unsupported version {version}")
        rows, dim = _read_u32(fh), _read_u32(fh)
        data = np.frombuffer(fh.read(rows * dim * 4), dtype="<f4")
        if data.size != rows * dim:
            raise ValidationError(f"{path}: truncated payload")
    return data.reshape(rows, dim).astype(np.float32)


def write_matrix_index(path: Path, index: list[tuple[str, int]]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for article_id, sentence_index in index:
            fh.write(f"{article_id}\t{sentence_index}\n")


def read_matrix_index(path: Path) -> list[tuple[str, int]]:
    path = Path(path)
    if not path.exists():
        raise MissingArtifactError(str(path))
    out = []
    for line in path.read_text(encoding="utf-8").splitlines():
        article_id, _, idx = line.partition("\t")
        out.append((article_id, int(idx)))
    return out


# -- checkpoint format -----------------------------------------------------------


def write_checkpoint(path: Path, sections: dict[str, np.ndarray],
                     meta: dict | None = None) -> None:
    meta_bytes = json.dumps(meta or {}, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(_u32(FORMAT_VERSION))
        fh.write(_u32(len(meta_bytes)))
        fh.write(meta_bytes)
        fh.write(_u32(len(sections)))
        for name, arr in sections.items():
            arr = np.ascontiguousarray(arr, dtype="<f4")
            name_bytes = name.encode("utf-8")
            fh.write(_u32(len(name_bytes)))
            fh.write(name_bytes)
            fh.write(_u32(arr.ndim))
            for dim in arr.shape:
                fh.write(_u32(dim))
            fh.write(arr.tobytes())


def read_checkpoint(path: Path) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    if not path.exists():
        raise MissingArtifactError(str(path))
    with open(path, "rb") as fh:
        if fh.read(4) != CHECKPOINT_MAGIC:
            raise ValidationError(f"{path}: not a PLMC checkpoint")
        version = _read_u32(fh)
        if version != FORMAT_VERSION:
            raise ValidationError(f"{path}: unsupported version {version}")
        meta_len = _read_u32(fh)
        meta = json.loads(fh.read(meta_len).decode("utf-8")) if meta_len else {}
        count = _read_u32(fh)
        sections: dict[str, np.ndarray] = {}
        for _ in range(count):
            name_len = _read_u32(fh)
            name = fh.read(name_len).decode("utf-8")
            rank = _read_u32(fh)
            shape = tuple(_read_u32(fh) for _ in range(rank))
            n = int(np.prod(shape)) if shape else 1
            data = np.frombuffer(fh.read(n * 4), dtype="<f4")
            if data.size != n:
                raise ValidationError(f"{path}: truncated section {name}")
            sections[name] = data.reshape(shape).astype(np.float32)
    return sections, meta


# -- action sequence files ---------------------------------------------------------


def write_action_sequences(path: Path, sequences: dict[str, list[int]]) -> None:
    """One line per article: `article_id<TAB>a_0 a_1 ... a_{m-1}`."""
    with open(path, "w", encoding="utf-8") as fh:
        for article_id, actions in sequences.items():
            fh.write(f"{article_id}\t{' '.join(str(a) for a in actions)}\n")


def read_action_sequences(path: Path) -> dict[str, list[int]]:
    path = Path(path)
    if not path.exists():
        raise MissingArtifactError(str(path))
    out: dict[str, list[int]] = {}
    for line in path.read_text(encoding="utf-8").splitlines():
        article_id, _, rest = line.partition("\t")
        out[article_id] = [int(a) for a in rest.split()] if rest.strip() else []
    return out


# -- manifests -----------------------------------------------------------------------


def file_sha256(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def write_manifest(artifact_path: Path, subcommand: str, config_digest: str,
                   seed: int | None, inputs: list[Path],
                   wall_time_s: float, extra: dict | None = None) -> Path:
    manifest = {
        "artifact": Path(artifact_path).name,
        "subcommand": subcommand,
        "config_digest": config_digest,
        "seed": seed,
        "inputs": {str(p): file_sha256(p) for p in inputs},
        "wall_time_s": round(wall_time_s, 3),
        "extra": extra or {},
    }
    out = manifest_path(artifact_path)
    out.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n",
                   encoding="utf-8")
    return out


def manifest_path(artifact_path: Path) -> Path:
    p = Path(artifact_path)
    return p.with_name(p.name + ".manifest.json")


def read_manifest(artifact_path: Path) -> dict | None:
    p = manifest_path(artifact_path)
    if not p.exists():
        return None
    return json.loads(p.read_text(encoding="utf-8"))
