"""Datasets, labels, embedding storage, splits and the on-disk formats shared by the pipeline."""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

CANONICAL_RESIDUES = "ACDEFGHIKLMNPQRSTVWY"
_RESIDUE_SET = frozenset(CANONICAL_RESIDUES)

FDDE_MAGIC = b"FDDE"
FDDE_VERSION = 1
# layer is stored as u32; the all-ones pattern encodes the -1 sentinel used
# when the container holds a non-layer matrix (operators, coordinates).
_LAYER_SENTINEL = 0xFFFFFFFF


class FddeFormatError(ValueError):
    """Raised when a .fdde file is malformed (magic, version, shape, truncation)."""


class ChecksumMismatchError(FddeFormatError):
    """Raised when the trailing CRC-64 does not match the file contents."""


class SequenceParseError(ValueError):
    """Raised on malformed sequence files; message carries the line number."""


# ---------------------------------------------------------------------------
# CRC-64 (ECMA-182 polynomial, reflected, init/xorout all-ones; the XZ variant)
# ---------------------------------------------------------------------------

_CRC64_POLY = 0xC96C5795D7870F42


def _build_crc64_table() -> list[int]:
    table = []
    for byte in range(256):
        crc = byte
        for _ in range(8):
            if crc & 1:
                crc = (crc >> 1) ^ _CRC64_POLY
            else:
                crc >>= 1
        table.append(crc)
    return table


_CRC64_TABLE = _build_crc64_table()


def crc64(data: bytes, value: int = 0) -> int:
    """CRC-64 of `data`; pass the previous return value to continue a stream."""
    crc = value ^ 0xFFFFFFFFFFFFFFFF
    for b in data:
        crc = _CRC64_TABLE[(crc ^ b) & 0xFF] ^ (crc >> 8)
    return crc ^ 0xFFFFFFFFFFFFFFFF


# ---------------------------------------------------------------------------
# Sequence records
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SequenceRecord:
    """One peptide: id, residue string, optional binary label and real value."""

    id: str
    sequence: str
    label: int | None = None
    value: float | None = None

    def __post_init__(self):
        if not self.sequence:
            raise ValueError(f"sequence for id {self.id!r} is empty")
        for ch in self.sequence:
            if ch not in _RESIDUE_SET:
                raise ValueError(f"illegal residue {ch} in id {self.id!r}")
        if self.label is not None and self.label not in (0, 1):
            raise ValueError(f"label for id {self.id!r} must be 0 or 1, got {self.label}")


def _parse_label(text: str, line_no: int) -> int:
    try:
        label = int(text)
    except ValueError:
        raise SequenceParseError(f"malformed label {text!r} at line {line_no}") from None
    if label not in (0, 1):
        raise SequenceParseError(f"label must be 0 or 1 at line {line_no}, got {label}")
    return label


def _check_residues(seq: str, line_no: int) -> None:
    for ch in seq:
        if ch not in _RESIDUE_SET:
            raise SequenceParseError(f"illegal residue {ch} at line {line_no}")


def _load_csv(path: Path) -> list[SequenceRecord]:
    records = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        for line_no, row in enumerate(reader, start=1):
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            # optional header row: id,sequence[,label[,value]]
            if line_no == 1 and [c.strip().lower() for c in row[:2]] == ["id", "sequence"]:
                continue
            if len(row) < 2:
                raise SequenceParseError(f"malformed row at line {line_no}: expected id,sequence[,label]")
            rec_id, seq = row[0].strip(), row[1].strip()
            if not seq:
                raise SequenceParseError(f"empty sequence at line {line_no}")
            _check_residues(seq, line_no)
            label = None
            if len(row) >= 3 and row[2].strip():
                label = _parse_label(row[2].strip(), line_no)
            value = None
            if len(row) >= 4 and row[3].strip():
                try:
                    value = float(row[3])
                except ValueError:
                    raise SequenceParseError(f"malformed value {row[3]!r} at line {line_no}") from None
            records.append(SequenceRecord(rec_id, seq, label, value))
    return records


def _load_fasta(path: Path) -> list[SequenceRecord]:
    records = []
    header = None
    header_line = 0
    chunks: list[str] = []

    def flush(end_line: int) -> None:
        if header is None:
            return
        seq = "".join(chunks)
        if not seq:
            raise SequenceParseError(f"empty sequence for header at line {header_line}")
        _check_residues(seq, end_line)
        rec_id, _, meta = header.partition("|")
        label = None
        if meta.startswith("label="):
            label = _parse_label(meta[len("label="):], header_line)
        records.append(SequenceRecord(rec_id.strip(), seq, label))

    with open(path) as fh:
        for line_no, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line:
                continue
            if line.startswith(">"):
                flush(line_no - 1)
                header = line[1:].strip()
                header_line = line_no
                chunks = []
            else:
                if header is None:
                    raise SequenceParseError(f"sequence data before any header at line {line_no}")
                chunks.append(line)
        flush(line_no if records or header else 0)
    return records


def load_sequences(path: str | Path, format: str | None = None) -> list[SequenceRecord]:
    """Load sequence records from a CSV (`id,sequence,label`) or FASTA file.

    Records come back in file order. FASTA labels are read from the header
    as `>id|label=0/1`. Malformed rows raise SequenceParseError naming the line.
    """
    path = Path(path)
    if format is None:
        format = "fasta" if path.suffix.lower() in (".fa", ".fasta", ".faa") else "csv"
    if format == "csv":
        return _load_csv(path)
    if format == "fasta":
        return _load_fasta(path)
    raise ValueError(f"unknown sequence format {format!r}")


def save_sequences(records: list[SequenceRecord], path: str | Path) -> None:
    """Write records as `id,sequence,label[,value]` CSV (inverse of the csv loader)."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        for rec in records:
            row = [rec.id, rec.sequence, "" if rec.label is None else rec.label]
            if rec.value is not None:
                row.append(repr(rec.value))
            writer.writerow(row)


# ---------------------------------------------------------------------------
# Embedding matrices (.fdde container)
# ---------------------------------------------------------------------------


class EmbeddingMatrix:
    """A frozen n x D float32 matrix tagged with its source layer.

    Rows follow the order of the sequence records they were computed from.
    The checksum is the CRC-64 of the serialized header + payload, so equal
    checksums mean bit-identical files.
    """

    def __init__(self, layer: int, data: np.ndarray):
        data = np.ascontiguousarray(data, dtype=np.float32)
        if data.ndim != 2:
            raise ValueError(f"embedding data must be 2-D, got shape {data.shape}")
        if not np.isfinite(data).all():
            raise ValueError("embedding data contains NaN or Inf")
        if layer < -1:
            raise ValueError(f"layer must be >= 0 (or -1 sentinel), got {layer}")
        self.layer = int(layer)
        self.data = data
        self.n, self.D = data.shape
        self.checksum = crc64(self._serialize_body())

    def _serialize_body(self) -> bytes:
        layer_field = _LAYER_SENTINEL if self.layer == -1 else self.layer
        header = FDDE_MAGIC + struct.pack("<IIQQ", FDDE_VERSION, layer_field, self.n, self.D)
        return header + self.data.astype("<f4").tobytes()

    def __eq__(self, other):
        return (
            isinstance(other, EmbeddingMatrix)
            and self.layer == other.layer
            and self.data.shape == other.data.shape
            and np.array_equal(self.data, other.data)
        )

    def __repr__(self):
        return f"EmbeddingMatrix(layer={self.layer}, n={self.n}, D={self.D})"


def save_embeddings(matrix: EmbeddingMatrix, path: str | Path) -> None:
    """Write a `.fdde` file: magic, version, layer, n, D, f32 rows, CRC-64 trailer."""
    body = matrix._serialize_body()
    with open(path, "wb") as fh:
        fh.write(body)
        fh.write(struct.pack("<Q", crc64(body)))


def load_embeddings(path: str | Path) -> EmbeddingMatrix:
    """Load a `.fdde` file; bit-exact inverse of save_embeddings.

    Raises FddeFormatError on bad magic/version or truncation, and
    ChecksumMismatchError when the CRC-64 trailer disagrees.
    """
    raw = Path(path).read_bytes()
    header_size = 4 + 4 + 4 + 8 + 8
    if len(raw) < header_size + 8:
        raise FddeFormatError(f"{path}: file too short for a .fdde header")
    if raw[:4] != FDDE_MAGIC:
        raise FddeFormatError(f"{path}: bad magic {raw[:4]!r}")
    version, layer_field, n, D = struct.unpack("<IIQQ", raw[4:header_size])
    if version != FDDE_VERSION:
        raise FddeFormatError(f"{path}: unsupported version {version}")
    payload_size = n * D * 4
    expected = header_size + payload_size + 8
    if len(raw) != expected:
        raise FddeFormatError(
            f"{path}: shape mismatch, expected {expected} bytes for {n}x{D}, got {len(raw)}"
        )
    (stored_crc,) = struct.unpack("<Q", raw[-8:])
    if crc64(raw[:-8]) != stored_crc:
        raise ChecksumMismatchError(f"{path}: CRC-64 mismatch")
    data = np.frombuffer(raw[header_size:-8], dtype="<f4").reshape(n, D).copy()
    layer = -1 if layer_field == _LAYER_SENTINEL else layer_field
    return EmbeddingMatrix(layer, data)


# ---------------------------------------------------------------------------
# Splits
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DatasetSplit:
    """Disjoint train/val/test index lists covering 0..n-1 exactly once."""

    train: np.ndarray
    val: np.ndarray
    test: np.ndarray
    seed: int

    @property
    def n(self) -> int:
        return len(self.train) + len(self.val) + len(self.test)


def split_dataset(n: int, ratios: tuple[float, float, float], seed: int) -> DatasetSplit:
    """Deterministically partition 0..n-1 into train/val/test.

    Sizes are floor(n * ratio) with the remainder going to the parts with the
    largest fractional shares (ties by position), so each size is within 1 of
    n * ratio and the exact example sizes (10 -> 8/1/1) hold.
    """
    if n < 3:
        raise ValueError(f"need at least 3 samples to split, got {n}")
    if any(r <= 0 for r in ratios):
        raise ValueError(f"ratios must be positive, got {ratios}")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"ratios must sum to 1, got {sum(ratios)!r}")
    raw = [n * r for r in ratios]
    sizes = [int(x) for x in raw]
    frac = [x - s for x, s in zip(raw, sizes)]
    for _ in range(n - sum(sizes)):
        i = max(range(3), key=lambda j: (frac[j], -j))
        sizes[i] += 1
        frac[i] = -1.0
    perm = np.random.default_rng(seed).permutation(n)
    a, b = sizes[0], sizes[0] + sizes[1]
    return DatasetSplit(train=perm[:a], val=perm[a:b], test=perm[b:], seed=seed)
