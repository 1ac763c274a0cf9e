"""On-disk data model: STF tensor files, dataset manifests, and samples.

STF (Simple Tensor File) layout, all little-endian:

    bytes 0..7    magic ``STF1\\0\\0\\0\\0``
    bytes 8..15   rows, unsigned 64-bit
    bytes 16..23  cols, unsigned 64-bit
    bytes 24..    rows*cols IEEE-754 32-bit floats, row-major

A manifest is UTF-8 text: a ``classes`` line, a ``feature_type`` line,
then one tab-separated entry per sample (id, relative path, label, split).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError

STF_MAGIC = b"STF1\x00\x00\x00\x00"
_HEADER = struct.Struct("<8sQQ")

FEATURE_TYPES = ("cartesian", "angular", "i3d", "tokens")

#: expected column count of a feature file, per feature type
FEATURE_WIDTHS = {"cartesian": 150, "angular": 288, "i3d": 1024, "tokens": 1}

SPLITS = ("train", "val", "test")


def require_matrix(a, name="matrix"):
    """Validate a dense 2-D float array: finite entries, rows*cols payload."""
    a = np.asarray(a)
    if a.ndim != 2:
        raise DataError(f"{name}: expected 2-D array, got shape {a.shape}")
    if a.size and not np.isfinite(a).all():
        raise DataError(f"{name}: non-finite entries")
    return a


def write_tensor(path, matrix) -> None:
    """Write a matrix to an STF file (float32 payload, byte-exact per input)."""
    m = require_matrix(matrix)
    m = np.ascontiguousarray(m, dtype=np.float32)
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(STF_MAGIC, m.shape[0], m.shape[1]))
        fh.write(m.tobytes())


def read_tensor(path) -> np.ndarray:
    """Read an STF file back into a float32 matrix.

    Raises DataError on a bad magic, a truncated payload, or non-finite
    entries.
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"missing file: {path}")
    raw = path.read_bytes()
    if len(raw) < _HEADER.size:
        raise DataError(f"truncated header: {path}")
    magic, rows, cols = _HEADER.unpack_from(raw)
    if magic != STF_MAGIC:
        raise DataError(f"bad magic: {path}")
    payload = raw[_HEADER.size:]
    expected = rows * cols * 4
    if len(payload) < expected:
        raise DataError(f"truncated payload: {path} ({len(payload)} < {expected} bytes)")
    if len(payload) > expected:
        raise DataError(f"trailing bytes: {path}")
    m = np.frombuffer(payload, dtype="<f4").reshape(rows, cols).copy()
    if m.size and not np.isfinite(m).all():
        raise DataError(f"non-finite payload: {path}")
    return m


def read_tensor_shape(path) -> tuple[int, int]:
    """Read only the (rows, cols) header of an STF file."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"missing file: {path}")
    with open(path, "rb") as fh:
        head = fh.read(_HEADER.size)
    if len(head) < _HEADER.size:
        raise DataError(f"truncated header: {path}")
    magic, rows, cols = _HEADER.unpack(head)
    if magic != STF_MAGIC:
        raise DataError(f"bad magic: {path}")
    return int(rows), int(cols)


@dataclass
class Sample:
    """One video's feature sequence with its topic label and split tag."""

    id: str
    features: np.ndarray  # T x D, float32
    label: int
    split: str


@dataclass
class ManifestEntry:
    id: str
    path: str  # relative to the manifest's directory
    label: int
    split: str


@dataclass
class Manifest:
    class_names: list[str]
    feature_type: str
    entries: list[ManifestEntry]
    root: Path = field(default_factory=Path)

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    @property
    def feature_width(self) -> int:
        return FEATURE_WIDTHS[self.feature_type]

    def entries_for_split(self, split):
        return [e for e in self.entries if e.split == split]

    def split_counts(self) -> dict[str, int]:
        counts = {s: 0 for s in SPLITS}
        for e in self.entries:
            counts[e.split] += 1
        return counts

    def load_sample(self, entry: ManifestEntry) -> Sample:
        feats = read_tensor(self.root / entry.path)
        if feats.shape[1] != self.feature_width:
            raise DataError(
                f"width mismatch: {entry.path} has {feats.shape[1]} cols, "
                f"feature type {self.feature_type!r} requires {self.feature_width}"
            )
        if feats.shape[0] < 1:
            raise DataError(f"empty sequence: {entry.path}")
        return Sample(entry.id, feats, entry.label, entry.split)

    def load_split(self, split) -> list[Sample]:
        return [self.load_sample(e) for e in self.entries_for_split(split)]


def write_manifest(path, manifest: Manifest) -> None:
    lines = ["classes\t" + ",".join(manifest.class_names)]
    lines.append("feature_type\t" + manifest.feature_type)
    for e in manifest.entries:
        lines.append(f"{e.id}\t{e.path}\t{e.label}\t{e.split}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_manifest(path, validate_files=True) -> Manifest:
    """Parse and validate a manifest file.

    Checks class-name uniqueness, label ranges, split tags, and (with
    ``validate_files``) that every referenced file exists and carries the
    declared feature width.
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"missing file: {path}")
    lines = [ln for ln in path.read_text(encoding="utf-8").splitlines() if ln.strip()]
    if len(lines) < 2:
        raise DataError(f"manifest too short: {path}")

    key, _, value = lines[0].partition("\t")
    if key != "classes":
        raise DataError(f"manifest missing classes line: {path}")
    class_names = value.split(",")
    if len(set(class_names)) != len(class_names):
        raise DataError(f"duplicate class names: {path}")

    key, _, value = lines[1].partition("\t")
    if key != "feature_type" or value not in FEATURE_TYPES:
        raise DataError(f"bad feature_type line: {path}")
    feature_type = value

    entries = []
    for ln in lines[2:]:
        parts = ln.split("\t")
        if len(parts) != 4:
            raise DataError(f"bad manifest entry: {ln!r}")
        sid, rel, label_s, split = parts
        try:
            label = int(label_s)
        except ValueError:
            raise DataError(f"bad label {label_s!r} for entry {sid}") from None
        if not 0 <= label < len(class_names):
            raise DataError(f"label out of range: entry {sid} has label {label}, C={len(class_names)}")
        if split not in SPLITS:
            raise DataError(f"bad split {split!r} for entry {sid}")
        entries.append(ManifestEntry(sid, rel, label, split))

    manifest = Manifest(class_names, feature_type, entries, root=path.parent)

    if validate_files:
        width = manifest.feature_width
        for e in entries:
            rows, cols = read_tensor_shape(manifest.root / e.path)
            if cols != width:
                raise DataError(
                    f"width mismatch: {e.path} has {cols} cols, "
                    f"feature type {feature_type!r} requires {width}"
                )
            if rows < 1:
                raise DataError(f"empty sequence: {e.path}")
    return manifest
