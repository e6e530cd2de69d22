"""On-disk formats: HSAE binary containers and slide manifests.

HSAE layout (all integers unsigned 32-bit, all floats IEEE 32-bit, little-endian)::

    magic   b"HSAE"
    version 1
    then zero or more sections, back to back until end of file:
        tag     1 = tile embeddings, 2..6 = aggregator matrices V, w, U, C, b
        count   number of records (tiles) or matrix rows
        dim     floats per record / matrix columns
        payload tag 1: count x (x, y, dim floats); otherwise count x dim floats

Readers skip unknown tags with a warning.
"""

import csv
import logging
import os
import struct
import tempfile
from dataclasses import dataclass

import numpy as np

from .errors import FormatError, InvalidInputError, ManifestError

log = logging.getLogger(__name__)

MAGIC = b"HSAE"
VERSION = 1
TAG_TILES = 1
PARAM_TAGS = {"V": 2, "w": 3, "U": 4, "C": 5, "b": 6}

_HEADER = struct.Struct("<4sI")
_SECTION = struct.Struct("<III")


def atomic_write(path, data):
    """Write bytes to ``path`` via a temporary sibling and an atomic rename."""
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=".part")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _tile_dtype(dim):
    return np.dtype([("x", "<u4"), ("y", "<u4"), ("v", "<f4", (dim,))])


def _tile_section(tiles, dim):
    rec = np.zeros(len(tiles), dtype=_tile_dtype(dim))
    for i, t in enumerate(tiles):
        vec = np.asarray(t.vector, dtype=np.float32)
        if vec.shape != (dim,):
            raise InvalidInputError(f"tile {i} has dimension {vec.shape}, expected {dim}")
        if not np.all(np.isfinite(vec)):
            raise InvalidInputError(f"tile {i} has non-finite values")
        rec[i] = (t.x, t.y, vec)
    return _SECTION.pack(TAG_TILES, len(tiles), dim) + rec.tobytes()


def _matrix_section(tag, mat):
    mat = np.atleast_2d(np.asarray(mat, dtype="<f4"))
    if not np.all(np.isfinite(mat)):
        raise InvalidInputError("matrix has non-finite values")
    rows, cols = mat.shape
    return _SECTION.pack(tag, rows, cols) + mat.tobytes()


def encode_embeddings(tiles, dim=None):
    tiles = list(tiles)
    if dim is None:
        dim = len(tiles[0].vector) if tiles else 0
    return _HEADER.pack(MAGIC, VERSION) + _tile_section(tiles, dim)


def write_embeddings(tiles, path, dim=None):
    atomic_write(path, encode_embeddings(tiles, dim))


def _iter_sections(buf):
    """Yield (tag, count, dim, payload_offset, payload_bytes) for each section."""
    if len(buf) < _HEADER.size:
        raise FormatError("truncated header", len(buf))
    magic, version = _HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}", 0)
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", 4)
    off = _HEADER.size
    while off < len(buf):
        if len(buf) - off < _SECTION.size:
            raise FormatError("truncated section header", off)
        tag, count, dim = _SECTION.unpack_from(buf, off)
        off += _SECTION.size
        rec = 4 * dim + (8 if tag == TAG_TILES else 0)
        size = count * rec
        if len(buf) - off < size:
            complete = (len(buf) - off) // rec if rec else 0
            raise FormatError(
                f"truncated payload: section tag {tag} declares {count} records, "
                f"{complete} complete",
                off + complete * rec,
            )
        yield tag, count, dim, off, buf[off : off + size]
        off += size


def _check_finite(values, base, stride, lead):
    bad = np.nonzero(~np.isfinite(values))
    if bad[0].size:
        row = int(bad[0][0])
        col = int(bad[1][0]) if values.ndim > 1 else 0
        raise FormatError("non-finite float in payload", base + row * stride + lead + 4 * col)


def decode_embeddings(buf):
    from .encoding import TileEmbedding

    out = []
    for tag, count, dim, off, payload in _iter_sections(buf):
        if tag != TAG_TILES:
            log.warning("skipping section with tag %d at offset %d", tag, off - _SECTION.size)
            continue
        rec = np.frombuffer(payload, dtype=_tile_dtype(dim), count=count)
        _check_finite(rec["v"].reshape(count, dim), off, 8 + 4 * dim, 8)
        for r in rec:
            out.append(TileEmbedding(int(r["x"]), int(r["y"]), np.array(r["v"], dtype=np.float32)))
    return out


def read_embeddings(path):
    with open(path, "rb") as fh:
        return decode_embeddings(fh.read())


def write_params(params, path):
    body = b"".join(
        _matrix_section(tag, getattr(params, name)) for name, tag in PARAM_TAGS.items()
    )
    atomic_write(path, _HEADER.pack(MAGIC, VERSION) + body)


def read_params(path):
    """Load an aggregator checkpoint; values are widened back to float64."""
    from .aggregator import AggregatorParams

    with open(path, "rb") as fh:
        buf = fh.read()
    names = {tag: name for name, tag in PARAM_TAGS.items()}
    found = {}
    for tag, count, dim, off, payload in _iter_sections(buf):
        if tag not in names:
            log.warning("skipping section with tag %d at offset %d", tag, off - _SECTION.size)
            continue
        mat = np.frombuffer(payload, dtype="<f4").reshape(count, dim)
        _check_finite(mat, off, 4 * dim, 0)
        found[names[tag]] = mat.astype(np.float64)
    missing = [n for n in PARAM_TAGS if n not in found]
    if missing:
        raise FormatError(f"checkpoint lacks sections {missing}")
    return AggregatorParams(
        V=found["V"], w=found["w"][0], U=found["U"], C=found["C"], b=found["b"][0]
    )


# ---------------------------------------------------------------------------
# manifests

MANIFEST_COLUMNS = ("slide_id", "patient_id", "he_path", "ihc_path", "label", "task")


@dataclass(frozen=True)
class SlideRecord:
    slide_id: str
    patient_id: str
    he_path: str
    ihc_path: str | None = None
    label: int | None = None
    task: str = ""


def parse_manifest(path):
    """Read a CSV manifest; paths are resolved relative to the manifest's directory."""
    base = os.path.dirname(os.path.abspath(path))
    records, seen = [], {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise ManifestError("empty manifest", 1) from None
        missing = [c for c in MANIFEST_COLUMNS if c not in header]
        if missing:
            raise ManifestError(f"missing required column(s) {missing}", 1)
        idx = {c: header.index(c) for c in MANIFEST_COLUMNS}
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not f.strip() for f in row):
                continue
            if len(row) != len(header):
                raise ManifestError(f"expected {len(header)} fields, got {len(row)}", lineno)
            get = lambda c: row[idx[c]].strip()  # noqa: E731
            sid = get("slide_id")
            if not sid:
                raise ManifestError("empty slide_id", lineno)
            if sid in seen:
                raise ManifestError(f"duplicate slide_id {sid!r} (first on line {seen[sid]})", lineno)
            seen[sid] = lineno
            if not get("he_path"):
                raise ManifestError("empty he_path", lineno)
            label = get("label")
            if label:
                if label not in ("0", "1"):
                    raise ManifestError(f"label must be 0 or 1, got {label!r}", lineno)
                label = int(label)
            else:
                label = None
            ihc = get("ihc_path") or None
            records.append(
                SlideRecord(
                    slide_id=sid,
                    patient_id=get("patient_id") or sid,
                    he_path=os.path.join(base, get("he_path")),
                    ihc_path=os.path.join(base, ihc) if ihc else None,
                    label=label,
                    task=get("task"),
                )
            )
    return records


def write_manifest(records, path, relative_to=None):
    base = relative_to or os.path.dirname(os.path.abspath(path))

    def rel(p):
        return os.path.relpath(p, base) if p else ""

    lines = [",".join(MANIFEST_COLUMNS)]
    for r in records:
        label = "" if r.label is None else str(r.label)
        lines.append(",".join([r.slide_id, r.patient_id, rel(r.he_path), rel(r.ihc_path), label, r.task]))
    atomic_write(path, ("\n".join(lines) + "\n").encode("utf-8"))
