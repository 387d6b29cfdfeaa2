"""On-disk formats: embeddings, interactions, semantic-ID maps, checkpoints.

Text formats are line-delimited JSON, one record per line. Embedding tables
may also be stored in a flat little-endian binary layout::

    b"MGRE" | version u32 | n_items u32 | dim u32 |
    n_items x (id_len u32 | id utf-8 bytes | dim x float32)
"""

from __future__ import annotations

import hashlib
import json
import math
import pickle
import struct
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Iterator

import numpy as np

__all__ = [
    "FormatError",
    "CheckpointError",
    "EmbeddingTable",
    "InteractionDataset",
    "SemanticIdMap",
    "load_embeddings",
    "save_embeddings",
    "load_interactions",
    "save_interactions",
    "filter_min_interactions",
    "split_leave_last_out",
    "load_sidmap",
    "save_sidmap",
    "load_labels",
    "save_labels",
    "save_checkpoint",
    "load_checkpoint",
    "write_jsonl",
    "read_jsonl",
]

BINARY_MAGIC = b"MGRE"
BINARY_VERSION = 1
CHECKPOINT_MAGIC = b"MGRCKPT\x00"
CHECKPOINT_VERSION = 1


class FormatError(ValueError):
    """A data file is malformed or violates a table invariant."""


class CheckpointError(FormatError):
    """A checkpoint is truncated, corrupted or written by another version."""


@dataclass(frozen=True)
class EmbeddingTable:
    modality: str
    item_ids: tuple[str, ...]
    vectors: np.ndarray

    def __post_init__(self):
        vectors = np.array(self.vectors, dtype=np.float64)
        if vectors.ndim != 2 or vectors.shape[0] != len(self.item_ids):
            raise FormatError(
                f"vectors must have shape (n_items, dim), got {vectors.shape} "
                f"for {len(self.item_ids)} ids"
            )
        if vectors.shape[1] < 1:
            raise FormatError("embedding dim must be positive")
        if not np.all(np.isfinite(vectors)):
            raise FormatError("embedding table contains non-finite values")
        dupes = [k for k, c in Counter(self.item_ids).items() if c > 1]
        if dupes:
            raise FormatError(f"duplicate item ids: {dupes[:5]}")
        vectors.setflags(write=False)
        object.__setattr__(self, "item_ids", tuple(self.item_ids))
        object.__setattr__(self, "vectors", vectors)
        object.__setattr__(self, "_index", {k: i for i, k in enumerate(self.item_ids)})

    @property
    def dim(self) -> int:
        return int(self.vectors.shape[1])

    def __len__(self) -> int:
        return len(self.item_ids)

    def __contains__(self, item_id) -> bool:
        return item_id in self._index

    def __getitem__(self, item_id: str) -> np.ndarray:
        return self.vectors[self._index[item_id]]

    def index(self, item_id: str) -> int:
        return self._index[item_id]

    def subset(self, item_ids: Iterable[str]) -> "EmbeddingTable":
        ids = list(item_ids)
        return EmbeddingTable(self.modality, tuple(ids), self.vectors[[self._index[i] for i in ids]])

    def equals(self, other: "EmbeddingTable") -> bool:
        """Bit-exact comparison."""
        return (
            self.modality == other.modality
            and self.item_ids == other.item_ids
            and self.vectors.shape == other.vectors.shape
            and self.vectors.tobytes() == other.vectors.tobytes()
        )


@dataclass
class InteractionDataset:
    histories: dict[str, list[str]]
    timestamps: dict[str, list[float]] = field(default_factory=dict)
    splits: dict[str, dict[str, Any]] | None = None

    @property
    def users(self) -> list[str]:
        return sorted(self.histories)

    @property
    def items(self) -> set[str]:
        return {i for h in self.histories.values() for i in h}

    def n_interactions(self) -> int:
        return sum(len(h) for h in self.histories.values())

    def check_coverage(self, tables: Iterable[EmbeddingTable]) -> None:
        items = self.items
        for table in tables:
            missing = sorted(items.difference(table.item_ids))
            if missing:
                raise FormatError(
                    f"{len(missing)} items have no '{table.modality}' embedding, e.g. {missing[:3]}"
                )


@dataclass
class SemanticIdMap:
    """Per-modality item -> (codes, suffix) assignment."""

    modality: str
    levels: int
    codebook_size: int
    entries: dict[str, tuple[tuple[int, ...], int]]

    def __post_init__(self):
        seen = set()
        for item, (codes, suffix) in self.entries.items():
            if len(codes) != self.levels:
                raise FormatError(f"item {item!r}: expected {self.levels} codes, got {len(codes)}")
            if any(c < 0 or c >= self.codebook_size for c in codes):
                raise FormatError(f"item {item!r}: code out of range [0, {self.codebook_size})")
            if suffix < 0:
                raise FormatError(f"item {item!r}: negative suffix")
            key = (tuple(codes), suffix)
            if key in seen:
                raise FormatError(f"item {item!r}: duplicate semantic id {key}")
            seen.add(key)

    def __len__(self) -> int:
        return len(self.entries)

    def __getitem__(self, item_id: str) -> tuple[tuple[int, ...], int]:
        return self.entries[item_id]

    def __contains__(self, item_id) -> bool:
        return item_id in self.entries

    @property
    def max_suffix(self) -> int:
        return max((s for _, s in self.entries.values()), default=0)

    def has_collisions(self) -> bool:
        return self.max_suffix > 0


# -- jsonl helpers -----------------------------------------------------------

def read_jsonl(path) -> Iterator[tuple[int, dict]]:
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise FormatError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from None
            if not isinstance(rec, dict):
                raise FormatError(f"{path}:{lineno}: expected an object")
            yield lineno, rec


def write_jsonl(path, records: Iterable[dict]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, separators=(",", ":")))
            fh.write("\n")


def _require(rec: dict, key: str, types, where: str):
    if key not in rec:
        raise FormatError(f"{where}: missing key {key!r}")
    value = rec[key]
    if isinstance(value, bool) or not isinstance(value, types):
        raise FormatError(f"{where}: bad type for {key!r}")
    return value


# -- embeddings --------------------------------------------------------------

def load_embeddings(path, modality: str | None = None) -> EmbeddingTable:
    """Load an embedding table from ``.jsonl`` or the binary layout.

    The binary layout carries no modality tag, so ``modality`` names it
    (defaults to the file stem). For jsonl files every record must share
    one modality, which must equal ``modality`` when given.
    """
    path = Path(path)
    with open(path, "rb") as fh:
        head = fh.read(4)
    if head == BINARY_MAGIC:
        return _load_embeddings_binary(path, modality or path.stem)

    ids, seen, rows, mod, dim = [], set(), [], modality, None
    for lineno, rec in read_jsonl(path):
        where = f"{path}:{lineno}"
        item = _require(rec, "item_id", str, where)
        rec_mod = _require(rec, "modality", str, where)
        vec = _require(rec, "vector", list, where)
        if mod is None:
            mod = rec_mod
        elif rec_mod != mod:
            raise FormatError(f"{where}: modality {rec_mod!r} != {mod!r}")
        if dim is None:
            dim = len(vec)
            if dim == 0:
                raise FormatError(f"{where}: empty vector")
        elif len(vec) != dim:
            raise FormatError(f"{where}: dimension {len(vec)} != {dim}")
        if not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in vec):
            raise FormatError(f"{where}: vector entries must be numbers")
        if not all(math.isfinite(v) for v in vec):
            raise FormatError(f"{where}: non-finite value")
        if item in seen:
            raise FormatError(f"{where}: duplicate item_id {item!r}")
        seen.add(item)
        ids.append(item)
        rows.append(vec)
    if not ids:
        raise FormatError(f"{path}: no records")
    return EmbeddingTable(mod, tuple(ids), np.asarray(rows, dtype=np.float64))


def save_embeddings(table: EmbeddingTable, path, binary: bool | None = None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if binary is None:
        binary = path.suffix == ".bin"
    if binary:
        _save_embeddings_binary(table, path)
        return
    write_jsonl(
        path,
        (
            {"item_id": item, "modality": table.modality, "vector": row.tolist()}
            for item, row in zip(table.item_ids, table.vectors)
        ),
    )


def _save_embeddings_binary(table: EmbeddingTable, path: Path) -> None:
    with open(path, "wb") as fh:
        fh.write(BINARY_MAGIC)
        fh.write(struct.pack("<III", BINARY_VERSION, len(table), table.dim))
        for item, row in zip(table.item_ids, table.vectors):
            raw = item.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(np.asarray(row, dtype="<f4").tobytes())


def _load_embeddings_binary(path: Path, modality: str) -> EmbeddingTable:
    data = path.read_bytes()
    if len(data) < 16:
        raise FormatError(f"{path}: truncated header")
    version, n_items, dim = struct.unpack_from("<III", data, 4)
    if version != BINARY_VERSION:
        raise FormatError(f"{path}: unsupported binary version {version}")
    offset, ids = 16, []
    vectors = np.empty((n_items, dim), dtype=np.float64)
    for row in range(n_items):
        try:
            (n,) = struct.unpack_from("<I", data, offset)
            offset += 4
            if offset + n + 4 * dim > len(data):
                raise struct.error
            ids.append(data[offset:offset + n].decode("utf-8"))
            offset += n
            vectors[row] = np.frombuffer(data, dtype="<f4", count=dim, offset=offset)
            offset += 4 * dim
        except (struct.error, UnicodeDecodeError):
            raise FormatError(f"{path}: truncated or corrupt record {row}") from None
    if offset != len(data):
        raise FormatError(f"{path}: {len(data) - offset} trailing bytes")
    return EmbeddingTable(modality, tuple(ids), vectors)


# -- interactions ------------------------------------------------------------

def load_interactions(
    path,
    min_interactions: int = 5,
    filter_items: bool = True,
) -> InteractionDataset:
    """Read interaction records and apply the k-core filter.

    Events are ordered by timestamp per user, ties keeping file order.
    """
    events: dict[str, list[tuple[float, int, str]]] = defaultdict(list)
    for lineno, rec in read_jsonl(path):
        where = f"{path}:{lineno}"
        user = _require(rec, "user_id", str, where)
        item = _require(rec, "item_id", str, where)
        ts = _require(rec, "ts", (int, float), where)
        if not math.isfinite(ts):
            raise FormatError(f"{where}: non-finite timestamp")
        events[user].append((float(ts), lineno, item))

    histories, stamps = {}, {}
    for user, evs in events.items():
        evs.sort(key=lambda e: (e[0], e[1]))
        histories[user] = [e[2] for e in evs]
        stamps[user] = [e[0] for e in evs]
    dataset = filter_min_interactions(
        InteractionDataset(histories, stamps), min_interactions, filter_items
    )
    if not dataset.histories:
        raise FormatError(f"{path}: no users left after filtering (min_interactions={min_interactions})")
    return dataset


def filter_min_interactions(
    dataset: InteractionDataset,
    min_interactions: int = 5,
    filter_items: bool = True,
) -> InteractionDataset:
    """Drop sparse users (and items) until nothing changes."""
    histories = {u: list(h) for u, h in dataset.histories.items()}
    stamps = {u: list(dataset.timestamps.get(u, range(len(h)))) for u, h in histories.items()}
    while True:
        changed = False
        if filter_items:
            counts = Counter(i for h in histories.values() for i in h)
            rare = {i for i, c in counts.items() if c < min_interactions}
            if rare:
                changed = True
                for u in histories:
                    keep = [k for k, i in enumerate(histories[u]) if i not in rare]
                    histories[u] = [histories[u][k] for k in keep]
                    stamps[u] = [stamps[u][k] for k in keep]
        short = [u for u, h in histories.items() if len(h) < min_interactions]
        for u in short:
            del histories[u]
            del stamps[u]
        changed = changed or bool(short)
        if not changed:
            break
    return InteractionDataset(histories, stamps)


def save_interactions(dataset: InteractionDataset, path) -> None:
    def records():
        for user in sorted(dataset.histories):
            ts = dataset.timestamps.get(user) or list(range(len(dataset.histories[user])))
            for item, t in zip(dataset.histories[user], ts):
                yield {"user_id": user, "item_id": item, "ts": t}

    write_jsonl(path, records())


def split_leave_last_out(dataset: InteractionDataset) -> InteractionDataset:
    """Last item is the test target, second-to-last validation, the rest train.

    Each prefix of the history before position ``n - 2`` yields one training
    example ``(history[:j], history[j])``.
    """
    splits = {}
    for user in sorted(dataset.histories):
        h = dataset.histories[user]
        n = len(h)
        if n < 3:
            raise FormatError(f"user {user!r}: history of length {n} < 3 cannot be split")
        splits[user] = {
            "train": [(h[:j], h[j]) for j in range(1, n - 2)],
            "val": (h[: n - 2], h[n - 2]),
            "test": (h[: n - 1], h[n - 1]),
        }
    return InteractionDataset(dataset.histories, dataset.timestamps, splits)


# -- semantic-id maps and labels --------------------------------------------

def save_sidmap(sidmap: SemanticIdMap, path) -> None:
    write_jsonl(
        path,
        (
            {"item_id": item, "modality": sidmap.modality, "codes": list(codes), "suffix": suffix}
            for item, (codes, suffix) in sorted(sidmap.entries.items())
        ),
    )


def load_sidmap(path, codebook_size: int | None = None) -> SemanticIdMap:
    entries, modality, levels = {}, None, None
    for lineno, rec in read_jsonl(path):
        where = f"{path}:{lineno}"
        item = _require(rec, "item_id", str, where)
        mod = _require(rec, "modality", str, where)
        codes = _require(rec, "codes", list, where)
        suffix = _require(rec, "suffix", int, where)
        if not all(isinstance(c, int) and not isinstance(c, bool) for c in codes):
            raise FormatError(f"{where}: codes must be integers")
        modality = modality or mod
        if mod != modality:
            raise FormatError(f"{where}: modality {mod!r} != {modality!r}")
        levels = len(codes) if levels is None else levels
        if item in entries:
            raise FormatError(f"{where}: duplicate item_id {item!r}")
        entries[item] = (tuple(codes), suffix)
    if not entries:
        raise FormatError(f"{path}: no records")
    if codebook_size is None:
        codebook_size = 1 + max((max(c, default=0) for c, _ in entries.values()), default=0)
    return SemanticIdMap(modality, levels, codebook_size, entries)


def save_labels(labels: dict[str, dict[str, int]], path) -> None:
    """``labels[modality][item_id] -> cluster``."""
    write_jsonl(
        path,
        (
            {"item_id": item, "modality": mod, "cluster": int(c)}
            for mod in sorted(labels)
            for item, c in sorted(labels[mod].items())
        ),
    )


def load_labels(path) -> dict[str, dict[str, int]]:
    out: dict[str, dict[str, int]] = defaultdict(dict)
    for lineno, rec in read_jsonl(path):
        where = f"{path}:{lineno}"
        out[_require(rec, "modality", str, where)][_require(rec, "item_id", str, where)] = (
            _require(rec, "cluster", int, where)
        )
    return dict(out)


# -- checkpoints -------------------------------------------------------------

def save_checkpoint(obj, path, kind: str | None = None) -> None:
    """Serialize ``obj`` with a format version and a SHA-256 content checksum."""
    payload = pickle.dumps(obj, protocol=4)
    kind = (kind or type(obj).__name__).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(kind)))
        fh.write(kind)
        fh.write(struct.pack("<Q", len(payload)))
        fh.write(hashlib.sha256(payload).digest())
        fh.write(payload)


def load_checkpoint(path, kind: str | None = None):
    data = Path(path).read_bytes()
    if not data.startswith(CHECKPOINT_MAGIC):
        raise CheckpointError(f"{path}: not a checkpoint file")
    offset = len(CHECKPOINT_MAGIC)
    try:
        version, klen = struct.unpack_from("<II", data, offset)
        offset += 8
        stored_kind = data[offset:offset + klen].decode("utf-8")
        offset += klen
        (plen,) = struct.unpack_from("<Q", data, offset)
        offset += 8
    except (struct.error, UnicodeDecodeError):
        raise CheckpointError(f"{path}: truncated header") from None
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: checkpoint version {version}, expected {CHECKPOINT_VERSION}")
    if kind is not None and stored_kind != kind:
        raise CheckpointError(f"{path}: holds a {stored_kind}, expected {kind}")
    digest = data[offset:offset + 32]
    payload = data[offset + 32:]
    if len(digest) != 32 or len(payload) != plen:
        raise CheckpointError(f"{path}: truncated payload ({len(payload)} of {plen} bytes)")
    if hashlib.sha256(payload).digest() != digest:
        raise CheckpointError(f"{path}: checksum mismatch")
    return pickle.loads(payload)
