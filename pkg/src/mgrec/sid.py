"""Token vocabulary and sequence assembly for EF, LF and LF++ semantic IDs.

Token names follow ``<mod-level-code>`` (levels are 1-based), e.g.
``<img-1-40>``; collision suffixes are ``<mod-s-n>``. LF++ inserts
``<sep-i>`` between the blocks of modality ``i-1`` and modality ``i``.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .formats import EmbeddingTable, SemanticIdMap, write_jsonl

__all__ = [
    "TokenVocab",
    "FusionStrategy",
    "SequenceExample",
    "fuse_embeddings",
    "item_tokens",
    "build_rec_example",
    "build_alignment_examples",
    "build_examples",
    "save_examples",
]

PAD, BOS, EOS, REC = "<pad>", "<bos>", "<eos>", "<rec>"
FUSED = "fused"
_CODE_RE = re.compile(r"^<(?P<mod>[^<>]+?)-(?P<level>\d+|s)-(?P<code>\d+)>$")


class TokenVocab:
    """Bijection between token strings and contiguous integer ids.

    Layout: PAD, BOS, EOS, REC, one alignment tag per ordered modality pair,
    separators ``<sep-1> .. <sep-(k-1)>``, then for each modality its level
    tokens followed by its suffix tokens.
    """

    def __init__(self, modalities: Sequence[str], levels: Mapping[str, int],
                 codebook_size: Mapping[str, int], n_suffix: Mapping[str, int]):
        self.modalities = list(modalities)
        self.levels = dict(levels)
        self.codebook_size = dict(codebook_size)
        self.n_suffix = {m: max(int(n_suffix.get(m, 1)), 1) for m in self.modalities}
        names = [PAD, BOS, EOS, REC]
        for src in self.modalities:
            for dst in self.modalities:
                if src != dst:
                    names.append(self._align_name(src, dst))
        names += [f"<sep-{i}>" for i in range(1, len(self.modalities))]
        for mod in self.modalities:
            for level in range(1, self.levels[mod] + 1):
                names += [f"<{mod}-{level}-{c}>" for c in range(self.codebook_size[mod])]
            names += [f"<{mod}-s-{n}>" for n in range(self.n_suffix[mod])]
        self.names = names
        self.ids = {n: i for i, n in enumerate(names)}
        if len(self.ids) != len(names):
            raise ValueError("modality names produce clashing token names")
        self._modality_of = np.full(len(names), -1, dtype=np.int64)
        for i, n in enumerate(names):
            m = _CODE_RE.match(n)
            if m and m["mod"] in self.modalities:
                self._modality_of[i] = self.modalities.index(m["mod"])

    @classmethod
    def from_sidmaps(cls, sidmaps: Mapping[str, SemanticIdMap], modalities: Sequence[str] | None = None):
        modalities = list(modalities or sidmaps)
        return cls(
            modalities,
            {m: sidmaps[m].levels for m in modalities},
            {m: sidmaps[m].codebook_size for m in modalities},
            {m: sidmaps[m].max_suffix + 1 for m in modalities},
        )

    @staticmethod
    def _align_name(src: str, dst: str) -> str:
        short = {"img": "i", "txt": "t"}
        if src in short and dst in short:
            return f"<align-{short[src]}2{short[dst]}>"
        return f"<align-{src}2{dst}>"

    def __len__(self) -> int:
        return len(self.names)

    def __contains__(self, name) -> bool:
        return name in self.ids

    @property
    def pad(self) -> int:
        return 0

    @property
    def bos(self) -> int:
        return self.ids[BOS]

    @property
    def eos(self) -> int:
        return self.ids[EOS]

    @property
    def rec(self) -> int:
        return self.ids[REC]

    def align(self, src: str, dst: str) -> int:
        return self.ids[self._align_name(src, dst)]

    def sep(self, i: int) -> int:
        return self.ids[f"<sep-{i}>"]

    def code(self, modality: str, level: int, code: int) -> int:
        """Token for 1-based ``level``."""
        try:
            return self.ids[f"<{modality}-{level}-{code}>"]
        except KeyError:
            raise KeyError(f"no token for modality={modality!r} level={level} code={code}") from None

    def suffix(self, modality: str, n: int) -> int:
        try:
            return self.ids[f"<{modality}-s-{n}>"]
        except KeyError:
            raise KeyError(f"no suffix token {n} for modality {modality!r}") from None

    def tokenize(self, names: Sequence[str]) -> list[int]:
        return [self.ids[n] for n in names]

    def detokenize(self, ids: Sequence[int]) -> list[str]:
        return [self.names[i] for i in ids]

    def parse(self, token: int) -> tuple[str, int | str, int] | None:
        """``(modality, level, code)`` for code/suffix tokens, else None."""
        m = _CODE_RE.match(self.names[token])
        if not m or m["mod"] not in self.modalities:
            return None
        level = m["level"]
        return m["mod"], (level if level == "s" else int(level)), int(m["code"])

    def modality_of(self, token: int) -> str | None:
        k = int(self._modality_of[token])
        return None if k < 0 else self.modalities[k]

    def modality_block(self, tokens: Sequence[int], modality: str) -> tuple[int, ...]:
        k = self.modalities.index(modality)
        return tuple(t for t in tokens if 0 <= t < len(self.names) and self._modality_of[t] == k)

    def to_dict(self) -> dict:
        return {
            "modalities": self.modalities,
            "levels": self.levels,
            "codebook_size": self.codebook_size,
            "n_suffix": self.n_suffix,
            "tokens": self.names,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TokenVocab":
        vocab = cls(d["modalities"], d["levels"], d["codebook_size"], d["n_suffix"])
        if "tokens" in d and d["tokens"] != vocab.names:
            raise ValueError("vocab.json token table disagrees with its own header")
        return vocab

    def save(self, path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(json.dumps(self.to_dict(), indent=1))

    @classmethod
    def load(cls, path) -> "TokenVocab":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass(frozen=True)
class FusionStrategy:
    """``kind`` is EF, LF or LFPP; ``modalities`` orders the ID blocks.

    LF over a single modality is the unimodal baseline.
    """

    kind: str = "LFPP"
    modalities: tuple[str, ...] = ("txt", "img")
    emit_suffix: str = "always"

    def __post_init__(self):
        object.__setattr__(self, "modalities", tuple(self.modalities))
        if self.kind not in ("EF", "LF", "LFPP"):
            raise ValueError(f"unknown fusion kind {self.kind!r}")
        if self.kind == "EF" and self.modalities != (FUSED,):
            object.__setattr__(self, "modalities", (FUSED,))
        if self.kind == "LFPP" and len(self.modalities) < 2:
            raise ValueError("LFPP needs at least two modalities")
        if not self.modalities:
            raise ValueError("strategy needs at least one modality")
        if self.emit_suffix not in ("always", "on_collision"):
            raise ValueError(f"emit_suffix must be 'always' or 'on_collision', got {self.emit_suffix!r}")

    @property
    def name(self) -> str:
        if self.kind == "LF" and len(self.modalities) == 1:
            return f"{self.modalities[0]}-only"
        return self.kind


@dataclass
class SequenceExample:
    task: str
    source: list[int]
    target: list[int]
    user_id: str | None = None

    def to_dict(self) -> dict:
        return {"task": self.task, "source": self.source, "target": self.target, "user_id": self.user_id}


def fuse_embeddings(
    tables: Mapping[str, EmbeddingTable],
    scales: Mapping[str, float] | None = None,
    modalities: Sequence[str] | None = None,
) -> EmbeddingTable:
    """Concatenate row-normalized modality vectors, each times its scale."""
    modalities = list(modalities or tables)
    ids = tables[modalities[0]].item_ids
    blocks = []
    for mod in modalities:
        table = tables[mod]
        if set(table.item_ids) != set(ids):
            raise ValueError(f"item set of {mod!r} differs from {modalities[0]!r}")
        v = table.vectors[[table.index(i) for i in ids]]
        norms = np.linalg.norm(v, axis=1, keepdims=True)
        v = v / np.where(norms > 0, norms, 1.0)
        blocks.append(v * (1.0 if scales is None else scales.get(mod, 1.0)))
    return EmbeddingTable(FUSED, ids, np.concatenate(blocks, axis=1))


def _block(item, mod, sidmap: SemanticIdMap, vocab: TokenVocab, emit_suffix: str) -> list[int]:
    if item not in sidmap:
        raise KeyError(f"item {item!r} has no {mod!r} semantic id")
    codes, suffix = sidmap[item]
    out = [vocab.code(mod, level + 1, c) for level, c in enumerate(codes)]
    if emit_suffix == "always" or sidmap.has_collisions():
        out.append(vocab.suffix(mod, suffix))
    return out


def item_tokens(item: str, strategy: FusionStrategy, sidmaps: Mapping[str, SemanticIdMap],
                vocab: TokenVocab) -> list[int]:
    out: list[int] = []
    for i, mod in enumerate(strategy.modalities):
        if i and strategy.kind == "LFPP":
            out.append(vocab.sep(i))
        out += _block(item, mod, sidmaps[mod], vocab, strategy.emit_suffix)
    return out


def build_rec_example(history: Sequence[str], target: str, strategy: FusionStrategy,
                      sidmaps, vocab: TokenVocab, max_history_items: int = 20,
                      user_id: str | None = None) -> SequenceExample:
    if not history:
        raise ValueError("empty history")
    source = [vocab.rec]
    for item in list(history)[-max_history_items:]:
        source += item_tokens(item, strategy, sidmaps, vocab)
    source.append(vocab.eos)
    target_tokens = item_tokens(target, strategy, sidmaps, vocab) + [vocab.eos]
    return SequenceExample("rec", source, target_tokens, user_id)


def build_alignment_examples(item: str, sidmaps, vocab: TokenVocab,
                             modalities: Sequence[str] = ("txt", "img"),
                             emit_suffix: str = "always") -> list[SequenceExample]:
    """Cross-modal ID translation pairs for one item (i2t first, then t2i)."""
    if len(modalities) != 2:
        raise ValueError("alignment examples are defined for exactly two modalities")
    first, second = modalities
    blocks = {m: _block(item, m, sidmaps[m], vocab, emit_suffix) for m in modalities}
    out = []
    for src, dst in ((second, first), (first, second)):
        out.append(SequenceExample(
            f"align-{src}2{dst}",
            [vocab.align(src, dst)] + blocks[src] + [vocab.eos],
            blocks[dst] + [vocab.eos],
        ))
    return out


def build_examples(split: str, splits: Mapping[str, dict], strategy: FusionStrategy, sidmaps,
                   vocab: TokenVocab, max_history_items: int = 20) -> list[SequenceExample]:
    """Recommendation examples for ``split`` in ("train", "val", "test"), users in sorted order."""
    out = []
    for user in sorted(splits):
        pairs = splits[user][split]
        if split != "train":
            pairs = [pairs]
        for history, target in pairs:
            out.append(build_rec_example(history, target, strategy, sidmaps, vocab, max_history_items, user))
    return out


def save_examples(examples: Sequence[SequenceExample], path) -> None:
    write_jsonl(path, (e.to_dict() for e in examples))
