"""Synthetic two-modality catalogs with complementary cluster structure.

Each item gets an independent cluster label per modality; its embedding in
that modality is the (unit-norm) cluster centroid plus isotropic Gaussian
noise, times a per-modality dominance scale. Users walk the catalog as a
Markov chain: the next item shares the previous item's image cluster with
probability ``alpha`` and its text cluster otherwise.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .formats import EmbeddingTable, InteractionDataset, save_embeddings, save_interactions, save_labels

__all__ = ["SynthConfig", "gen_items", "gen_interactions", "generate", "write_synth"]


@dataclass
class SynthConfig:
    n_items: int = 2000
    n_users: int = 500
    dim: dict[str, int] = field(default_factory=lambda: {"txt": 32, "img": 32})
    clusters_per_modality: dict[str, int] = field(default_factory=lambda: {"txt": 8, "img": 8})
    noise_sigma: float = 0.1
    dominance_scale: dict[str, float] = field(default_factory=lambda: {"txt": 1.0, "img": 1.0})
    history_length_range: tuple[int, int] = (8, 20)
    alpha: float = 0.5
    seed: int = 0

    def __post_init__(self):
        self.history_length_range = tuple(self.history_length_range)
        self.validate()

    @property
    def modalities(self) -> list[str]:
        return list(self.clusters_per_modality)

    def validate(self) -> None:
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        if len(self.clusters_per_modality) != 2:
            raise ValueError("synthetic generator models exactly two modalities (txt, img)")
        for mod, c in self.clusters_per_modality.items():
            if c < 2:
                raise ValueError(f"{mod}: need at least 2 clusters, got {c}")
            if mod not in self.dim or self.dim[mod] < 1:
                raise ValueError(f"{mod}: missing or non-positive dim")
            if c > self.n_items:
                raise ValueError(f"{mod}: {c} clusters cannot all be populated by {self.n_items} items")
        lo, hi = self.history_length_range
        if not 1 <= lo <= hi:
            raise ValueError(f"bad history_length_range {self.history_length_range}")
        if self.n_users < 1:
            raise ValueError("n_users must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["history_length_range"] = list(self.history_length_range)
        return d


def item_ids(n: int) -> list[str]:
    width = len(str(max(n - 1, 0)))
    return [f"i{k:0{width}d}" for k in range(n)]


def gen_items(config: SynthConfig) -> tuple[dict[str, EmbeddingTable], dict[str, dict[str, int]]]:
    """Return per-modality embedding tables and ground-truth cluster labels."""
    config.validate()
    ids = item_ids(config.n_items)
    root = np.random.SeedSequence(config.seed)
    tables, labels = {}, {}
    for mod, stream in zip(config.modalities, root.spawn(len(config.modalities))):
        rng = np.random.default_rng(stream)
        n_clusters, dim = config.clusters_per_modality[mod], config.dim[mod]
        centroids = rng.standard_normal((n_clusters, dim))
        centroids /= np.linalg.norm(centroids, axis=1, keepdims=True)
        # balanced label multiset, independently permuted per modality
        lab = rng.permutation(np.arange(config.n_items) % n_clusters)
        noise = rng.standard_normal((config.n_items, dim)) * config.noise_sigma
        vectors = (centroids[lab] + noise) * config.dominance_scale.get(mod, 1.0)
        tables[mod] = EmbeddingTable(mod, tuple(ids), vectors)
        labels[mod] = {i: int(c) for i, c in zip(ids, lab)}
    return tables, labels


def gen_interactions(config: SynthConfig, labels: dict[str, dict[str, int]]) -> InteractionDataset:
    """Sample one Markov walk per user.

    The next item is drawn uniformly among the *other* members of the
    previous item's image cluster (probability ``alpha``) or text cluster.
    User ``u`` draws from its own stream seeded by ``(seed, u)``.
    """
    config.validate()
    txt_mod, img_mod = config.modalities
    ids = sorted(labels[txt_mod])
    pos = {item: k for k, item in enumerate(ids)}
    members = {}
    for mod in (txt_mod, img_mod):
        groups: dict[int, list[int]] = {}
        for item in ids:
            groups.setdefault(labels[mod][item], []).append(pos[item])
        if any(len(g) < 2 for g in groups.values()):
            raise ValueError(f"{mod}: every cluster needs >= 2 items for a walk to move")
        members[mod] = {c: np.asarray(g) for c, g in groups.items()}
    lab = {mod: np.array([labels[mod][i] for i in ids]) for mod in (txt_mod, img_mod)}

    lo, hi = config.history_length_range
    width = len(str(config.n_users - 1))
    histories, stamps = {}, {}
    for u in range(config.n_users):
        rng = np.random.default_rng([config.seed, 1, u])
        length = int(rng.integers(lo, hi + 1))
        cur = int(rng.integers(len(ids)))
        walk = [cur]
        for _ in range(length - 1):
            mod = img_mod if rng.random() < config.alpha else txt_mod
            group = members[mod][lab[mod][cur]]
            k = int(rng.integers(len(group) - 1))
            if k >= np.searchsorted(group, cur):
                k += 1  # skip the current item
            nxt = int(group[k])
            walk.append(nxt)
            cur = nxt
        user = f"u{u:0{width}d}"
        histories[user] = [ids[k] for k in walk]
        stamps[user] = [float(t) for t in range(length)]
    return InteractionDataset(histories, stamps)


def generate(config: SynthConfig):
    tables, labels = gen_items(config)
    return tables, labels, gen_interactions(config, labels)


def write_synth(out_dir, tables, labels, dataset) -> dict[str, Path]:
    out_dir = Path(out_dir)
    paths = {}
    for mod, table in tables.items():
        paths[f"emb_{mod}"] = out_dir / f"embeddings_{mod}.jsonl"
        save_embeddings(table, paths[f"emb_{mod}"])
    paths["interactions"] = out_dir / "interactions.jsonl"
    save_interactions(dataset, paths["interactions"])
    paths["labels"] = out_dir / "labels.jsonl"
    save_labels(labels, paths["labels"])
    return paths
