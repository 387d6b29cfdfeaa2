"""Experiment orchestration: synth -> quantize -> train -> eval -> report.

Artifacts live under ``<out>/<name>/``::

    data/<seed>/                     embeddings_<mod>.jsonl, interactions.jsonl, labels.jsonl
    <strategy>/<seed>/sidmaps/       <mod>.jsonl
    <strategy>/<seed>/checkpoints/   quantizer_<mod>.ckpt, model.ckpt
    <strategy>/<seed>/               vocab.json, examples.jsonl, losscurve.csv
    <strategy>/<seed>/predictions/   predictions.jsonl (+ predictions_unconstrained.jsonl)
    <strategy>/<seed>/               report.json, report.csv
    report.json, report.csv          cross-strategy tables

Every step skips work whose outputs already exist unless ``force`` is set.
"""

from __future__ import annotations

import copy
import csv
import dataclasses
import io
import json
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import yaml

from . import metrics
from .formats import (
    InteractionDataset,
    load_checkpoint,
    load_embeddings,
    load_interactions,
    load_sidmap,
    read_jsonl,
    save_checkpoint,
    save_sidmap,
    split_leave_last_out,
    write_jsonl,
)
from .quant import ResidualQuantizer
from .seqrec import (
    ModelConfig,
    PrefixTrie,
    Seq2SeqTransformer,
    TrainSchedule,
    beam_search,
    position_accuracy,
    train_model,
)
from .sid import (
    FUSED,
    FusionStrategy,
    TokenVocab,
    build_alignment_examples,
    build_examples,
    fuse_embeddings,
    item_tokens,
    save_examples,
)
from .synth import SynthConfig, gen_interactions, gen_items, write_synth

__all__ = [
    "ConfigError",
    "MissingArtifactError",
    "ExperimentConfig",
    "load_config",
    "parse_strategy",
    "cmd_synth",
    "cmd_quantize",
    "cmd_train",
    "cmd_eval",
    "cmd_report",
    "cmd_ablate",
    "run_pipeline",
]

log = logging.getLogger(__name__)

STRATEGY_ORDER = ["txt-only", "img-only", "EF", "LF", "LFPP"]


class ConfigError(ValueError):
    pass


class MissingArtifactError(FileNotFoundError):
    pass


@dataclass
class QuantConfig:
    n_levels: int = 3
    codebook_size: int = 256
    backend: str = "rq-kmeans"
    kmeans_iters: int = 50
    latent_dim: int = 32
    hidden_dims: list[int] = field(default_factory=lambda: [128, 64])
    beta: float = 0.25
    learning_rate: float = 1e-3
    n_steps: int = 2000
    batch_size: int = 512


@dataclass
class DataConfig:
    data_dir: str | None = None  # None: generate synthetic data per seed
    min_interactions: int = 5
    filter_items: bool = True
    max_history_items: int = 20
    align_items: str = "all"  # or "train": items seen in training interactions


@dataclass
class EvalConfig:
    beam_width: int = 20
    k: int = 5
    constrained: bool = True
    partial_unconstrained: bool = True


@dataclass
class ExperimentConfig:
    name: str = "default"
    out: str = "out"
    modalities: list[str] = field(default_factory=lambda: ["txt", "img"])
    strategies: list[str] = field(default_factory=lambda: list(STRATEGY_ORDER))
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2])
    ef_scales: dict[str, float] = field(default_factory=lambda: {"txt": 1.0, "img": 1.0})
    synth: SynthConfig = field(default_factory=SynthConfig)
    data: DataConfig = field(default_factory=DataConfig)
    quant: QuantConfig = field(default_factory=QuantConfig)
    quant_overrides: dict[str, dict] = field(default_factory=dict)
    model: dict[str, Any] = field(default_factory=dict)
    schedule: dict[str, Any] = field(default_factory=dict)
    eval: EvalConfig = field(default_factory=EvalConfig)

    @property
    def root(self) -> Path:
        return Path(self.out) / self.name

    def cell_dir(self, strategy: str, seed: int) -> Path:
        return self.root / strategy / str(seed)

    def data_dir(self, seed: int) -> Path:
        if self.data.data_dir:
            return Path(self.data.data_dir)
        return self.root / "data" / str(seed)

    def quant_params(self, modality: str, seed: int) -> dict:
        params = dataclasses.asdict(self.quant)
        params.update(self.quant_overrides.get(modality, {}))
        params["hidden_dims"] = tuple(params["hidden_dims"])
        params["random_state"] = seed
        return params

    def model_config(self, vocab_size: int, seed: int) -> ModelConfig:
        return ModelConfig(**{**self.model, "vocab_size": vocab_size, "seed": seed})

    def train_schedule(self, strategy: str, seed: int) -> TrainSchedule:
        sched = TrainSchedule(**{**self.schedule, "seed": seed})
        if strategy != "LFPP" and not sched.mix:
            sched.phase_a_steps = 0
        return sched

    def validate(self) -> None:
        if not self.strategies:
            raise ConfigError("strategies must be non-empty")
        if not self.seeds:
            raise ConfigError("seeds must be non-empty")
        for s in self.strategies:
            parse_strategy(s, self.modalities)
        if self.data.align_items not in ("all", "train"):
            raise ConfigError("data.align_items must be 'all' or 'train'")
        try:
            ModelConfig(**{**self.model, "vocab_size": 2}).validate()
            TrainSchedule(**self.schedule).validate()
            ResidualQuantizer(**self.quant_params(self.modalities[0], 0))._validate_params()
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from None

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["synth"] = self.synth.to_dict()
        return d


def _build(cls, values: dict, where: str):
    if not isinstance(values, dict):
        raise ConfigError(f"{where}: expected a mapping")
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {unknown}")
    try:
        return cls(**values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from None


def config_from_dict(raw: dict) -> ExperimentConfig:
    raw = copy.deepcopy(raw or {})
    nested = {"synth": SynthConfig, "data": DataConfig, "quant": QuantConfig, "eval": EvalConfig}
    for key, cls in nested.items():
        if key in raw:
            raw[key] = _build(cls, raw[key], key)
    for key in ("model", "schedule"):
        target = ModelConfig if key == "model" else TrainSchedule
        if key in raw:
            bad = sorted(set(raw[key]) - {f.name for f in dataclasses.fields(target)} - {"vocab_size", "seed"})
            if bad:
                raise ConfigError(f"{key}: unknown keys {bad}")
    cfg = _build(ExperimentConfig, raw, "config")
    cfg.validate()
    return cfg


def set_dotted(raw: dict, assignment: str) -> None:
    if "=" not in assignment:
        raise ConfigError(f"--set expects key=value, got {assignment!r}")
    key, value = assignment.split("=", 1)
    parts = key.strip().split(".")
    node = raw
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise ConfigError(f"--set {key}: {p!r} is not a mapping")
    node[parts[-1]] = yaml.safe_load(value)


def load_config(path=None, overrides=(), seed: int | None = None, out: str | None = None) -> ExperimentConfig:
    raw: dict = {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file {path} does not exist")
        try:
            raw = yaml.safe_load(path.read_text()) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: {exc}") from None
    for assignment in overrides:
        set_dotted(raw, assignment)
    if seed is not None:
        raw["seeds"] = [seed]
    if out is not None:
        raw["out"] = out
    return config_from_dict(raw)


def parse_strategy(name: str, modalities=("txt", "img")) -> FusionStrategy:
    if name.endswith("-only"):
        mod = name[: -len("-only")]
        if mod not in modalities:
            raise ConfigError(f"strategy {name!r}: unknown modality {mod!r}")
        return FusionStrategy("LF", (mod,))
    if name in ("EF", "LF", "LFPP"):
        return FusionStrategy(name, tuple(modalities))
    raise ConfigError(f"unknown strategy {name!r}; choose from {STRATEGY_ORDER}")


# -- helpers ---------------------------------------------------------------------

def _require(path: Path, hint: str) -> Path:
    if not path.exists():
        raise MissingArtifactError(f"missing {path}; {hint}")
    return path


def _dump_json(obj, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _write_csv(rows: list[dict], path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    buf = io.StringIO()
    if rows:
        writer = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
    path.write_text(buf.getvalue())


def load_tables(cfg: ExperimentConfig, seed: int):
    d = cfg.data_dir(seed)
    hint = "run `mgrec synth` first" if not cfg.data.data_dir else "check data.data_dir"
    return {m: load_embeddings(_require(d / f"embeddings_{m}.jsonl", hint), m) for m in cfg.modalities}


def load_dataset(cfg: ExperimentConfig, seed: int) -> InteractionDataset:
    d = cfg.data_dir(seed)
    path = _require(d / "interactions.jsonl", "run `mgrec synth` first")
    ds = load_interactions(path, cfg.data.min_interactions, cfg.data.filter_items)
    return split_leave_last_out(ds)


def load_cell_sidmaps(cfg: ExperimentConfig, strategy: FusionStrategy, seed: int, name: str):
    cell = cfg.cell_dir(name, seed)
    out = {}
    for mod in strategy.modalities:
        path = _require(cell / "sidmaps" / f"{mod}.jsonl", "run `mgrec quantize` first")
        size = cfg.quant_params(mod, seed)["codebook_size"]
        out[mod] = load_sidmap(path, codebook_size=size)
    return out


def item_sequences(items, strategy: FusionStrategy, sidmaps, vocab: TokenVocab) -> dict[tuple, str]:
    return {tuple(item_tokens(i, strategy, sidmaps, vocab) + [vocab.eos]): i for i in items}


# -- commands ----------------------------------------------------------------------

def cmd_synth(cfg: ExperimentConfig, force: bool = False) -> list[Path]:
    if cfg.data.data_dir:
        raise ConfigError("data.data_dir is set; synthetic generation would not be used")
    written = []
    for seed in cfg.seeds:
        d = cfg.data_dir(seed)
        if (d / "interactions.jsonl").exists() and not force:
            log.info("synth seed %d: up to date", seed)
            continue
        scfg = dataclasses.replace(cfg.synth, seed=seed)
        tables, labels = gen_items(scfg)
        dataset = gen_interactions(scfg, labels)
        write_synth(d, tables, labels, dataset)
        _dump_json(scfg.to_dict(), d / "synth_config.json")
        written.append(d)
    return written


def cmd_quantize(cfg: ExperimentConfig, strategies=None, force: bool = False) -> None:
    for name in strategies or cfg.strategies:
        strategy = parse_strategy(name, cfg.modalities)
        for seed in cfg.seeds:
            cell = cfg.cell_dir(name, seed)
            if all((cell / "sidmaps" / f"{m}.jsonl").exists() for m in strategy.modalities) and not force:
                continue
            tables = load_tables(cfg, seed)
            if strategy.kind == "EF":
                tables = {FUSED: fuse_embeddings(tables, cfg.ef_scales, cfg.modalities)}
            for mod in strategy.modalities:
                quantizer = ResidualQuantizer(**cfg.quant_params(mod, seed))
                with warnings.catch_warnings():
                    warnings.simplefilter("ignore", RuntimeWarning)
                    quantizer.fit(tables[mod])
                save_checkpoint(quantizer, cell / "checkpoints" / f"quantizer_{mod}.ckpt")
                save_sidmap(quantizer.assign_ids(tables[mod]), cell / "sidmaps" / f"{mod}.jsonl")
            log.info("quantize %s seed %d: done", name, seed)


def _examples(cfg, strategy, name, seed):
    sidmaps = load_cell_sidmaps(cfg, strategy, seed, name)
    vocab = TokenVocab.from_sidmaps(sidmaps, strategy.modalities)
    ds = load_dataset(cfg, seed)
    H = cfg.data.max_history_items
    rec = build_examples("train", ds.splits, strategy, sidmaps, vocab, H)
    align = []
    if strategy.kind == "LFPP":
        if cfg.data.align_items == "all":
            items = sorted(sidmaps[strategy.modalities[0]].entries)
        else:
            items = sorted({i for h in ds.histories.values() for i in h})
        for item in items:
            align += build_alignment_examples(item, sidmaps, vocab, strategy.modalities[:2],
                                              strategy.emit_suffix)
    return sidmaps, vocab, ds, rec, align


def cmd_train(cfg: ExperimentConfig, strategies=None, force: bool = False) -> None:
    for name in strategies or cfg.strategies:
        strategy = parse_strategy(name, cfg.modalities)
        for seed in cfg.seeds:
            cell = cfg.cell_dir(name, seed)
            ckpt = cell / "checkpoints" / "model.ckpt"
            if ckpt.exists() and not force:
                continue
            sidmaps, vocab, ds, rec, align = _examples(cfg, strategy, name, seed)
            vocab.save(cell / "vocab.json")
            save_examples(align + rec, cell / "examples.jsonl")
            mcfg = cfg.model_config(len(vocab), seed)
            longest = max(len(e.source) for e in rec + align)
            if longest > mcfg.max_source_len:
                raise ConfigError(f"examples reach {longest} source tokens > model.max_source_len")
            model = Seq2SeqTransformer.build(mcfg)
            log.info("train %s seed %d: %d rec + %d align examples, vocab %d",
                     name, seed, len(rec), len(align), len(vocab))
            curve = train_model(model, rec, cfg.train_schedule(name, seed), align, bos=vocab.bos)
            _write_csv([{"step": s, "phase": p, "loss": repr(v)} for s, p, v in curve], cell / "losscurve.csv")
            save_checkpoint(model, ckpt)


def predict_cell(cfg: ExperimentConfig, name: str, seed: int, constrained: bool = True):
    """Beam-decode every test user for one (strategy, seed) cell."""
    strategy = parse_strategy(name, cfg.modalities)
    cell = cfg.cell_dir(name, seed)
    model = load_checkpoint(_require(cell / "checkpoints" / "model.ckpt", "run `mgrec train` first"))
    vocab = TokenVocab.load(cell / "vocab.json")
    sidmaps = load_cell_sidmaps(cfg, strategy, seed, name)
    ds = load_dataset(cfg, seed)
    lookup = item_sequences(sorted(sidmaps[strategy.modalities[0]].entries), strategy, sidmaps, vocab)
    trie = PrefixTrie(list(lookup)) if constrained else None
    test = build_examples("test", ds.splits, strategy, sidmaps, vocab, cfg.data.max_history_items)
    max_len = max(len(k) for k in lookup)
    beams = beam_search(model, [e.source for e in test], cfg.eval.beam_width, trie, max_len,
                        eos=vocab.eos, bos=vocab.bos)
    preds = []
    for ex, ranked in zip(test, beams):
        seqs = [tuple(s) for s, _ in ranked]
        cands, seen = [], set()
        for s in seqs:
            item = lookup.get(s + (vocab.eos,))
            cands.append(None if item in seen else item)
            seen.add(item)
        preds.append(metrics.RankedPrediction(
            ex.user_id, cands, ds.splits[ex.user_id]["test"][1], seqs,
            tuple(ex.target[:-1]), [round(float(s), 12) for _, s in ranked],
        ))
    return preds, vocab, model, test


def block_spans(tokens, vocab: TokenVocab) -> list[tuple[str, int, int]]:
    """``(modality, first, last)`` target positions of each modality block."""
    spans: list[tuple[str, int, int]] = []
    for pos, t in enumerate(tokens):
        mod = vocab.modality_of(t)
        if mod is None:
            continue
        if spans and spans[-1][0] == mod and spans[-1][2] == pos - 1:
            spans[-1] = (mod, spans[-1][1], pos)
        else:
            spans.append((mod, pos, pos))
    return spans


def cmd_eval(cfg: ExperimentConfig, strategies=None, force: bool = False) -> dict:
    reports = {}
    k = cfg.eval.k
    for name in strategies or cfg.strategies:
        strategy = parse_strategy(name, cfg.modalities)
        for seed in cfg.seeds:
            cell = cfg.cell_dir(name, seed)
            if (cell / "report.json").exists() and not force:
                reports[(name, seed)] = json.loads((cell / "report.json").read_text())
                continue
            preds, vocab, model, test = predict_cell(cfg, name, seed, cfg.eval.constrained)
            write_jsonl(cell / "predictions" / "predictions.jsonl", (p.to_dict() for p in preds))
            report = {
                "strategy": name,
                "seed": seed,
                "constrained": cfg.eval.constrained,
                "n_test_users": len(preds),
                "metrics": metrics.summarize(preds, k),
                "diagnostics": {},
            }
            diag = report["diagnostics"]
            acc = position_accuracy(model, test, bos=vocab.bos)
            diag["position_accuracy"] = [float(a) for a in acc]
            diag["blocks"] = [list(b) for b in block_spans(test[0].target, vocab)]
            if len(strategy.modalities) > 1 and cfg.eval.partial_unconstrained:
                if cfg.eval.constrained:
                    free, _, _, _ = predict_cell(cfg, name, seed, constrained=False)
                    write_jsonl(cell / "predictions" / "predictions_unconstrained.jsonl",
                                (p.to_dict() for p in free))
                else:
                    free = preds
                partial = {f"{m}_only": metrics.partial_hits(free, m, vocab, k) for m in strategy.modalities}
                partial["multimodal"] = metrics.hits_at_k(free, k)
                diag["partial_hits_unconstrained"] = partial
                valid = [c is not None for p in free for c in p.candidates]
                diag["in_catalog_rate_unconstrained"] = float(np.mean(valid)) if valid else 0.0
            if len(strategy.modalities) > 1:
                partial = {f"{m}_only": metrics.partial_hits(preds, m, vocab, k) for m in strategy.modalities}
                partial["multimodal"] = metrics.hits_at_k(preds, k)
                diag["partial_hits"] = partial
            _dump_json(report, cell / "report.json")
            rows = [{"strategy": name, "metric": m, "seed": seed, "value": repr(v)}
                    for m, v in report["metrics"].items()]
            _write_csv(rows, cell / "report.csv")
            reports[(name, seed)] = report
            log.info("eval %s seed %d: %s", name, seed, report["metrics"])
    return reports


def _load_cell_preds(cfg, name, seed, filename="predictions.jsonl"):
    path = cfg.cell_dir(name, seed) / "predictions" / filename
    if not path.exists():
        return None
    return [metrics.RankedPrediction.from_dict(r) for _, r in read_jsonl(path)]


def _find_sidmap(cfg, modality, seed):
    for name in cfg.strategies:
        path = cfg.cell_dir(name, seed) / "sidmaps" / f"{modality}.jsonl"
        if path.exists():
            return load_sidmap(path, codebook_size=cfg.quant_params(modality, seed)["codebook_size"])
    return None


def cmd_report(cfg: ExperimentConfig) -> dict:
    """Merge cell reports into cross-strategy tables (``report.json`` / ``report.csv``)."""
    k = cfg.eval.k
    cells = {}
    for name in cfg.strategies:
        for seed in cfg.seeds:
            path = _require(cfg.cell_dir(name, seed) / "report.json", "run `mgrec eval` first")
            cells[(name, seed)] = json.loads(path.read_text())
    ordered = [s for s in STRATEGY_ORDER if s in cfg.strategies] + \
        [s for s in cfg.strategies if s not in STRATEGY_ORDER]
    comparison = []
    for name in ordered:
        stats = metrics.mean_std([cells[(name, s)]["metrics"] for s in cfg.seeds])
        comparison.append({"strategy": name, **stats})

    ami_rows = {}
    for seed in cfg.seeds:
        maps = {m: _find_sidmap(cfg, m, seed) for m in (*cfg.modalities, FUSED)}
        if any(v is None for v in maps.values()) or len(cfg.modalities) != 2:
            continue
        items = sorted(maps[FUSED].entries)
        lab = {m: metrics.first_level_labels(maps[m], items) for m in maps}
        a, b = cfg.modalities
        ami_rows[str(seed)] = {
            f"{b}_vs_{a}": metrics.ami(lab[b], lab[a]),
            f"{b}_vs_{FUSED}": metrics.ami(lab[b], lab[FUSED]),
            f"{a}_vs_{FUSED}": metrics.ami(lab[a], lab[FUSED]),
        }

    overlap = {}
    pairs = [("img-only", "txt-only"), ("img-only", "EF"), ("txt-only", "EF")]
    for mode in ("hits", "top1"):
        for x, y in pairs:
            vals = []
            for seed in cfg.seeds:
                pa, pb = _load_cell_preds(cfg, x, seed), _load_cell_preds(cfg, y, seed)
                if pa is not None and pb is not None:
                    vals.append(metrics.prediction_overlap(pa, pb, mode, k))
            if vals:
                overlap.setdefault(mode, {})[f"{x}_vs_{y}"] = float(np.mean(vals))

    partial = {}
    for name in ("LF", "LFPP"):
        rows = [cells[(name, s)]["diagnostics"].get("partial_hits_unconstrained")
                for s in cfg.seeds if (name, s) in cells]
        rows = [r for r in rows if r]
        if rows:
            partial[name] = metrics.mean_std(rows)

    report = {
        "experiment": cfg.name,
        "seeds": list(cfg.seeds),
        "k": k,
        "comparison": comparison,
        "ami_first_level": ami_rows,
        "prediction_overlap": overlap,
        "partial_hits_unconstrained": partial,
    }
    _dump_json(report, cfg.root / "report.json")
    rows = [{"strategy": name, "metric": m, "seed": seed, "value": repr(cells[(name, seed)]["metrics"][m])}
            for name in ordered for seed in cfg.seeds for m in cells[(name, seed)]["metrics"]]
    _write_csv(rows, cfg.root / "report.csv")
    return report


def run_pipeline(cfg: ExperimentConfig, force: bool = False) -> dict:
    if not cfg.data.data_dir:
        cmd_synth(cfg, force)
    cmd_quantize(cfg, force=force)
    cmd_train(cfg, force=force)
    cmd_eval(cfg, force=force)
    return cmd_report(cfg)


ABLATION_AXES = {"id_length": ("n_levels", [2, 3, 4]), "codebook_size": ("codebook_size", [64, 128, 256, 512])}


def cmd_ablate(cfg: ExperimentConfig, axis: str, values=None, force: bool = False) -> dict:
    """Re-run the pipeline once per sweep point; one result row per point."""
    if axis not in ABLATION_AXES:
        raise ConfigError(f"unknown ablation axis {axis!r}; choose from {sorted(ABLATION_AXES)}")
    key, default = ABLATION_AXES[axis]
    rows = []
    for value in values or default:
        point = copy.deepcopy(cfg)
        point.name = f"{cfg.name}/ablate-{axis}-{value}"
        setattr(point.quant, key, value)
        point.validate()
        if not point.data.data_dir:
            cmd_synth(cfg, force=False)  # all points share the parent's synthetic data
        report = _run_point(point, cfg, force)
        for row in report["comparison"]:
            rows.append({"axis": axis, "value": value, **row})
    result = {"experiment": cfg.name, "axis": axis, "rows": rows}
    _dump_json(result, cfg.root / f"ablate-{axis}.json")
    flat = [{"axis": axis, "value": r["value"], "strategy": r["strategy"], "metric": m,
             "mean": repr(r[m]["mean"]), "std": repr(r[m]["std"])}
            for r in rows for m in r if isinstance(r[m], dict)]
    _write_csv(flat, cfg.root / f"ablate-{axis}.csv")
    return result


def _run_point(point: ExperimentConfig, parent: ExperimentConfig, force: bool) -> dict:
    if not point.data.data_dir:
        for seed in point.seeds:
            src, dst = parent.data_dir(seed), point.data_dir(seed)
            if not (dst / "interactions.jsonl").exists() or force:
                dst.mkdir(parents=True, exist_ok=True)
                for f in src.iterdir():
                    (dst / f.name).write_bytes(f.read_bytes())
    cmd_quantize(point, force=force)
    cmd_train(point, force=force)
    cmd_eval(point, force=force)
    return cmd_report(point)
