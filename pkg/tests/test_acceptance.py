"""Acceptance criteria, one test per criterion.

Each test prints a single ``[PASS]``/``[FAIL]`` line with the measured
values; the lines are repeated in the pytest terminal summary.
"""

import json
import random
import time
import warnings
from pathlib import Path

import numpy as np
import pytest
import torch

from mgrec import metrics, pipeline
from mgrec.quant import ResidualQuantizer
from mgrec.seqrec import PrefixTrie, Seq2SeqTransformer, beam_search, train_model
from mgrec.sid import TokenVocab, build_alignment_examples, fuse_embeddings
from mgrec.synth import SynthConfig, gen_items

from test_metrics import (
    make_lf_vocab,
    oracle_ami,
    oracle_hits,
    oracle_mrr,
    oracle_ndcg,
    oracle_overlap,
    oracle_partial,
    random_overlap_pair,
    random_predictions,
    random_token_predictions,
)
from test_quant import brute_encode, rqvae_fd_errors
from test_seqrec import EOS, exhaustive_ranking, tiny, transformer_fd_errors

CONFIGS = Path(__file__).resolve().parents[1] / "configs"
ACCEPTANCE = CONFIGS / "acceptance.yaml"
DEFAULT = CONFIGS / "default.yaml"


def test_criterion_1_metric_oracles(acceptance_log):
    start = time.perf_counter()
    rng = random.Random(2024)
    vocab = make_lf_vocab()
    mismatches = 0
    n = 200
    for _ in range(n):
        preds = random_predictions(rng, n_items=20, n_users=10)
        k = rng.randint(1, 8)
        mismatches += metrics.hits_at_k(preds, k) != float(oracle_hits(preds, k))
        mismatches += abs(metrics.mrr(preds) - float(oracle_mrr(preds))) > 1e-12
        mismatches += abs(metrics.ndcg_at_k(preds, k) - oracle_ndcg(preds, k)) > 1e-12
        m = rng.randint(1, 20)
        a = [rng.randrange(rng.randint(1, 5)) for _ in range(m)]
        b = [rng.randrange(rng.randint(1, 5)) for _ in range(m)]
        mismatches += abs(metrics.ami(a, b) - oracle_ami(a, b)) > 1e-9
        pa, pb = random_overlap_pair(rng)
        for mode in ("hits", "top1"):
            mismatches += metrics.prediction_overlap(pa, pb, mode) != float(oracle_overlap(pa, pb, mode))
        tp = random_token_predictions(rng, vocab)
        for mod in ("txt", "img"):
            mismatches += metrics.partial_hits(tp, mod, vocab, k) != float(oracle_partial(tp, mod, vocab, k))
    elapsed = time.perf_counter() - start
    ok = mismatches == 0 and elapsed < 10
    acceptance_log(1, "metric oracles", ok, f"{n} instances, {mismatches} mismatches, {elapsed:.1f}s (< 10s)")
    assert ok


def test_criterion_2_quantizer(acceptance_log):
    start = time.perf_counter()
    tables, _ = gen_items(SynthConfig())
    q = ResidualQuantizer(n_levels=3, codebook_size=256).fit(tables["txt"])
    X = np.random.default_rng(11).standard_normal((1000, tables["txt"].dim))
    codes = q.transform(X)
    wrong = sum(list(c) != brute_encode(q.codebooks_, x) for x, c in zip(X, codes))
    mse = q.residual_mse_
    monotone = all(b <= a for a, b in zip(mse, mse[1:]))
    sidmap = q.assign_ids(tables["txt"])
    injective = len(set(sidmap.entries.values())) == len(tables["txt"])
    elapsed = time.perf_counter() - start
    ok = wrong == 0 and monotone and injective and elapsed < 60
    acceptance_log(2, "quantizer correctness", ok,
                   f"encode mismatches {wrong}/1000, residual MSE {[round(float(v), 4) for v in mse]}, "
                   f"injective={injective}, {elapsed:.1f}s (< 60s)")
    assert ok


def test_criterion_3_gradients(acceptance_log):
    start = time.perf_counter()
    t_err = max(transformer_fd_errors(per_tensor=None).values())
    v_err = max(rqvae_fd_errors().values())
    elapsed = time.perf_counter() - start
    ok = t_err < 1e-3 and v_err < 1e-3 and elapsed < 60
    acceptance_log(3, "gradient fidelity", ok,
                   f"max rel err transformer {t_err:.2e}, rq-vae {v_err:.2e} (< 1e-3), {elapsed:.1f}s (< 60s)")
    assert ok


def test_criterion_4_decoder(acceptance_log):
    start = time.perf_counter()
    V, L = 6, 3
    exact = True
    for seed in range(3):
        model = tiny(vocab=V, seed=seed, dtype=torch.float64)
        with torch.no_grad():
            model.head.weight.mul_(50)
        oracle = exhaustive_ranking(model, [3, 4, 5], V, L)
        got = beam_search(model, [3, 4, 5], beam_width=V ** L, max_len=L)
        exact &= [s for s, _ in got] == [s for s, _ in oracle]
        exact &= bool(np.allclose([p for _, p in got], [p for _, p in oracle], atol=1e-9))
    rng = random.Random(0)
    catalog = {tuple(rng.randrange(3, 12) for _ in range(3)) for _ in range(60)}
    trie = PrefixTrie([list(c) + [EOS] for c in catalog])
    sources = [[rng.randrange(3, 12) for _ in range(4)] for _ in range(20)]
    out = beam_search(tiny(vocab=12, seed=9), sources, beam_width=20, trie=trie)
    in_catalog = all(tuple(s) in catalog for res in out for s, _ in res)
    elapsed = time.perf_counter() - start
    ok = exact and in_catalog and elapsed < 30
    acceptance_log(4, "decoder correctness", ok,
                   f"exhaustive match={exact}, constrained in-catalog={in_catalog}, {elapsed:.1f}s (< 30s)")
    assert ok


def test_criterion_5_alignment_memorization(acceptance_log):
    start = time.perf_counter()
    cfg = pipeline.load_config(ACCEPTANCE)
    tables, _ = gen_items(SynthConfig(n_items=200, clusters_per_modality=cfg.synth.clusters_per_modality))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        sidmaps = {m: ResidualQuantizer(**cfg.quant_params(m, 0)).fit(t).assign_ids(t) for m, t in tables.items()}
    vocab = TokenVocab.from_sidmaps(sidmaps, ["txt", "img"])
    examples = [e for item in sorted(sidmaps["txt"].entries) for e in build_alignment_examples(item, sidmaps, vocab)]
    model = Seq2SeqTransformer.build(cfg.model_config(len(vocab), 0))
    sched = cfg.train_schedule("LFPP", 0)
    sched.phase_b_steps = 0
    train_model(model, [], sched, examples, bos=vocab.bos)
    greedy = beam_search(model, [e.source for e in examples], 1, eos=vocab.eos, bos=vocab.bos, chunk=256)
    acc = {}
    for task in ("align-img2txt", "align-txt2img"):
        pairs = [(g[0][0], e.target[:-1]) for g, e in zip(greedy, examples) if e.task == task]
        acc[task] = float(np.mean([a == b for a, b in pairs]))
    elapsed = time.perf_counter() - start
    ok = min(acc.values()) >= 0.90 and elapsed < 600
    acceptance_log(5, "alignment memorization", ok,
                   f"i2t {acc['align-img2txt']:.3f}, t2i {acc['align-txt2img']:.3f} (>= 0.90), "
                   f"{sched.phase_a_steps} phase-A steps, {elapsed:.0f}s (< 600s)")
    assert ok


@pytest.fixture(scope="module")
def ordering_run(tmp_path_factory):
    cfg = pipeline.load_config(ACCEPTANCE, out=str(tmp_path_factory.mktemp("acceptance")))
    start = time.process_time()
    report = pipeline.run_pipeline(cfg)
    return cfg, report, time.process_time() - start


@pytest.mark.slow
def test_criterion_6_multimodal_ordering(ordering_run, acceptance_log):
    cfg, report, cpu = ordering_run
    hits = {row["strategy"]: row["Hits@5"]["mean"] for row in report["comparison"]}
    best_uni = max(hits["txt-only"], hits["img-only"])
    ok = hits["LFPP"] > hits["LF"] and hits["LFPP"] >= 1.10 * best_uni and cpu < 1800
    detail = ", ".join(f"{k} {v:.4f}" for k, v in hits.items())
    acceptance_log(6, "LFPP > LF and LFPP >= 1.10 x best unimodal (Hits@5, 3-seed mean)", ok,
                   f"{detail}; ratio {hits['LFPP'] / best_uni:.3f}; {cpu / 60:.1f} CPU-min (< 30)")
    assert ok


def test_criterion_7_text_dominates_early_fusion(acceptance_log):
    rows = []
    for seed in (0, 1, 2):
        cfg = SynthConfig(seed=seed)
        tables, _ = gen_items(cfg)
        fused = fuse_embeddings(tables, {"txt": 10.0, "img": 1.0})
        labels = {}
        for name, table in {**tables, "fused": fused}.items():
            sidmap = ResidualQuantizer(n_levels=3, codebook_size=256, random_state=seed).fit(table).assign_ids(table)
            labels[name] = metrics.first_level_labels(sidmap)
        rows.append((metrics.ami(labels["txt"], labels["fused"]), metrics.ami(labels["img"], labels["fused"])))
    ok = all(t > i for t, i in rows)
    detail = "; ".join(f"seed {s}: txt {t:.3f} vs img {i:.3f}" for s, (t, i) in enumerate(rows))
    acceptance_log(7, "AMI(txt, EF) > AMI(img, EF) with scales txt 10 / img 1", ok, detail)
    assert ok


@pytest.mark.slow
def test_criterion_8_lf_partial_hits(ordering_run, acceptance_log):
    cfg, _, _ = ordering_run
    first = cfg.modalities[0]
    partial, full = [], []
    for seed in cfg.seeds:
        cell = json.loads((cfg.cell_dir("LF", seed) / "report.json").read_text())
        diag = cell["diagnostics"]["partial_hits_unconstrained"]
        partial.append(diag[f"{first}_only"])
        full.append(diag["multimodal"])
    ok = all(p >= f for p, f in zip(partial, full)) and np.mean(partial) > np.mean(full)
    detail = "; ".join(f"seed {s}: {p:.4f} vs {f:.4f}" for s, p, f in zip(cfg.seeds, partial, full))
    acceptance_log(8, f"LF partial Hits@5 ({first} block) >= full Hits@5 (unconstrained)", ok, detail)
    assert ok


@pytest.mark.slow
def test_criterion_9_determinism(tmp_path, acceptance_log):
    overrides = ["schedule.phase_a_steps=100", "schedule.phase_b_steps=100", "data.max_history_items=5",
                 "model.width=64", "model.ff_width=128"]
    blobs = []
    for run in ("first", "second"):
        cfg = pipeline.load_config(DEFAULT, overrides, seed=7, out=str(tmp_path / run))
        pipeline.run_pipeline(cfg)
        blobs.append((cfg.root / "report.json").read_bytes())
    ok = blobs[0] == blobs[1]
    acceptance_log(9, "byte-identical report.json across two runs", ok,
                   f"default synth, seed 7, all five strategies, {len(blobs[0])} bytes each")
    assert ok
