import itertools
import math
import random

import numpy as np
import pytest
import torch

from mgrec.seqrec import (
    DivergenceError,
    GenerativeRecommender,
    ModelConfig,
    PrefixTrie,
    Seq2SeqTransformer,
    TrainSchedule,
    beam_search,
    collate,
    forward_loss,
    greedy_decode,
    sequence_log_prob,
    train_model,
)

EOS = 2


def tiny(vocab=12, width=8, heads=2, layers=1, seed=0, dtype=torch.float32, **kw):
    cfg = ModelConfig(vocab_size=vocab, encoder_layers=layers, decoder_layers=layers, heads=heads,
                      width=width, ff_width=2 * width, dropout=0.0, max_source_len=16, max_target_len=8,
                      seed=seed, **kw)
    return Seq2SeqTransformer.build(cfg, dtype)


def random_pairs(n, vocab, rng, src_len=(2, 6), tgt_len=(1, 4)):
    pairs = []
    for _ in range(n):
        s = [rng.randrange(3, vocab) for _ in range(rng.randint(*src_len))]
        t = [rng.randrange(3, vocab) for _ in range(rng.randint(*tgt_len))] + [EOS]
        pairs.append((s, t))
    return pairs


def test_initial_loss_near_uniform():
    V = 50
    model = tiny(vocab=V, width=32, heads=4)
    model.eval()
    batch = collate(random_pairs(64, V, random.Random(0)))
    assert forward_loss(model, batch).item() == pytest.approx(math.log(V), rel=0.05)


def test_collate_shapes_and_shift():
    src, tgt_in, tgt_out = collate([([5, 6], [7, EOS]), ([5], [8, 9, EOS])])
    assert src.tolist() == [[5, 6], [5, 0]]
    assert tgt_in.tolist() == [[1, 7, 0], [1, 8, 9]]
    assert tgt_out.tolist() == [[7, EOS, 0], [8, 9, EOS]]


def test_padding_does_not_change_logits():
    model = tiny(dtype=torch.float64)
    src = torch.tensor([[4, 5, 6]])
    padded = torch.tensor([[4, 5, 6, 0, 0]])
    tgt = torch.tensor([[1, 7]])
    torch.testing.assert_close(model(src, tgt), model(padded, tgt))


def test_memorize_tiny_set():
    pairs = random_pairs(8, 12, random.Random(1))
    model = tiny(width=32, heads=4)
    sched = TrainSchedule(phase_b_steps=400, batch_size=8, learning_rate=3e-3, warmup_steps=10, log_every=0)
    curve = train_model(model, pairs, sched)
    assert np.mean([c[2] for c in curve[-10:]]) < 0.01
    for s, t in pairs:
        assert greedy_decode(model, s)[0] == t[:-1]


# -- gradient check ----------------------------------------------------------

def transformer_fd_errors(seed=0, eps=1e-5, per_tensor=12):
    """Max relative error between autograd and central differences, per parameter tensor.

    ``per_tensor=None`` checks every coordinate.
    """
    model = tiny(vocab=12, width=8, heads=2, seed=seed, dtype=torch.float64)
    model.eval()
    batch = collate(random_pairs(4, 12, random.Random(seed)))
    model.zero_grad()
    forward_loss(model, batch).backward()
    rng = np.random.default_rng(seed)
    worst = {}
    for name, p in model.named_parameters():
        flat = p.data.view(-1)
        grad = p.grad.view(-1)
        errs = []
        picks = range(flat.numel()) if per_tensor is None else \
            rng.choice(flat.numel(), min(per_tensor, flat.numel()), replace=False)
        for idx in picks:
            orig = flat[idx].item()
            with torch.no_grad():
                flat[idx] = orig + eps
                up = forward_loss(model, batch).item()
                flat[idx] = orig - eps
                down = forward_loss(model, batch).item()
                flat[idx] = orig
            fd = (up - down) / (2 * eps)
            an = grad[idx].item()
            errs.append(abs(an - fd) / max(abs(an), abs(fd), 1e-6))
        worst[name] = max(errs)
    return worst


def test_transformer_gradients_match_finite_differences():
    worst = transformer_fd_errors()
    assert max(worst.values()) < 1e-3, worst


# -- beam search ---------------------------------------------------------------

def exhaustive_ranking(model, source, vocab, max_len):
    """Every EOS-terminated (or max-length) sequence over the emittable tokens, ranked exactly."""
    emittable = [t for t in range(vocab) if t not in (0, 1)]
    seqs = []
    for n in range(1, max_len + 1):
        for seq in itertools.product(emittable, repeat=n):
            if EOS in seq[:-1]:
                continue
            if seq[-1] == EOS or n == max_len:
                seqs.append(list(seq))
    scored = [(s[:-1] if s[-1] == EOS else s, sequence_log_prob(model, source, s)) for s in seqs]
    return sorted(scored, key=lambda c: (-c[1], c[0]))


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_beam_equals_exhaustive(seed):
    V, L = 6, 3
    model = tiny(vocab=V, seed=seed, dtype=torch.float64)
    with torch.no_grad():  # sharpen the distribution so rankings are not near-uniform
        model.head.weight.mul_(50)
    source = [3, 4, 5]
    oracle = exhaustive_ranking(model, source, V, L)
    got = beam_search(model, source, beam_width=V ** L, max_len=L)
    assert [s for s, _ in got] == [s for s, _ in oracle]
    np.testing.assert_allclose([p for _, p in got], [p for _, p in oracle], atol=1e-9)


def test_beam_width_one_is_greedy_argmax():
    model = tiny(vocab=10, seed=3, dtype=torch.float64)
    with torch.no_grad():
        model.head.weight.mul_(30)
    src = [4, 5, 6]
    seq = []
    for _ in range(5):
        logits = model(torch.tensor([src]), torch.tensor([[1] + seq]))[0, -1]
        logits[[0, 1]] = -math.inf
        tok = int(logits.argmax())
        seq.append(tok)
        if tok == EOS:
            break
    got, _ = greedy_decode(model, src, max_len=5)
    assert got == (seq[:-1] if seq[-1] == EOS else seq)


def test_beam_scores_sorted_and_batched_consistent():
    model = tiny(vocab=10, seed=4)
    sources = [[3, 4], [5, 6, 7], [8]]
    batched = beam_search(model, sources, beam_width=5, max_len=4)
    for s, res in zip(sources, batched):
        alone = beam_search(model, s, beam_width=5, max_len=4)
        assert [t for t, _ in res] == [t for t, _ in alone]
        np.testing.assert_allclose([p for _, p in res], [p for _, p in alone], atol=1e-5)
        scores = [p for _, p in res]
        assert scores == sorted(scores, reverse=True)


def test_constrained_beam_returns_catalog_items():
    rng = random.Random(5)
    catalog = {tuple(rng.randrange(3, 12) for _ in range(3)) for _ in range(40)}
    trie = PrefixTrie([list(c) + [EOS] for c in catalog])
    model = tiny(vocab=12, seed=5)
    for res in beam_search(model, [[3, 4, 5], [6, 7]], beam_width=20, trie=trie):
        assert len(res) == 20
        assert all(tuple(s) in catalog for s, _ in res)
        assert len({tuple(s) for s, _ in res}) == len(res)


def test_constrained_beam_with_full_width_covers_catalog():
    catalog = [[3, 4], [3, 5], [4, 4], [5]]
    trie = PrefixTrie([c + [EOS] for c in catalog])
    model = tiny(vocab=6, seed=6, dtype=torch.float64)
    got = beam_search(model, [3], beam_width=10, trie=trie, max_len=3)
    assert sorted(s for s, _ in got) == sorted(catalog)
    for s, p in got:
        assert p <= sequence_log_prob(model, [3], s + [EOS]) + 1e-9  # masking only removes mass


def test_beam_rejects_bad_width():
    with pytest.raises(ValueError):
        beam_search(tiny(), [3], beam_width=0)


# -- trie --------------------------------------------------------------------

def test_trie_membership_oracle():
    rng = random.Random(7)
    seqs = {tuple(rng.randrange(10) for _ in range(rng.randint(1, 5))) for _ in range(500)}
    trie = PrefixTrie(seqs)
    assert len(trie) == len(seqs)
    assert {tuple(s) for s in trie} == seqs
    prefixes = {s[:k] for s in seqs for k in range(len(s) + 1)}
    for p in list(prefixes)[:300]:
        expected = sorted({s[len(p)] for s in seqs if s[:len(p)] == p and len(s) > len(p)})
        assert trie.children(p) == expected
    for _ in range(200):
        q = tuple(rng.randrange(10) for _ in range(rng.randint(1, 5)))
        assert (q in trie) == (q in seqs)


def test_trie_duplicates_and_missing_prefix():
    trie = PrefixTrie([[1, 2], [1, 2], [1, 3]])
    assert len(trie) == 2
    assert trie.children([9]) == []
    assert [1] not in trie


# -- training behaviour ------------------------------------------------------

def small_schedule(**kw):
    base = dict(phase_b_steps=30, batch_size=4, warmup_steps=5, log_every=0)
    base.update(kw)
    return TrainSchedule(**base)


def test_training_is_deterministic():
    pairs = random_pairs(20, 12, random.Random(8))
    align = random_pairs(10, 12, random.Random(9))
    runs = []
    for _ in range(2):
        model = tiny(seed=2)
        curve = train_model(model, pairs, small_schedule(phase_a_steps=10), align)
        runs.append((curve, {k: v.clone() for k, v in model.state_dict().items()}))
    assert runs[0][0] == runs[1][0]
    for k in runs[0][1]:
        assert torch.equal(runs[0][1][k], runs[1][1][k])


def test_phase_a_zero_ignores_alignment_examples():
    pairs = random_pairs(20, 12, random.Random(10))
    align = random_pairs(10, 12, random.Random(11))
    a, b = tiny(seed=1), tiny(seed=1)
    ca = train_model(a, pairs, small_schedule(phase_a_steps=0), align)
    cb = train_model(b, pairs, small_schedule(phase_a_steps=0))
    assert ca == cb
    assert all(torch.equal(x, y) for x, y in zip(a.state_dict().values(), b.state_dict().values()))


def test_phase_labels_and_mix():
    pairs = random_pairs(10, 12, random.Random(12))
    align = random_pairs(10, 12, random.Random(13))
    curve = train_model(tiny(), pairs, small_schedule(phase_a_steps=5, phase_b_steps=7), align)
    assert [c[1] for c in curve] == ["A"] * 5 + ["B"] * 7
    assert [c[0] for c in curve] == list(range(12))
    mixed = train_model(tiny(), pairs, small_schedule(phase_a_steps=5, phase_b_steps=7, mix=True), align)
    assert [c[1] for c in mixed] == ["mix"] * 12


def test_training_does_not_touch_global_rng():
    torch.manual_seed(123)
    before = torch.rand(1)
    torch.manual_seed(123)
    train_model(tiny(), random_pairs(10, 12, random.Random(0)), small_schedule(phase_b_steps=3))
    assert torch.equal(torch.rand(1), before)


def test_phase_without_examples_raises():
    with pytest.raises(ValueError):
        train_model(tiny(), random_pairs(4, 12, random.Random(0)), small_schedule(phase_a_steps=3))


def test_divergence_detected():
    pairs = random_pairs(20, 12, random.Random(14))
    sched = small_schedule(phase_b_steps=300, learning_rate=1e4, grad_clip=0.0, warmup_steps=0)
    with pytest.raises(DivergenceError):
        train_model(tiny(width=16), pairs, sched)


def test_loss_decreases_on_learnable_task():
    rng = random.Random(15)
    pairs = [([a, b], [a, b, EOS]) for a, b in ((rng.randrange(3, 12), rng.randrange(3, 12)) for _ in range(64))]
    curve = train_model(tiny(width=32, heads=4), pairs,
                        small_schedule(phase_b_steps=300, batch_size=16, learning_rate=3e-3))
    losses = [c[2] for c in curve]
    assert np.mean(losses[-20:]) < 0.5 * np.mean(losses[:20])


def test_recommender_estimator_api():
    from sklearn.base import clone

    pairs = random_pairs(16, 12, random.Random(16))
    rec = GenerativeRecommender(vocab_size=12, encoder_layers=1, decoder_layers=1, heads=2, width=16, ff_width=32,
                                max_source_len=16, max_target_len=8, phase_b_steps=20, batch_size=8,
                                beam_width=3)
    assert clone(rec).get_params() == rec.get_params()
    rec.fit(pairs)
    out = rec.predict([s for s, _ in pairs[:2]])
    assert len(out) == 2 and all(len(r) == 3 for r in out)
    with pytest.raises(ValueError):
        GenerativeRecommender(vocab_size=12, max_source_len=2).fit(pairs)
