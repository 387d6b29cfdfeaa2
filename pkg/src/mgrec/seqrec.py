"""Encoder-decoder transformer over semantic-ID tokens.

The model is trained with teacher forcing on ``SequenceExample`` pairs and
decoded with (optionally trie-constrained) beam search. ``GenerativeRecommender``
wraps the pieces behind an estimator-style ``fit`` / ``predict`` interface.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted
from torch import nn

__all__ = [
    "ModelConfig",
    "TrainSchedule",
    "Seq2SeqTransformer",
    "PrefixTrie",
    "DivergenceError",
    "collate",
    "forward_loss",
    "train_model",
    "beam_search",
    "greedy_decode",
    "sequence_log_prob",
    "position_accuracy",
    "GenerativeRecommender",
]

log = logging.getLogger(__name__)


class DivergenceError(RuntimeError):
    pass


@dataclass
class ModelConfig:
    vocab_size: int = 0
    encoder_layers: int = 2
    decoder_layers: int = 2
    heads: int = 4
    width: int = 128
    ff_width: int = 256
    dropout: float = 0.1
    max_source_len: int = 256
    max_target_len: int = 32
    seed: int = 0

    def validate(self):
        if self.vocab_size < 2:
            raise ValueError("vocab_size must be set (>= 2)")
        if self.width % self.heads:
            raise ValueError(f"width {self.width} not divisible by heads {self.heads}")


@dataclass
class TrainSchedule:
    phase_a_steps: int = 0
    phase_b_steps: int = 3000
    batch_size: int = 64
    learning_rate: float = 1e-3
    weight_decay: float = 0.01
    betas: tuple[float, float] = (0.9, 0.98)
    warmup_steps: int = 100
    grad_clip: float = 1.0
    mix: bool = False
    log_every: int = 100
    seed: int = 0

    def validate(self):
        if self.phase_a_steps < 0 or self.phase_b_steps < 0:
            raise ValueError("step counts must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


class MultiHeadAttention(nn.Module):
    def __init__(self, width, heads, dropout):
        super().__init__()
        self.heads = heads
        self.q = nn.Linear(width, width)
        self.kv = nn.Linear(width, 2 * width)
        self.out = nn.Linear(width, width)
        self.drop = nn.Dropout(dropout)

    def forward(self, x, ctx, mask):
        # mask: broadcastable to (B, H, Tq, Tk), True where attention is allowed
        B, Tq, D = x.shape
        h = self.heads
        q = self.q(x).view(B, Tq, h, D // h).transpose(1, 2)
        k, v = self.kv(ctx).view(B, ctx.shape[1], 2, h, D // h).permute(2, 0, 3, 1, 4)
        att = (q @ k.transpose(-1, -2)) / math.sqrt(D // h)
        att = att.masked_fill(~mask, float("-inf"))
        att = self.drop(torch.softmax(att, dim=-1))
        return self.out((att @ v).transpose(1, 2).reshape(B, Tq, D))


class FeedForward(nn.Sequential):
    def __init__(self, width, ff_width, dropout):
        super().__init__(nn.Linear(width, ff_width), nn.GELU(), nn.Dropout(dropout), nn.Linear(ff_width, width))


class EncoderLayer(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.ln1, self.ln2 = nn.LayerNorm(cfg.width), nn.LayerNorm(cfg.width)
        self.attn = MultiHeadAttention(cfg.width, cfg.heads, cfg.dropout)
        self.ff = FeedForward(cfg.width, cfg.ff_width, cfg.dropout)
        self.drop = nn.Dropout(cfg.dropout)

    def forward(self, x, mask):
        h = self.ln1(x)
        x = x + self.drop(self.attn(h, h, mask))
        return x + self.drop(self.ff(self.ln2(x)))


class DecoderLayer(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.ln1, self.ln2, self.ln3 = (nn.LayerNorm(cfg.width) for _ in range(3))
        self.self_attn = MultiHeadAttention(cfg.width, cfg.heads, cfg.dropout)
        self.cross_attn = MultiHeadAttention(cfg.width, cfg.heads, cfg.dropout)
        self.ff = FeedForward(cfg.width, cfg.ff_width, cfg.dropout)
        self.drop = nn.Dropout(cfg.dropout)

    def forward(self, y, memory, self_mask, cross_mask):
        h = self.ln1(y)
        y = y + self.drop(self.self_attn(h, h, self_mask))
        y = y + self.drop(self.cross_attn(self.ln2(y), memory, cross_mask))
        return y + self.drop(self.ff(self.ln3(y)))


class Seq2SeqTransformer(nn.Module):
    """Pre-norm encoder-decoder with learned positions. Token 0 is padding."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.embed = nn.Embedding(cfg.vocab_size, cfg.width, padding_idx=0)
        self.src_pos = nn.Embedding(cfg.max_source_len, cfg.width)
        self.tgt_pos = nn.Embedding(cfg.max_target_len + 1, cfg.width)
        self.encoder = nn.ModuleList(EncoderLayer(cfg) for _ in range(cfg.encoder_layers))
        self.decoder = nn.ModuleList(DecoderLayer(cfg) for _ in range(cfg.decoder_layers))
        self.enc_ln, self.dec_ln = nn.LayerNorm(cfg.width), nn.LayerNorm(cfg.width)
        self.drop = nn.Dropout(cfg.dropout)
        self.head = nn.Linear(cfg.width, cfg.vocab_size)
        for name, p in self.named_parameters():
            if p.dim() == 2 and "ln" not in name:
                nn.init.normal_(p, std=0.02)
            elif name.endswith("bias"):
                nn.init.zeros_(p)

    @classmethod
    def build(cls, cfg: ModelConfig, dtype=torch.float32) -> "Seq2SeqTransformer":
        """Seeded construction that leaves the global RNG untouched."""
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(cfg.seed)
            return cls(cfg).to(dtype)

    def encode(self, src: torch.Tensor):
        if src.shape[1] > self.cfg.max_source_len:
            raise ValueError(f"source length {src.shape[1]} exceeds max_source_len {self.cfg.max_source_len}")
        keep = src != 0
        mask = keep[:, None, None, :]
        x = self.drop(self.embed(src) + self.src_pos(torch.arange(src.shape[1])))
        for layer in self.encoder:
            x = layer(x, mask)
        return self.enc_ln(x), mask

    def decode(self, tgt_in: torch.Tensor, memory, cross_mask):
        T = tgt_in.shape[1]
        if T > self.cfg.max_target_len + 1:
            raise ValueError(f"target length {T} exceeds max_target_len {self.cfg.max_target_len}")
        causal = torch.ones(T, T, dtype=torch.bool).tril()[None, None]
        y = self.drop(self.embed(tgt_in) + self.tgt_pos(torch.arange(T)))
        for layer in self.decoder:
            y = layer(y, memory, causal, cross_mask)
        return self.head(self.dec_ln(y))

    def forward(self, src, tgt_in):
        memory, mask = self.encode(src)
        return self.decode(tgt_in, memory, mask)


def collate(pairs: Sequence[tuple[Sequence[int], Sequence[int]]], bos: int = 1):
    """Pad ``(source, target)`` pairs; returns ``(src, tgt_in, tgt_out)`` tensors."""
    S = max(len(s) for s, _ in pairs)
    T = max(len(t) for _, t in pairs)
    src = torch.zeros(len(pairs), S, dtype=torch.long)
    tgt_in = torch.zeros(len(pairs), T, dtype=torch.long)
    tgt_out = torch.zeros(len(pairs), T, dtype=torch.long)
    for i, (s, t) in enumerate(pairs):
        src[i, : len(s)] = torch.as_tensor(s)
        tgt_in[i, 0] = bos
        tgt_in[i, 1 : len(t)] = torch.as_tensor(t[:-1])
        tgt_out[i, : len(t)] = torch.as_tensor(t)
    return src, tgt_in, tgt_out


def forward_loss(model: Seq2SeqTransformer, batch) -> torch.Tensor:
    """Mean cross-entropy over non-padding target positions."""
    src, tgt_in, tgt_out = batch
    logits = model(src, tgt_in)
    return F.cross_entropy(logits.reshape(-1, logits.shape[-1]), tgt_out.reshape(-1), ignore_index=0)


def _pairs(examples):
    return [(e.source, e.target) if hasattr(e, "source") else tuple(e) for e in examples]


def _batch_stream(n: int, batch_size: int, rng: np.random.Generator):
    while True:
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            yield order[start:start + batch_size]


def train_model(model: Seq2SeqTransformer, rec_examples, schedule: TrainSchedule,
                align_examples=None, bos: int = 1) -> list[tuple[int, str, float]]:
    """Two-phase teacher-forced training.

    Phase A uses only the alignment examples, phase B only the
    recommendation examples, with a fresh optimizer at the phase boundary.
    With ``schedule.mix`` the two sets are pooled into a single phase of
    ``phase_a_steps + phase_b_steps`` steps instead. Returns the loss curve
    as ``(step, phase, loss)`` rows.
    """
    schedule.validate()
    rec = _pairs(rec_examples)
    align = _pairs(align_examples or [])
    if schedule.mix:
        phases = [("mix", rec + align, schedule.phase_a_steps + schedule.phase_b_steps)]
    else:
        phases = [("A", align, schedule.phase_a_steps), ("B", rec, schedule.phase_b_steps)]
    curve: list[tuple[int, str, float]] = []
    step = 0
    with torch.random.fork_rng(devices=[]):
        for phase_idx, (phase, data, n_steps) in enumerate(phases):
            if n_steps == 0:
                continue
            if not data:
                raise ValueError(f"phase {phase} has {n_steps} steps but no examples")
            torch.manual_seed(schedule.seed * 1000 + phase_idx)
            rng = np.random.default_rng([schedule.seed, phase_idx])
            opt = torch.optim.AdamW(model.parameters(), lr=schedule.learning_rate,
                                    betas=tuple(schedule.betas), weight_decay=schedule.weight_decay)
            warm = max(schedule.warmup_steps, 0)
            sched = torch.optim.lr_scheduler.LambdaLR(opt, lambda s: min(1.0, (s + 1) / warm) if warm else 1.0)
            model.train()
            stream = _batch_stream(len(data), schedule.batch_size, rng)
            first_loss, bad = None, 0
            for _ in range(n_steps):
                idx = next(stream)
                loss = forward_loss(model, collate([data[i] for i in idx], bos))
                value = loss.item()
                if not math.isfinite(value):
                    raise DivergenceError(f"non-finite loss at step {step} (phase {phase})")
                first_loss = value if first_loss is None else first_loss
                bad = bad + 1 if value > 10 * first_loss else 0
                if bad >= 100:
                    raise DivergenceError(
                        f"loss above 10x its initial value ({first_loss:.3f}) for 100 steps "
                        f"at step {step} (phase {phase}); lower the learning rate"
                    )
                opt.zero_grad()
                loss.backward()
                if schedule.grad_clip:
                    nn.utils.clip_grad_norm_(model.parameters(), schedule.grad_clip)
                opt.step()
                sched.step()
                curve.append((step, phase, value))
                if schedule.log_every and (step + 1) % schedule.log_every == 0:
                    recent = np.mean([c[2] for c in curve[-schedule.log_every:]])
                    log.info("step %d phase %s loss %.4f", step + 1, phase, recent)
                step += 1
    model.eval()
    return curve


class PrefixTrie:
    """Set of valid token sequences supporting prefix-successor queries."""

    _END = -1

    def __init__(self, sequences: Sequence[Sequence[int]] = ()):
        self.root: dict = {}
        self.size = 0
        for seq in sequences:
            self.insert(seq)

    def insert(self, seq: Sequence[int]) -> None:
        node = self.root
        for tok in seq:
            node = node.setdefault(int(tok), {})
        if self._END not in node:
            node[self._END] = True
            self.size += 1

    def node(self, prefix: Sequence[int]):
        node = self.root
        for tok in prefix:
            node = node.get(int(tok))
            if node is None:
                return None
        return node

    def children(self, prefix: Sequence[int]) -> list[int]:
        node = self.node(prefix)
        return [] if node is None else sorted(k for k in node if k != self._END)

    def __contains__(self, seq) -> bool:
        node = self.node(seq)
        return node is not None and self._END in node

    def __len__(self) -> int:
        return self.size

    def __iter__(self):
        stack = [((), self.root)]
        while stack:
            prefix, node = stack.pop()
            if self._END in node:
                yield list(prefix)
            for tok in sorted((k for k in node if k != self._END), reverse=True):
                stack.append((prefix + (tok,), node[tok]))


@torch.no_grad()
def beam_search(model: Seq2SeqTransformer, sources, beam_width: int = 20, trie: PrefixTrie | None = None,
                max_len: int | None = None, eos: int = 2, bos: int = 1, chunk: int = 32,
                banned: Sequence[int] = (0, 1)):
    """Length-synchronous beam search.

    ``sources`` is one token list or a list of them. Returns, per source, up
    to ``beam_width`` ``(tokens, log_prob)`` pairs sorted by descending
    log-probability, ties broken by ascending token sequence. ``tokens``
    excludes the terminating EOS (whose probability is included in the
    score). With a ``trie`` holding complete target sequences (EOS
    included) every step is restricted to trie successors of the prefix.
    """
    if beam_width < 1:
        raise ValueError("beam_width must be >= 1")
    single = len(sources) > 0 and not isinstance(sources[0], (list, tuple, np.ndarray, torch.Tensor))
    if single:
        sources = [sources]
    max_len = max_len or model.cfg.max_target_len
    model.eval()
    results = []
    for start in range(0, len(sources), chunk):
        results += _beam_chunk(model, sources[start:start + chunk], beam_width, trie, max_len, eos, bos, banned)
    return results[0] if single else results


def _beam_chunk(model, sources, W, trie, max_len, eos, bos, banned):
    B = len(sources)
    V = model.cfg.vocab_size
    src = collate([(s, [eos]) for s in sources])[0]
    memory, mask = model.encode(src)
    # beams[b]: list of (tokens tuple, score, finished)
    beams = [[((), 0.0, False)] for _ in range(B)]
    for _ in range(max_len):
        rows, owners = [], []
        for b in range(B):
            for k, (toks, _, done) in enumerate(beams[b]):
                if not done:
                    rows.append(toks)
                    owners.append((b, k))
        if not rows:
            break
        tgt_in = torch.full((len(rows), len(rows[0]) + 1), bos, dtype=torch.long)
        if rows[0]:
            tgt_in[:, 1:] = torch.tensor(rows)
        owner_b = torch.tensor([b for b, _ in owners])
        logits = model.decode(tgt_in, memory[owner_b], mask[owner_b])[:, -1].double()
        logp = torch.log_softmax(logits, dim=-1)
        if banned:
            logp[:, list(banned)] = float("-inf")
        if trie is not None:
            allowed = torch.zeros_like(logp, dtype=torch.bool)
            for r, toks in enumerate(rows):
                nxt = trie.children(toks)
                if not nxt:
                    raise RuntimeError(f"prefix {list(toks)} has no valid continuation in the trie")
                allowed[r, nxt] = True
            logp = logp.masked_fill(~allowed, float("-inf"))
        new_beams = [[(t, s, True) for t, s, d in beams[b] if d] for b in range(B)]
        cand_scores = [[] for _ in range(B)]
        for r, (b, k) in enumerate(owners):
            base = beams[b][k][1]
            cand_scores[b].append((r, base + logp[r]))
        for b in range(B):
            if not cand_scores[b]:
                continue
            rs = [r for r, _ in cand_scores[b]]
            scores = torch.stack([s for _, s in cand_scores[b]])  # (n_live, V)
            flat = scores.reshape(-1)
            keep = min(W, int(torch.isfinite(flat).sum()))
            if keep == 0:
                continue
            top = torch.topk(flat, keep)
            cutoff = top.values[-1]
            picks = torch.nonzero(flat >= cutoff).flatten().tolist()  # includes every boundary tie
            for p in picks:
                r = rs[p // V]
                tok = p % V
                toks = rows[r] + (tok,)
                new_beams[b].append((toks, float(flat[p]), tok == eos))
        for b in range(B):
            ranked = sorted(new_beams[b], key=lambda c: (-c[1], c[0]))
            beams[b] = ranked[:W]
    out = []
    for b in range(B):
        ranked = sorted(beams[b], key=lambda c: (-c[1], c[0]))
        out.append([(list(t[:-1]) if d and t and t[-1] == eos else list(t), s) for t, s, d in ranked])
    return out


def greedy_decode(model, source, max_len=None, eos=2, bos=1):
    """Best single ``(tokens, log_prob)`` under width-1 search."""
    return beam_search(model, source, 1, None, max_len, eos, bos)[0]


@torch.no_grad()
def sequence_log_prob(model: Seq2SeqTransformer, source, target, bos: int = 1) -> float:
    """Exact teacher-forced log-probability of ``target`` given ``source``."""
    model.eval()
    src, tgt_in, tgt_out = collate([(source, target)], bos)
    logp = torch.log_softmax(model(src, tgt_in).double(), dim=-1)[0]
    return float(logp[torch.arange(len(target)), tgt_out[0, : len(target)]].sum())


@torch.no_grad()
def position_accuracy(model: Seq2SeqTransformer, examples, bos: int = 1, batch_size: int = 256) -> np.ndarray:
    """Teacher-forced argmax accuracy at each target position."""
    model.eval()
    pairs = _pairs(examples)
    hits = np.zeros(max(len(t) for _, t in pairs))
    counts = np.zeros_like(hits)
    for start in range(0, len(pairs), batch_size):
        src, tgt_in, tgt_out = collate(pairs[start:start + batch_size], bos)
        pred = model(src, tgt_in).argmax(-1)
        valid = (tgt_out != 0).numpy()
        correct = ((pred == tgt_out).numpy() & valid)
        T = valid.shape[1]
        hits[:T] += correct.sum(0)
        counts[:T] += valid.sum(0)
    return hits / np.maximum(counts, 1)


class GenerativeRecommender(BaseEstimator):
    """Estimator wrapper: ``fit`` trains on token examples, ``predict`` beam-decodes.

    ``fit(X, align_examples=None)`` takes recommendation ``SequenceExample``
    objects (or ``(source, target)`` pairs); ``predict(sources)`` returns
    ranked ``(tokens, log_prob)`` lists. Pass ``trie=`` to constrain output.
    """

    def __init__(self, vocab_size=0, encoder_layers=2, decoder_layers=2, heads=4, width=128, ff_width=256,
                 dropout=0.1, max_source_len=256, max_target_len=32, phase_a_steps=0, phase_b_steps=3000,
                 batch_size=64, learning_rate=1e-3, weight_decay=0.01, warmup_steps=100, mix=False,
                 beam_width=20, random_state=0):
        self.vocab_size = vocab_size
        self.encoder_layers = encoder_layers
        self.decoder_layers = decoder_layers
        self.heads = heads
        self.width = width
        self.ff_width = ff_width
        self.dropout = dropout
        self.max_source_len = max_source_len
        self.max_target_len = max_target_len
        self.phase_a_steps = phase_a_steps
        self.phase_b_steps = phase_b_steps
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.weight_decay = weight_decay
        self.warmup_steps = warmup_steps
        self.mix = mix
        self.beam_width = beam_width
        self.random_state = random_state

    def model_config(self) -> ModelConfig:
        return ModelConfig(self.vocab_size, self.encoder_layers, self.decoder_layers, self.heads, self.width,
                           self.ff_width, self.dropout, self.max_source_len, self.max_target_len,
                           self.random_state)

    def schedule(self) -> TrainSchedule:
        return TrainSchedule(self.phase_a_steps, self.phase_b_steps, self.batch_size, self.learning_rate,
                             self.weight_decay, warmup_steps=self.warmup_steps, mix=self.mix,
                             seed=self.random_state)

    def fit(self, X, y=None, align_examples=None):
        pairs = _pairs(X)
        if not pairs:
            raise ValueError("no training examples")
        longest_src = max(len(s) for s, _ in pairs + _pairs(align_examples or []))
        longest_tgt = max(len(t) for _, t in pairs + _pairs(align_examples or []))
        if longest_src > self.max_source_len or longest_tgt > self.max_target_len:
            raise ValueError(
                f"examples need max_source_len >= {longest_src} and max_target_len >= {longest_tgt}"
            )
        self.model_ = Seq2SeqTransformer.build(self.model_config())
        self.loss_curve_ = train_model(self.model_, pairs, self.schedule(), align_examples)
        return self

    def predict(self, sources, trie: PrefixTrie | None = None, beam_width: int | None = None):
        check_is_fitted(self, "model_")
        return beam_search(self.model_, list(sources), beam_width or self.beam_width, trie)

    def config_dict(self) -> dict:
        return asdict(self.model_config())
