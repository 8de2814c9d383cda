"""Character vocabulary and the multi-head attention LSTM decoder."""
from __future__ import annotations

import string
from dataclasses import dataclass, field

import numpy as np

from .fusion import Attention
from .nn_core import (
    Embedding, LSTMLayer, Linear, Module, ModuleList, Tensor, concat, cross_entropy, no_grad, tanh,
)

PAD, SOS, EOS = "<pad>", "<sos>", "<eos>"


class VocabularyError(KeyError):
    pass


class Vocabulary:
    """Dense, stable symbol indices: specials first, then a-z, space, apostrophe."""

    def __init__(self, symbols=None):
        chars = list(symbols) if symbols is not None else list(string.ascii_lowercase) + [" ", "'"]
        self.symbols = [PAD, SOS, EOS] + chars
        self.index = {s: i for i, s in enumerate(self.symbols)}
        self.pad, self.sos, self.eos = 0, 1, 2

    def __len__(self):
        return len(self.symbols)

    def __contains__(self, ch):
        return ch in self.index and self.index[ch] > 2

    def encode(self, text: str) -> list[int]:
        try:
            return [self.index[ch] for ch in text]
        except KeyError as exc:
            raise VocabularyError(f"symbol {exc.args[0]!r} not in vocabulary") from None

    def decode(self, ids) -> str:
        out = []
        for i in ids:
            i = int(i)
            if i < 0 or i >= len(self.symbols):
                raise VocabularyError(f"index {i} outside vocabulary of size {len(self)}")
            if i == self.eos:
                break
            if i > 2:
                out.append(self.symbols[i])
        return "".join(out)

    def invalid_symbols(self, text: str) -> set[str]:
        return {ch for ch in text if ch not in self}

    def targets(self, texts) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Teacher-forcing arrays ``(inputs, outputs, weights)`` of shape ``(B, L+1)``.

        inputs are ``SOS + text``, outputs ``text + EOS``; weights are 0 on PAD.
        """
        enc = [self.encode(t) for t in texts]
        if any(len(e) == 0 for e in enc):
            raise ValueError("empty target transcription")
        L = max(len(e) for e in enc) + 1
        inp = np.full((len(enc), L), self.pad, dtype=np.int64)
        out = np.full((len(enc), L), self.pad, dtype=np.int64)
        for b, e in enumerate(enc):
            inp[b, 0] = self.sos
            inp[b, 1:len(e) + 1] = e
            out[b, :len(e)] = e
            out[b, len(e)] = self.eos
        return inp, out, (out != self.pad).astype(np.float64)


class MultiHeadAttention(Module):
    """``heads`` independent attentions over one memory; contexts concatenated then projected."""

    def __init__(self, d_query: int, d_value: int, d_att: int, heads: int, d_out: int,
                 rng: np.random.Generator, score: str = "additive"):
        self.heads = ModuleList([Attention(d_query, d_value, d_att, rng, score) for _ in range(heads)])
        self.project = Linear(heads * d_value, d_out, rng, bias=False)

    def keys(self, memory):
        return [h.keys(memory) for h in self.heads]

    def __call__(self, query, memory, mask, keys=None):
        keys = keys or self.keys(memory)
        ctxs, alphas = [], []
        for head, k in zip(self.heads, keys):
            c, a = head(query, memory, mask, keys=k)
            ctxs.append(c)
            alphas.append(a)
        return self.project(concat(ctxs, axis=-1)), alphas


@dataclass
class DecoderState:
    h: Tensor
    c: Tensor
    prev: np.ndarray  # (B,) previous symbol ids


@dataclass
class Hypothesis:
    ids: list = field(default_factory=list)
    logp: float = 0.0
    done: bool = False


class AttentionDecoder(Module):
    """Single-layer LSTM over previous characters; attention on the cell output.

    Each memory gets its own multi-head attention; the projected contexts are
    concatenated with the cell output, squashed, and mapped to logits.
    """

    def __init__(self, vocab_size: int, units: int, memory_dims, summary_dim: int, heads: int,
                 d_att: int, rng: np.random.Generator, embed_dim: int | None = None,
                 score: str = "additive"):
        self.vocab_size, self.units = vocab_size, units
        embed_dim = embed_dim or units
        self.embed = Embedding(vocab_size, embed_dim, rng)
        self.cell = LSTMLayer(embed_dim, units, rng)
        self.init = Linear(summary_dim, 2 * units, rng)
        self.attn = ModuleList([
            MultiHeadAttention(units, d, d_att, heads, units, rng, score) for d in memory_dims
        ])
        self.combine = Linear(units * (1 + len(memory_dims)), units, rng)
        self.output = Linear(units, vocab_size, rng)

    def initial_state(self, summary: Tensor):
        hc = self.init(summary)
        return hc[:, : self.units], hc[:, self.units:]

    def _logits(self, h, memories, masks, keys):
        ctxs, alphas = [], []
        for att, mem, m, k in zip(self.attn, memories, masks, keys):
            c, a = att(h, mem, m, keys=k)
            ctxs.append(c)
            alphas.append(a)
        o = tanh(self.combine(concat([h] + ctxs, axis=-1)))
        return self.output(o), alphas

    def teacher_forced_loss(self, memories, masks, summary, inputs, outputs, weights):
        """Mean cross-entropy over non-PAD positions with ground-truth inputs."""
        if np.asarray(weights).sum() <= 0:
            raise ValueError("empty target transcription")
        h0, c0 = self.initial_state(summary)
        emb = self.embed(inputs)
        hs, _, _ = self.cell(emb, mask=weights, h0=h0, c0=c0)
        keys = [att.keys(mem) for att, mem in zip(self.attn, memories)]
        logits, _ = self._logits(hs, memories, masks, keys)
        return cross_entropy(logits, outputs, weights)

    def decode_step(self, state: DecoderState, memories, masks, keys=None):
        """One greedy-time step: ``(logits (B, V), new_state, alphas)``."""
        prev = np.asarray(state.prev)
        if np.any(prev < 0) or np.any(prev >= self.vocab_size):
            raise VocabularyError(f"symbol index outside vocabulary of size {self.vocab_size}")
        if keys is None:
            keys = [att.keys(mem) for att, mem in zip(self.attn, memories)]
        h, c = self.cell.cell(self.embed(prev), state.h, state.c)
        logits, alphas = self._logits(h, memories, masks, keys)
        return logits, DecoderState(h, c, prev), alphas

    def greedy_decode(self, memories, masks, summary, vocab: Vocabulary, max_len=None) -> list[str]:
        B = summary.shape[0]
        if max_len is None:
            max_len = 2 * memories[0].shape[1] + 10
        with no_grad():
            keys = [att.keys(mem) for att, mem in zip(self.attn, memories)]
            h, c = self.initial_state(summary)
            state = DecoderState(h, c, np.full(B, vocab.sos))
            ids = np.full((B, max_len), vocab.pad, dtype=np.int64)
            done = np.zeros(B, dtype=bool)
            for t in range(max_len):
                logits, state, _ = self.decode_step(state, memories, masks, keys)
                nxt = np.argmax(logits.data, axis=-1)
                nxt[done] = vocab.pad
                ids[:, t] = nxt
                done |= nxt == vocab.eos
                state.prev = np.where(done, vocab.eos, nxt)
                if done.all():
                    break
        return [vocab.decode(row[row != vocab.pad]) for row in ids]

    def beam_decode(self, memories, masks, summary, vocab: Vocabulary, width: int = 4,
                    max_len=None) -> str:
        """Beam search for a single utterance (batch of one), no length penalty."""
        if max_len is None:
            max_len = 2 * memories[0].shape[1] + 10
        with no_grad():
            keys = [att.keys(mem) for att, mem in zip(self.attn, memories)]
            h, c = self.initial_state(summary)
            beams = [(Hypothesis(), h, c)]
            for _ in range(max_len):
                cand = []
                for hyp, h, c in beams:
                    if hyp.done:
                        cand.append((hyp, h, c))
                        continue
                    prev = np.array([hyp.ids[-1] if hyp.ids else vocab.sos])
                    logits, st, _ = self.decode_step(DecoderState(h, c, prev), memories, masks, keys)
                    z = logits.data[0] - logits.data[0].max()
                    logp = z - np.log(np.exp(z).sum())
                    for k in np.argsort(-logp)[:width]:
                        cand.append((Hypothesis(hyp.ids + [int(k)], hyp.logp + float(logp[k]),
                                                int(k) == vocab.eos), st.h, st.c))
                cand.sort(key=lambda b: -b[0].logp)
                beams = cand[:width]
                if all(b[0].done for b in beams):
                    break
        return vocab.decode(beams[0][0].ids)
