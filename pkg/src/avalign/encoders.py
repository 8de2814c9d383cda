"""Stacked LSTM sequence encoders producing a memory and a summary."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nn_core import Dropout, LSTMLayer, Module, ModuleList, Tensor, concat
from .nn_core.tensor import DimensionError


class SequenceDataError(ValueError):
    pass


@dataclass
class PaddedBatch:
    """Right-padded ``(B, T, D)`` features with per-item true lengths."""

    data: object  # np.ndarray or Tensor
    lengths: np.ndarray

    def __post_init__(self):
        self.lengths = np.asarray(self.lengths, dtype=np.int64)
        if np.any(self.lengths < 1):
            bad = np.flatnonzero(self.lengths < 1).tolist()
            raise SequenceDataError(f"zero-length sequence(s) at batch index {bad}")
        if self.lengths.max() > self.data.shape[1]:
            raise SequenceDataError("a length exceeds the padded time axis")

    @property
    def mask(self) -> np.ndarray:
        return mask_from_lengths(self.lengths, self.data.shape[1])

    @classmethod
    def from_sequences(cls, seqs) -> "PaddedBatch":
        seqs = [np.asarray(s) for s in seqs]
        lengths = np.array([s.shape[0] for s in seqs])
        if np.any(lengths < 1):
            raise SequenceDataError("cannot batch an empty sequence")
        out = np.zeros((len(seqs), lengths.max()) + seqs[0].shape[1:], dtype=seqs[0].dtype)
        for i, s in enumerate(seqs):
            out[i, : s.shape[0]] = s
        return cls(out, lengths)


def mask_from_lengths(lengths, T: int) -> np.ndarray:
    return (np.arange(T)[None, :] < np.asarray(lengths)[:, None]).astype(np.float64)


@dataclass
class EncoderOutput:
    memory: Tensor  # (B, T, H), zero past each length
    summary: list  # [(h, c)] per layer, each (B, H)
    lengths: np.ndarray

    @property
    def mask(self) -> np.ndarray:
        return mask_from_lengths(self.lengths, self.memory.shape[1])

    def summary_vector(self) -> Tensor:
        """All layers' final states concatenated: ``[h1, c1, h2, c2, ...]``."""
        return concat([t for hc in self.summary for t in hc], axis=-1)


class StackedEncoder(Module):
    """``n_layers`` unidirectional LSTM layers; zero initial states.

    ``dropout`` acts between layers only and defaults to off.
    """

    def __init__(self, d_in: int, units: int, n_layers: int, rng: np.random.Generator, dropout: float = 0.0):
        self.d_in, self.units = d_in, units
        dims = [d_in] + [units] * n_layers
        self.layers = ModuleList([LSTMLayer(dims[k], units, rng) for k in range(n_layers)])
        self.drops = ModuleList([Dropout(dropout) for _ in range(n_layers - 1)])

    def __call__(self, batch: PaddedBatch, n_layers: int | None = None) -> EncoderOutput:
        x = batch.data if isinstance(batch.data, Tensor) else Tensor(batch.data)
        if x.shape[-1] != self.d_in:
            raise DimensionError(f"encoder expects feature dim {self.d_in}, got {x.shape[-1]}")
        mask = batch.mask
        summary = []
        for k, layer in enumerate(list(self.layers)[: n_layers or len(self.layers)]):
            if k:
                x = self.drops[k - 1](x)
            x, h, c = layer(x, mask=mask)
            summary.append((h, c))
        return EncoderOutput(x, summary, batch.lengths)


def encode(encoder: StackedEncoder, features: PaddedBatch) -> EncoderOutput:
    return encoder(features)
