"""Attention primitives and the two audio-visual fusion strategies.

AV Align: the audio encoder's top LSTM layer queries the video memory at
every audio step and consumes the attended video context, so its outputs are
fused audio-visual encodings of the audio length. AV Cat: the decoder keeps
two independent attentions, one per modality, and concatenates the contexts.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .encoders import EncoderOutput
from .nn_core import LSTMLayer, Linear, Module, Parameter, Tensor, concat, matmul, softmax, stack, tanh
from .nn_core.layers import glorot_uniform
from .nn_core.tensor import DimensionError, NumericError, mul

SCORES = ("additive", "dot")
FUSION_MIX = ("cell_input", "post_mix")


class AttentionDataError(ValueError):
    pass


class Attention(Module):
    """Scores ``values`` against ``queries`` and returns the weighted sum.

    additive: ``w . tanh(W_q q + W_v v + b)``; dot: ``(W_q q) . (W_v v)``.
    """

    def __init__(self, d_query: int, d_value: int, d_att: int, rng: np.random.Generator,
                 score: str = "additive"):
        if score not in SCORES:
            raise ValueError(f"unknown score {score!r}; choose from {SCORES}")
        self.score_kind = score
        self.d_query, self.d_value, self.d_att = d_query, d_value, d_att
        self.Wq = Parameter(glorot_uniform(rng, (d_query, d_att), d_query, d_att))
        self.Wv = Parameter(glorot_uniform(rng, (d_value, d_att), d_value, d_att))
        if score == "additive":
            self.b = Parameter(np.zeros(d_att))
            self.w = Parameter(glorot_uniform(rng, (d_att,), d_att, 1))

    def keys(self, values: Tensor) -> Tensor:
        """Value projection; compute once per memory and reuse across queries."""
        if values.shape[-1] != self.d_value:
            raise DimensionError(f"values have dim {values.shape[-1]}, attention expects {self.d_value}")
        k = matmul(values, self.Wv)
        return k + self.b if self.score_kind == "additive" else k

    def scores(self, query: Tensor, keys: Tensor) -> Tensor:
        """Scores of shape ``(B, T)`` for ``(B, d_q)`` queries, ``(B, L, T)`` for ``(B, L, d_q)``."""
        q = matmul(query, self.Wq)
        if self.score_kind == "dot":
            if q.ndim == 2:
                return matmul(keys, q.reshape(q.shape[0], q.shape[1], 1)).reshape(keys.shape[0], keys.shape[1])
            return matmul(q, keys.transpose(0, 2, 1))
        if q.ndim == 2:
            e = tanh(q.reshape(q.shape[0], 1, q.shape[1]) + keys)
        else:
            B, L, A = q.shape
            e = tanh(q.reshape(B, L, 1, A) + keys.reshape(B, 1, keys.shape[1], A))
        return matmul(e, self.w)

    def __call__(self, query: Tensor, values: Tensor, mask=None, keys: Tensor | None = None):
        """Return ``(context, alpha)``; ``mask`` is ``(B, T)`` with 1 for valid steps."""
        if keys is None:
            keys = self.keys(values)
        e = self.scores(query, keys)
        return attend_scores(e, values, mask)


def attend_scores(e: Tensor, values: Tensor, mask=None):
    """Masked softmax over the value axis, then the convex combination of values."""
    if mask is not None:
        mask = np.asarray(mask)
        if e.ndim == 3:
            mask = np.broadcast_to(mask[:, None, :], e.shape)
        if not np.all(mask.any(axis=-1)):
            raise AttentionDataError("attention query has no valid (unmasked) value")
    alpha = softmax(e, axis=-1, mask=mask)
    if e.ndim == 2:
        B, T = e.shape
        ctx = matmul(alpha.reshape(B, 1, T), values).reshape(B, values.shape[-1])
    else:
        ctx = matmul(alpha, values)
    return ctx, alpha


def score(value_j, query_i, attention: Attention) -> float:
    """Unnormalised score of a single ``(value, query)`` pair."""
    v = Tensor(np.asarray(value_j, dtype=np.float64).reshape(1, 1, -1))
    q = Tensor(np.asarray(query_i, dtype=np.float64).reshape(1, -1))
    return float(attention.scores(q, attention.keys(v)).data.reshape(()))


def attend(query, memory, mask, attention: Attention):
    """Context vector and weight row for one batch of queries ``(B, d_q)``."""
    return attention(query, memory, mask)


@dataclass
class FusedEncoderOutput(EncoderOutput):
    alignments: np.ndarray | None = None  # (B, T_a, T_v)


class AVAlignLayer(Module):
    """Top audio-encoder layer that attends over the video memory.

    ``cell_input``: the query at audio step i is the fused layer's previous
    output h_{i-1}; the context c_i joins the lower-layer output as cell input.
    ``post_mix``: a plain LSTM runs over the lower outputs and each output
    h_i queries the video memory; ``tanh(W [h_i; c_i])`` is the fused output.
    """

    def __init__(self, d_audio: int, d_video: int, units: int, d_att: int, rng: np.random.Generator,
                 score: str = "additive", mix: str = "cell_input"):
        if mix not in FUSION_MIX:
            raise ValueError(f"unknown fusion_mix {mix!r}; choose from {FUSION_MIX}")
        self.mix, self.units = mix, units
        self.attention = Attention(units, d_video, d_att, rng, score)
        if mix == "cell_input":
            self.cell = LSTMLayer(d_audio + d_video, units, rng)
        else:
            self.cell = LSTMLayer(d_audio, units, rng)
            self.mixer = Linear(units + d_video, units, rng)

    def __call__(self, audio_lower: Tensor, audio_lengths, video_memory: Tensor, video_lengths,
                 lower_summary=()) -> FusedEncoderOutput:
        B, Ta, _ = audio_lower.shape
        if video_memory.ndim != 3 or video_memory.shape[1] < 1:
            raise AttentionDataError("AV Align needs a non-empty video memory")
        Tv = video_memory.shape[1]
        a_mask = (np.arange(Ta)[None] < np.asarray(audio_lengths)[:, None]).astype(audio_lower.data.dtype)
        v_mask = np.arange(Tv)[None] < np.asarray(video_lengths)[:, None]
        if not np.all(v_mask.any(axis=1)):
            raise AttentionDataError("empty video stream in batch; AV Align requires both modalities")
        keys = self.attention.keys(video_memory)
        if self.mix == "post_mix":
            h_seq, hT, cT = self.cell(audio_lower, mask=a_mask)
            ctx, alpha = self.attention(h_seq, video_memory, v_mask, keys=keys)
            fused = tanh(self.mixer(concat([h_seq, ctx], axis=-1)))
            memory = mul(fused, Tensor(a_mask[..., None]))
            return FusedEncoderOutput(memory, list(lower_summary) + [(hT, cT)], np.asarray(audio_lengths),
                                      alpha.data.copy())
        dt = audio_lower.data.dtype
        h = Tensor(np.zeros((B, self.units), dt))
        c = Tensor(np.zeros((B, self.units), dt))
        outs, alphas = [], []
        for i in range(Ta):
            ctx, alpha = self.attention(h, video_memory, v_mask, keys=keys)
            x_i = concat([audio_lower[:, i], ctx], axis=-1)
            h, c = self.cell.cell(x_i, h, c, mask=a_mask[:, i])
            outs.append(h)
            alphas.append(alpha.data)
        memory = mul(stack(outs, axis=1), Tensor(a_mask[..., None]))
        return FusedEncoderOutput(memory, list(lower_summary) + [(h, c)], np.asarray(audio_lengths),
                                  np.stack(alphas, axis=1))


def fuse_encode(layer: AVAlignLayer, audio_lower: EncoderOutput, video: EncoderOutput) -> FusedEncoderOutput:
    """Run the fusion layer on top of the lower audio layers and the video memory."""
    if video.memory.shape[1] < 1:
        raise AttentionDataError("empty video memory")
    return layer(audio_lower.memory, audio_lower.lengths, video.memory, video.lengths,
                 lower_summary=audio_lower.summary)


def avcat_contexts(queries: Tensor, audio_memory: Tensor, video_memory: Tensor,
                   audio_attention: Attention, video_attention: Attention,
                   audio_mask=None, video_mask=None):
    """Two independent attentions (audio, video) with contexts concatenated.

    Returns ``(context, (alpha_audio, alpha_video))``.
    """
    ca, aa = audio_attention(queries, audio_memory, audio_mask)
    cv, av = video_attention(queries, video_memory, video_mask)
    return concat([ca, cv], axis=-1), (aa, av)


def check_alignment(alpha: np.ndarray, atol: float = 1e-6) -> None:
    if np.any(alpha < 0) or not np.allclose(alpha.sum(axis=-1), 1.0, atol=atol):
        raise NumericError("attention weights are not row-stochastic")
