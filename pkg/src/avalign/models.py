"""The three recognisers: audio-only (A), AV Align and AV Cat."""
from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import numpy as np

from .acoustic import FEATURE_DIM
from .corpus import Batch
from .decoder import AttentionDecoder, Vocabulary
from .encoders import EncoderOutput, PaddedBatch, StackedEncoder
from .fusion import AVAlignLayer
from .nn_core import LayerNorm, Module, Tensor, concat, no_grad
from .nn_core.tensor import take_rows
from .visual import CHANNELS, FRAME_SIZE, VisualFrontend

MODEL_KINDS = ("A", "AV_ALIGN", "AV_CAT")
DISPLAY = {"A": "A", "AV_ALIGN": "AV Align", "AV_CAT": "AV Cat"}


@dataclass
class ArchConfig:
    enc_layers: int = 3
    enc_units: int = 256
    dec_units: int = 256
    heads: int = 4
    mel_bins: int = 30
    visual_dim: int = 128
    att_dim: int = 256
    embed_dim: int = 64
    score: str = "additive"
    fusion_mix: str = "cell_input"
    visual_norm: str = "layer"  # or "batch"
    enc_dropout: float = 0.0
    video_embed_norm: bool = True  # layer norm on CNN embeddings before the video encoder

    def as_dict(self):
        return asdict(self)

    @classmethod
    def field_names(cls):
        return [f.name for f in fields(cls)]


class SpeechRecognizer(Module):
    def __init__(self, kind: str, arch: ArchConfig, vocab: Vocabulary, seed: int = 0):
        if kind not in MODEL_KINDS:
            raise ValueError(f"unknown model {kind!r}; choose from {MODEL_KINDS}")
        if arch.mel_bins * 3 != FEATURE_DIM:
            raise ValueError(f"mel_bins={arch.mel_bins} does not match the {FEATURE_DIM}-d acoustic front-end")
        if arch.enc_layers < 2 and kind == "AV_ALIGN":
            raise ValueError("AV Align needs at least 2 audio encoder layers")
        self.kind, self.arch, self.vocab = kind, arch, vocab
        rng = np.random.default_rng(seed)
        H = arch.enc_units
        n_audio = arch.enc_layers - 1 if kind == "AV_ALIGN" else arch.enc_layers
        self.audio_encoder = StackedEncoder(FEATURE_DIM, H, n_audio, rng, arch.enc_dropout)
        summary_dim = 2 * H * arch.enc_layers
        memory_dims = [H]
        if kind != "A":
            self.visual = VisualFrontend(rng, arch.visual_dim, arch.visual_norm)
            self.video_encoder = StackedEncoder(arch.visual_dim, H, arch.enc_layers, rng, arch.enc_dropout)
            if arch.video_embed_norm:
                self.embed_norm = LayerNorm(arch.visual_dim, axes=(-1,))
        if kind == "AV_ALIGN":
            self.fusion = AVAlignLayer(H, H, H, arch.att_dim, rng, arch.score, arch.fusion_mix)
        if kind == "AV_CAT":
            summary_dim *= 2
            memory_dims = [H, H]
        self.decoder = AttentionDecoder(len(vocab), arch.dec_units, memory_dims, summary_dim, arch.heads,
                                        arch.att_dim, rng, embed_dim=arch.embed_dim, score=arch.score)
        self.assign_names()

    # -- encoders ----------------------------------------------------------
    def encode_video(self, batch: Batch) -> EncoderOutput:
        B, Tv = batch.frames.shape[:2]
        valid = np.arange(Tv)[None] < batch.video_lengths[:, None]
        flat = batch.frames[valid]
        uniq, inverse = np.unique(flat.reshape(flat.shape[0], -1), axis=0, return_inverse=True)
        emb = self.visual._embed(uniq.reshape(-1, FRAME_SIZE, FRAME_SIZE, CHANNELS))
        if self.arch.video_embed_norm:
            emb = self.embed_norm(emb)
        table = concat([emb, Tensor(np.zeros((1, emb.shape[1]), emb.data.dtype))], axis=0)
        index = np.full((B, Tv), uniq.shape[0], dtype=np.int64)
        index[valid] = inverse.reshape(-1)
        feats = take_rows(table, index)
        return self.video_encoder(PaddedBatch(feats, batch.video_lengths))

    def encode(self, batch: Batch):
        """Return ``(memories, masks, summary_vector, extras)`` for the decoder."""
        dt = self.decoder.cell.W.data.dtype
        audio = PaddedBatch(Tensor(batch.audio.astype(dt)), batch.audio_lengths)
        a = self.audio_encoder(audio)
        if self.kind == "A":
            return [a.memory], [a.mask], a.summary_vector(), {}
        if batch.frames is None:
            raise ValueError(f"{DISPLAY[self.kind]} needs video frames in the batch")
        v = self.encode_video(batch)
        if self.kind == "AV_ALIGN":
            fused = self.fusion(a.memory, a.lengths, v.memory, v.lengths, lower_summary=a.summary)
            return [fused.memory], [fused.mask], fused.summary_vector(), {"alignments": fused.alignments}
        summary = concat([a.summary_vector(), v.summary_vector()], axis=-1)
        return [a.memory, v.memory], [a.mask, v.mask], summary, {}

    # -- training / inference --------------------------------------------------
    def loss(self, batch: Batch) -> Tensor:
        memories, masks, summary, _ = self.encode(batch)
        inp, out, w = self.vocab.targets(batch.texts)
        return self.decoder.teacher_forced_loss(memories, masks, summary, inp, out, w)

    def transcribe(self, batch: Batch, max_len: int | None = None, beam: int = 0):
        """Greedy (or beam) transcriptions plus any attention alignments."""
        was_training = getattr(self, "training", True)
        self.train(False)
        try:
            return self._transcribe(batch, max_len, beam)
        finally:
            self.train(was_training)

    def _transcribe(self, batch: Batch, max_len, beam):
        with no_grad():
            memories, masks, summary, extras = self.encode(batch)
            if beam:
                hyps = []
                for b in range(len(batch)):
                    T = int(batch.audio_lengths[b]) if self.kind != "AV_CAT" else memories[0].shape[1]
                    mems = [m[b:b + 1] for m in memories]
                    hyps.append(self.decoder.beam_decode(mems, [mk[b:b + 1] for mk in masks], summary[b:b + 1],
                                                         self.vocab, beam, max_len or 2 * T + 10))
            else:
                hyps = self.decoder.greedy_decode(memories, masks, summary, self.vocab, max_len)
        return hyps, extras
