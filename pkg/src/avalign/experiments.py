"""Desk-scale experiment recipes on the synthetic corpus."""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from . import acoustic, corpus
from .acoustic import FeatureNormalizer, NoiseSpec
from .decoder import Vocabulary
from .models import ArchConfig, SpeechRecognizer
from .nn_core import precision
from .training import Trainer, TrainConfig, score_corpus

log = logging.getLogger(__name__)

DESK_ARCH = ArchConfig(enc_layers=3, enc_units=64, dec_units=64, heads=4, att_dim=32, embed_dim=32)


def synthetic_utterances(spec: corpus.SyntheticSpec, noise: NoiseSpec = NoiseSpec(), draws: int = 1):
    """Render a synthetic corpus in memory and compute (optionally noisy) features.

    With ``draws > 1`` each utterance appears once per independent noise draw, sharing
    its video frames; copies after the first get ids ``<uid>~<draw>``.
    """
    out = []
    for uid, text, clean, frames in corpus.synthesize_utterances(spec):
        for d in range(draws if noise.kind != "none" else 1):
            cid = uid if d == 0 else f"{uid}~{d}"
            wav = clean
            if noise.kind != "none":
                seed = corpus.utterance_noise_seed(noise.seed, cid)
                wav = acoustic.apply_noise(clean, NoiseSpec(noise.kind, noise.snr_db, seed))
            feats = acoustic.append_deltas(acoustic.log_mel_spectrogram(wav))
            out.append(corpus.Utterance(cid, text, feats, frames))
    return out


def normalise(train, *others):
    norm = FeatureNormalizer.fit([u.audio for u in train])
    for group in (train,) + others:
        for u in group:
            u.audio = norm(u.audio)
    return norm


@dataclass
class FusionRun:
    kind: str
    seed: int
    cer: float
    wer: float
    seconds: float
    final_loss: float


@dataclass
class FusionSetup:
    n_train: int = 1600
    n_test: int = 100
    chars: tuple = (3, 6)
    inventory: int = 10
    ambiguity: tuple = (("a", "b"), ("c", "d"))
    tone_fraction: float = 0.05
    noise_kind: str = "white_gaussian"
    snr_db: float = 0.0
    noise_draws: int = 1
    steps: int = 6000
    batch_size: int = 16
    lr: float = 1e-3
    warmup_steps: int = 1000  # keeps the first large AMSGrad steps from flattening the CNN
    arch: ArchConfig = field(default_factory=lambda: DESK_ARCH)


def build_fusion_data(setup: FusionSetup, data_seed: int = 7):
    common = dict(chars_per_utterance=setup.chars, inventory_size=setup.inventory,
                  visual_ambiguity_pairs=setup.ambiguity, tone_fraction=setup.tone_fraction)
    train_spec = corpus.SyntheticSpec(seed=data_seed, n_utterances=setup.n_train, **common)
    test_spec = corpus.SyntheticSpec(seed=data_seed + 1000, n_utterances=setup.n_test, **common)
    train = synthetic_utterances(train_spec, NoiseSpec(setup.noise_kind, setup.snr_db, 11), setup.noise_draws)
    test = synthetic_utterances(test_spec, NoiseSpec(setup.noise_kind, setup.snr_db, 22))
    normalise(train, test)
    return train, test


def run_fusion_model(kind: str, seed: int, train, test, setup: FusionSetup) -> FusionRun:
    """Train one recogniser in 32-bit and score it on the held-out set."""
    t0 = time.time()
    with precision(32):
        model = SpeechRecognizer(kind, setup.arch, Vocabulary(), seed=seed).astype(np.float32)
        trainer = Trainer(model, train, TrainConfig(lr=setup.lr, batch_size=setup.batch_size, seed=seed,
                                                    max_steps=setup.steps, warmup_steps=setup.warmup_steps,
                                                    log_every=0))
        trainer.run()
        cell, _ = score_corpus(model, test)
    final = float(np.mean([v for _, v in trainer.history[-100:]]))
    return FusionRun(kind, seed, cell.cer, cell.wer, time.time() - t0, final)
