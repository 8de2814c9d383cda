"""Training loop, checkpoints with optimiser state, and corpus scoring."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass

import numpy as np

from .acoustic import FeatureNormalizer
from .corpus import Utterance, collate, make_batches
from .evaluation import ScoredPair, aggregate
from .models import ArchConfig, SpeechRecognizer
from .nn_core import AMSGrad, load_arrays, save_arrays
from .decoder import Vocabulary

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_norm: float = 1.0
    batch_size: int = 16
    max_steps: int = 2000
    seed: int = 0
    log_every: int = 50
    warmup_steps: int = 0  # linear ramp of the learning rate up to lr


@dataclass
class Progress:
    step: int = 0
    epoch: int = 0
    batch: int = 0  # index of the next batch within ``epoch``


class Trainer:
    def __init__(self, model: SpeechRecognizer, utterances: list[Utterance], cfg: TrainConfig,
                 normalizer: FeatureNormalizer | None = None):
        self.model, self.cfg = model, cfg
        self.normalizer = normalizer
        self.utterances = utterances
        self.opt = AMSGrad(cfg.lr, cfg.beta1, cfg.beta2, cfg.eps, cfg.clip_norm or None)
        self.progress = Progress()
        self.history: list[tuple[int, float]] = []

    def _epoch_batches(self, epoch: int):
        return make_batches(self.utterances, self.cfg.batch_size, seed=self.cfg.seed, epoch=epoch).batches

    def step(self, batch) -> float:
        self.model.train(True)
        self.model.reseed((self.cfg.seed, self.progress.step))
        loss = self.model.loss(batch)
        value = loss.item()
        if not math.isfinite(value):
            # drop the recorded graph before bailing out
            from .nn_core import current_tape
            current_tape().clear()
            raise TrainingDiverged(f"non-finite loss at step {self.progress.step}")
        loss.backward()
        self.opt.lr = self.lr_at(self.progress.step)
        self.opt.step(self.model.parameters())
        return value

    def lr_at(self, step: int) -> float:
        w = self.cfg.warmup_steps
        return self.cfg.lr * min(1.0, (step + 1) / w) if w > 0 else self.cfg.lr

    def run(self, max_steps: int | None = None, on_step=None, stop=None):
        """Train until ``max_steps`` total steps; ``stop(step, loss)`` may end early."""
        max_steps = self.cfg.max_steps if max_steps is None else max_steps
        p = self.progress
        batches = self._epoch_batches(p.epoch)
        while p.step < max_steps:
            if p.batch >= len(batches):
                p.epoch += 1
                p.batch = 0
                batches = self._epoch_batches(p.epoch)
            value = self.step(collate(batches[p.batch]))
            p.batch += 1
            p.step += 1
            self.history.append((p.step, value))
            if self.cfg.log_every and p.step % self.cfg.log_every == 0:
                log.info("step %d loss %.4f lr %g", p.step, value, self.opt.lr)
            if on_step is not None:
                on_step(self, value)
            if stop is not None and stop(p.step, value):
                break
        return self.history

    # -- checkpoints -------------------------------------------------------
    def save(self, path, extra_meta: dict | None = None):
        arrays = {}
        for name, prm in self.model.named_parameters():
            arrays[f"param/{name}"] = prm.data
            if prm.state:
                for k in ("m", "v", "vhat"):
                    arrays[f"opt/{name}/{k}"] = prm.state[k]
                arrays[f"opt/{name}/step"] = np.array(prm.state["step"], dtype=np.int64)
        for name, buf in self.model.named_buffers():
            arrays[f"param/{name}"] = buf.data
        if self.normalizer is not None:
            arrays["norm/mean"] = self.normalizer.mean
            arrays["norm/std"] = self.normalizer.std
        p = self.progress
        arrays["meta/progress"] = np.array([p.step, p.epoch, p.batch], dtype=np.int64)
        meta = {"kind": self.model.kind, "arch": self.model.arch.as_dict(), "train": asdict(self.cfg),
                "vocab": self.model.vocab.symbols[3:], **(extra_meta or {})}
        arrays["meta/json"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
        save_arrays(path, arrays)

    def restore(self, path):
        arrays = load_arrays(path)
        _, _, _, params = split_checkpoint(arrays)
        self.model.load_state_dict(params)
        for name, prm in self.model.named_parameters():
            if f"opt/{name}/m" in arrays:
                dt = prm.data.dtype
                prm.state = {k: arrays[f"opt/{name}/{k}"].astype(dt) for k in ("m", "v", "vhat")}
                prm.state["step"] = int(arrays[f"opt/{name}/step"])
        step, epoch, batch = (int(v) for v in arrays["meta/progress"])
        self.progress = Progress(step, epoch, batch)
        if "norm/mean" in arrays:
            self.normalizer = FeatureNormalizer(arrays["norm/mean"], arrays["norm/std"])


def split_checkpoint(arrays):
    meta = json.loads(bytes(arrays["meta/json"].astype(np.uint8)).decode()) if "meta/json" in arrays else {}
    norm = None
    if "norm/mean" in arrays:
        norm = FeatureNormalizer(arrays["norm/mean"], arrays["norm/std"])
    params = {k[len("param/"):]: v for k, v in arrays.items() if k.startswith("param/")}
    return meta, norm, arrays.get("meta/progress"), params


def load_model(path, dtype=np.float64):
    """Rebuild a recogniser from a checkpoint; returns ``(model, normalizer, meta)``."""
    meta, norm, _, params = split_checkpoint(load_arrays(path))
    vocab = Vocabulary(meta["vocab"])
    model = SpeechRecognizer(meta["kind"], ArchConfig(**meta["arch"]), vocab, seed=0)
    model.astype(dtype)
    model.load_state_dict(params)
    return model, norm, meta


def transcribe_all(model: SpeechRecognizer, utterances, batch_size: int = 32, beam: int = 0):
    """Decode every utterance; returns ``{utt_id: hypothesis}`` and ``{utt_id: alignment}``."""
    hyps, aligns = {}, {}
    ordered = sorted(utterances, key=lambda u: u.utterance_id)
    for i in range(0, len(ordered), batch_size):
        batch = collate(ordered[i:i + batch_size])
        out, extras = model.transcribe(batch, beam=beam)
        for j, (uid, h) in enumerate(zip(batch.ids, out)):
            hyps[uid] = h
            if "alignments" in extras:
                aligns[uid] = extras["alignments"][j, : batch.audio_lengths[j], : batch.video_lengths[j]]
    return hyps, aligns


def score_corpus(model, utterances, batch_size: int = 32, beam: int = 0):
    hyps, _ = transcribe_all(model, utterances, batch_size, beam)
    pairs = [ScoredPair.score(u.transcript, hyps[u.utterance_id]) for u in utterances]
    return aggregate(pairs), hyps
