"""Manifests, batching, and a seeded synthetic audio-visual corpus.

Synthetic utterances are random character strings. Every character lasts
100 ms. Its audio is a two-tone chord (unique per character) over a shared
harmonic buzz that carries no identity; its video is a 36x36x3 glyph held for
the character's frames at 30 FPS. Characters listed in an ambiguity pair share
a glyph, the way one mouth shape can explain several sounds.
"""
from __future__ import annotations

import csv
import hashlib
import itertools
import logging
import queue
import threading
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import acoustic
from .acoustic import SAMPLE_RATE, NoiseSpec, Waveform
from .visual import CHANNELS, FRAME_RATE, FRAME_SIZE

log = logging.getLogger(__name__)

CHAR_SECONDS = 0.1
CHAR_SAMPLES = int(round(CHAR_SECONDS * SAMPLE_RATE))  # 2205
TONE_GRID = tuple(float(f) for f in np.geomspace(1500.0, 9000.0, 8))
MANIFEST_FIELDS = ("utterance_id", "audio_path", "video_path", "transcript")


class CorpusConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ManifestEntry:
    utterance_id: str
    audio_path: str
    video_path: str
    transcript: str


@dataclass
class SyntheticSpec:
    seed: int = 0
    n_utterances: int = 20
    chars_per_utterance: tuple = (3, 6)
    inventory_size: int = 8
    visual_ambiguity_pairs: tuple = ()
    audio_noise: NoiseSpec = field(default_factory=NoiseSpec)
    word_space: bool = False  # insert blanks between 2-4 letter words
    tone_fraction: float = 0.15  # share of clean signal power carried by the chord
    jitter: float = 0.15  # per-character amplitude jitter

    def __post_init__(self):
        if not 1 <= self.inventory_size <= 26:
            raise CorpusConfigError(f"inventory_size must be in 1..26, got {self.inventory_size}")
        n_sig = self.inventory_size + int(self.word_space)
        if n_sig > len(list(itertools.combinations(TONE_GRID, 2))):
            raise CorpusConfigError("inventory exceeds the chord capacity")
        seen = set()
        inv = set(self.inventory)
        for pair in self.visual_ambiguity_pairs:
            a, b = pair
            if a == b or a in seen or b in seen:
                raise CorpusConfigError(f"ambiguity pairs must be disjoint, offending pair {pair}")
            if a not in inv or b not in inv:
                raise CorpusConfigError(f"ambiguity pair {pair} outside the inventory")
            seen.update(pair)
        lo, hi = self.chars_per_utterance
        if lo < 1 or hi < lo:
            raise CorpusConfigError(f"bad chars_per_utterance {self.chars_per_utterance}")

    @property
    def inventory(self) -> str:
        return "abcdefghijklmnopqrstuvwxyz"[: self.inventory_size]

    @property
    def alphabet(self) -> str:
        return self.inventory + (" " if self.word_space else "")


# ---------------------------------------------------------------------------
# per-character signatures


def chord_table(alphabet: str) -> dict[str, tuple]:
    """Character -> chord frequencies; the blank is the only tone-free symbol."""
    combos = list(itertools.combinations(TONE_GRID, 2))
    order = np.random.default_rng(1234).permutation(len(combos))
    table, k = {}, 0
    for ch in alphabet:
        if ch == " ":
            table[ch] = ()
        else:
            table[ch] = combos[order[k]]
            k += 1
    return table


def glyph_classes(spec: SyntheticSpec) -> dict[str, int]:
    """Character -> glyph id; characters of one ambiguity pair share an id."""
    out, nxt = {}, 0
    partner = {}
    for a, b in spec.visual_ambiguity_pairs:
        partner[a], partner[b] = b, a
    for ch in spec.alphabet:
        if ch in out:
            continue
        out[ch] = nxt
        if ch in partner:
            out[partner[ch]] = nxt
        nxt += 1
    return out


def render_glyph(glyph_id: int, blank: bool = False) -> np.ndarray:
    """A 36x36x3 image in [0, 1]: blocky mouth-like pattern unique per glyph id."""
    if blank:
        img = np.full((FRAME_SIZE, FRAME_SIZE, CHANNELS), 0.5)
        img[16:20, 8:28] = 0.2
        return img
    rng = np.random.default_rng(10_000 + glyph_id)
    coarse = rng.choice([0.15, 0.5, 0.85], size=(6, 6, CHANNELS))
    return np.kron(coarse, np.ones((6, 6, 1)))


def char_audio(ch: str, chords: dict, rng: np.random.Generator, spec: SyntheticSpec) -> np.ndarray:
    t = np.arange(CHAR_SAMPLES) / SAMPLE_RATE
    # shared harmonic buzz, identity-free
    f0 = 140.0
    buzz = sum(np.sin(2 * np.pi * f0 * k * t + rng.uniform(0, 2 * np.pi)) / k for k in range(1, 16))
    buzz /= np.sqrt(np.mean(buzz ** 2))
    tones = np.zeros_like(t)
    for f in chords[ch]:
        amp = 1.0 + spec.jitter * rng.uniform(-1, 1)
        tones += amp * np.sin(2 * np.pi * f * t + rng.uniform(0, 2 * np.pi))
    if chords[ch]:
        tones /= np.sqrt(len(chords[ch]) / 2.0)
        tones *= np.sqrt(spec.tone_fraction / (1.0 - spec.tone_fraction))
    x = buzz + tones
    ramp = int(0.01 * SAMPLE_RATE)
    env = np.ones_like(t)
    env[:ramp] = np.linspace(0, 1, ramp)
    env[-ramp:] = np.linspace(1, 0, ramp)
    return x * env


def random_transcript(spec: SyntheticSpec, rng: np.random.Generator) -> str:
    n = int(rng.integers(spec.chars_per_utterance[0], spec.chars_per_utterance[1] + 1))
    letters = [spec.inventory[i] for i in rng.integers(0, spec.inventory_size, size=n)]
    if not spec.word_space:
        return "".join(letters)
    out, i = [], 0
    while i < n:
        w = int(rng.integers(2, 5))
        out.append("".join(letters[i:i + w]))
        i += w
    return " ".join(out)


def render_audio(text: str, spec: SyntheticSpec, rng: np.random.Generator) -> Waveform:
    chords = chord_table(spec.alphabet)
    x = np.concatenate([char_audio(ch, chords, rng, spec) for ch in text])
    return Waveform(0.1 * x, SAMPLE_RATE)


def video_frame_count(n_chars: int) -> int:
    return int(np.floor(n_chars * CHAR_SECONDS * FRAME_RATE + 1e-9))


def frame_char_index(n_chars: int) -> np.ndarray:
    """Character shown in each video frame, sampled at the frame centre."""
    centres = (np.arange(video_frame_count(n_chars)) + 0.5) / FRAME_RATE
    return np.minimum((centres / CHAR_SECONDS).astype(int), n_chars - 1)


def audio_frame_char_index(n_frames: int, n_chars: int) -> np.ndarray:
    centres = (acoustic.WIN_LENGTH / 2 + acoustic.HOP_LENGTH * np.arange(n_frames)) / SAMPLE_RATE
    return np.minimum((centres / CHAR_SECONDS).astype(int), n_chars - 1)


def render_video(text: str, spec: SyntheticSpec) -> np.ndarray:
    classes = glyph_classes(spec)
    glyphs = [render_glyph(classes[ch], blank=ch == " ") for ch in text]
    return np.stack([glyphs[i] for i in frame_char_index(len(text))])


# ---------------------------------------------------------------------------
# corpus synthesis and manifests


def synthesize_utterances(spec: SyntheticSpec):
    """Yield ``(utt_id, transcript, Waveform, frames)`` deterministically from the seed."""
    rng = np.random.default_rng(spec.seed)
    for k in range(spec.n_utterances):
        text = random_transcript(spec, rng)
        wav = render_audio(text, spec, rng)
        if spec.audio_noise.kind != "none":
            ns = NoiseSpec(spec.audio_noise.kind, spec.audio_noise.snr_db, spec.audio_noise.seed + k)
            wav = acoustic.apply_noise(wav, ns)
        yield f"syn{spec.seed:04d}_{k:05d}", text, wav, render_video(text, spec)


def synthesize_corpus(spec: SyntheticSpec, out_dir) -> list[ManifestEntry]:
    """Write WAVs, frame files, ``<id>.txt`` transcripts and ``manifest.csv`` into ``out_dir``."""
    from .visual import write_frames

    out_dir = Path(out_dir)
    (out_dir / "audio").mkdir(parents=True, exist_ok=True)
    (out_dir / "video").mkdir(parents=True, exist_ok=True)
    entries = []
    for uid, text, wav, frames in synthesize_utterances(spec):
        apath = out_dir / "audio" / f"{uid}.wav"
        vpath = out_dir / "video" / f"{uid}.frames"
        acoustic.write_wav(apath, wav)
        write_frames(vpath, frames)
        (out_dir / "audio" / f"{uid}.txt").write_text(text + "\n", encoding="utf-8")
        entries.append(ManifestEntry(uid, str(apath.relative_to(out_dir)), str(vpath.relative_to(out_dir)), text))
    write_manifest(out_dir / "manifest.csv", entries)
    return entries


def write_manifest(path, entries) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MANIFEST_FIELDS)
        for e in entries:
            w.writerow([e.utterance_id, e.audio_path, e.video_path, e.transcript])


def read_manifest(path) -> list[ManifestEntry]:
    """Read ``utterance_id,audio_path,video_path,transcript``; relative paths resolve
    against the manifest directory; an empty transcript falls back to ``<id>.txt``."""
    path = Path(path)
    root = path.parent
    out = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != MANIFEST_FIELDS:
            raise CorpusConfigError(f"{path}: header must be {','.join(MANIFEST_FIELDS)}")
        for rec in reader:
            apath = root / rec["audio_path"]
            vpath = root / rec["video_path"] if rec["video_path"] else None
            text = rec["transcript"]
            if not text:
                txt = apath.with_suffix(".txt")
                text = txt.read_text(encoding="utf-8").strip() if txt.exists() else ""
            out.append(ManifestEntry(rec["utterance_id"], str(apath), str(vpath) if vpath else "", text))
    return out


def file_digest(paths) -> str:
    h = hashlib.sha256()
    for p in paths:
        h.update(Path(p).read_bytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# loading and batching


@dataclass
class Utterance:
    utterance_id: str
    transcript: str
    audio: np.ndarray  # (T_a, 90) features
    frames: np.ndarray | None  # (T_v, 36, 36, 3)


@dataclass
class Batch:
    ids: list
    texts: list
    audio: np.ndarray  # (B, T_a, 90)
    audio_lengths: np.ndarray
    frames: np.ndarray | None  # (B, T_v, 36, 36, 3)
    video_lengths: np.ndarray | None

    @property
    def audio_mask(self):
        return (np.arange(self.audio.shape[1])[None] < self.audio_lengths[:, None]).astype(float)

    @property
    def video_mask(self):
        return (np.arange(self.frames.shape[1])[None] < self.video_lengths[:, None]).astype(float)

    def __len__(self):
        return len(self.ids)


def utterance_noise_seed(base_seed: int, utt_id: str) -> int:
    return (base_seed * 1_000_003 + int(hashlib.sha256(utt_id.encode()).hexdigest()[:8], 16)) % (2 ** 31)


def load_utterance(entry: ManifestEntry, noise: NoiseSpec = NoiseSpec(), with_video: bool = True,
                   feature_cache: Path | None = None) -> Utterance:
    from .visual import read_frames

    if noise.kind == "none" and feature_cache is not None and Path(feature_cache).exists():
        feats = acoustic.read_feature_cache(feature_cache)
    else:
        wav = acoustic.read_wav(entry.audio_path)
        wav = acoustic.resample(wav)
        if noise.kind != "none":
            wav = acoustic.apply_noise(
                wav, NoiseSpec(noise.kind, noise.snr_db, utterance_noise_seed(noise.seed, entry.utterance_id))
            )
        feats = acoustic.append_deltas(acoustic.log_mel_spectrogram(wav))
    frames = read_frames(entry.video_path) if with_video and entry.video_path else None
    return Utterance(entry.utterance_id, entry.transcript, feats, frames)


def collate(utts) -> Batch:
    B = len(utts)
    a_len = np.array([u.audio.shape[0] for u in utts])
    audio = np.zeros((B, a_len.max(), utts[0].audio.shape[1]))
    for i, u in enumerate(utts):
        audio[i, : a_len[i]] = u.audio
    frames = v_len = None
    if all(u.frames is not None for u in utts):
        v_len = np.array([u.frames.shape[0] for u in utts])
        frames = np.zeros((B, v_len.max(), FRAME_SIZE, FRAME_SIZE, CHANNELS))
        for i, u in enumerate(utts):
            frames[i, : v_len[i]] = u.frames
    return Batch([u.utterance_id for u in utts], [u.transcript for u in utts], audio, a_len, frames, v_len)


class BatchStream:
    """One epoch of batches. Items that fail to load are skipped and counted."""

    def __init__(self, items, batch_size: int, seed: int = 0, epoch: int = 0, bucketing: bool = True,
                 load=None):
        if not items:
            raise CorpusConfigError("empty manifest")
        self.skipped = 0
        utts = []
        for it in items:
            if isinstance(it, Utterance):
                utts.append(it)
                continue
            try:
                utts.append(load(it))
            except Exception as exc:  # noqa: BLE001 - any unreadable entry is skipped
                log.warning("skipping %s: %s", getattr(it, "utterance_id", it), exc)
                self.skipped += 1
        rng = np.random.default_rng([seed, epoch])
        order = rng.permutation(len(utts))
        if bucketing:
            lengths = np.array([utts[i].audio.shape[0] for i in order])
            order = order[np.argsort(lengths, kind="stable")]
        chunks = [order[i:i + batch_size] for i in range(0, len(order), batch_size)]
        if bucketing:
            chunks = [chunks[i] for i in rng.permutation(len(chunks))]
        self.batches = [[utts[i] for i in c] for c in chunks]

    def __iter__(self):
        return (collate(b) for b in self.batches)

    def __len__(self):
        return len(self.batches)


def make_batches(items, batch_size: int, seed: int = 0, epoch: int = 0, bucketing: bool = True,
                 load=None) -> BatchStream:
    return BatchStream(items, batch_size, seed, epoch, bucketing, load)


def padding_waste(batches) -> float:
    pad = total = 0
    for b in batches:
        lens = np.array([u.audio.shape[0] for u in b])
        pad += int((lens.max() - lens).sum())
        total += int(lens.max()) * len(lens)
    return pad / total


def prefetch(iterable, maxsize: int = 2):
    """Produce items on a background thread through a bounded queue, order preserved."""
    q: queue.Queue = queue.Queue(maxsize)
    done = object()

    def producer():
        try:
            for item in iterable:
                q.put(item)
        finally:
            q.put(done)

    threading.Thread(target=producer, daemon=True).start()
    while (item := q.get()) is not done:
        yield item


# ---------------------------------------------------------------------------
# nearest-template probes of per-modality identifiability


def audio_char_segments(feats: np.ndarray, n_chars: int) -> list[np.ndarray]:
    """Mean log-mel vector of the frames centred inside each character."""
    idx = audio_frame_char_index(feats.shape[0], n_chars)
    return [feats[idx == k, : acoustic.N_MELS].mean(axis=0) for k in range(n_chars)]


def video_char_segments(frames: np.ndarray, n_chars: int) -> list[np.ndarray]:
    idx = frame_char_index(n_chars)
    return [frames[idx == k].reshape(-1, frames[0].size).mean(axis=0) for k in range(n_chars)]


def template_probe(train, test):
    """Nearest-template classification. ``train``/``test`` are lists of (char, vector).

    Returns ``(accuracy, confusions)`` with confusions a set of (true, predicted) pairs.
    """
    chars = sorted({c for c, _ in train})
    templates = np.stack([np.mean([v for c, v in train if c == ch], axis=0) for ch in chars])
    correct, confusions = 0, set()
    for ch, v in test:
        pred = chars[int(np.argmin(((templates - v) ** 2).sum(axis=1)))]
        correct += pred == ch
        if pred != ch:
            confusions.add((ch, pred))
    return correct / len(test), confusions
