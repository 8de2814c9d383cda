"""Walk one synthetic utterance through both front ends and print what comes out."""
import numpy as np
from scipy import signal

from avalign import acoustic, corpus
from avalign.visual import VisualFrontend

spec = corpus.SyntheticSpec(seed=3, n_utterances=1, chars_per_utterance=(5, 5),
                            visual_ambiguity_pairs=(("a", "b"),))
uid, text, wav, frames = next(corpus.synthesize_utterances(spec))
print(f"utterance {uid}: {text!r}")
print(f"  waveform: {wav.samples.size} samples at {wav.sample_rate} Hz ({wav.duration:.2f} s)")
print(f"  video:    {frames.shape[0]} frames of {frames.shape[1:]}")

# each character is a two-tone chord over a shared buzz; subtract the utterance mean
# so the buzz cancels and the chord's bands stand out
mel = acoustic.log_mel_spectrogram(wav)
feats = acoustic.append_deltas(mel)
print(f"\nlog-mel {mel.shape}, with deltas {feats.shape}")
owner = corpus.audio_frame_char_index(mel.shape[0], len(text))
chords = corpus.chord_table(spec.alphabet)
centres = acoustic.mel_centers()
for i, ch in enumerate(text):
    expect = sorted(int(np.argmin(abs(centres - f))) for f in chords[ch])
    lift = mel[owner == i].mean(axis=0) - mel.mean(axis=0)
    peaks = signal.argrelmax(np.r_[-np.inf, lift, -np.inf])[0] - 1  # one band per tone
    found = sorted(peaks[np.argsort(lift[peaks])[-2:]].tolist())
    print(f"  {ch!r}: chord bands {expect}, two highest peaks {found}")

# the same letters at 0 dB white noise
noisy = acoustic.apply_noise(wav, acoustic.NoiseSpec("white_gaussian", 0.0, seed=1))
print(f"\nmixed at 0 dB, measured {acoustic.measured_snr(wav.samples, noisy.samples):.3f} dB")

# glyphs: 'a' and 'b' were declared ambiguous, so their frames are pixel-identical
chars = corpus.frame_char_index(len(text))
glyph = {c: frames[chars == i][0] for i, c in enumerate(text)}
if "a" in glyph and "b" in glyph:
    print("frames for 'a' and 'b' identical:", bool(np.array_equal(glyph["a"], glyph["b"])))

frontend = VisualFrontend(np.random.default_rng(0))
print(f"\nvisual CNN, {frontend.num_parameters():,} parameters")
for shape in frontend.layer_shapes(frames[:1]):
    print("  ", "x".join(map(str, shape)))
emb = frontend(frames).data
print(f"embedded video {emb.shape}")
