"""Finite-difference checks of the four differentiable building blocks at tiny sizes."""
from __future__ import annotations

import time

import numpy as np

from .decoder import AttentionDecoder, DecoderState
from .encoders import PaddedBatch, StackedEncoder
from .fusion import AVAlignLayer
from .nn_core import Tensor, gradient_check, precision
from .nn_core.tensor import mul
from .visual import ResidualBlock

COMPONENTS = ("conv_block", "lstm_stack", "av_align_fusion", "decoder_step")


def _probe(rng, shape):
    return Tensor(rng.normal(size=shape))


def _weighted(t, r):
    return mul(t, r).sum()


def check_conv_block(rng, h, tol):
    block = ResidualBlock(2, 3, 2, rng).assign_names()
    x = Tensor(rng.normal(size=(2, 5, 5, 2)), requires_grad=True, name="x")
    r = _probe(rng, (2, 3, 3, 3))
    return gradient_check(lambda: _weighted(block(x), r), [x] + block.parameters(), h=h, tol=tol)


def check_lstm_stack(rng, h, tol):
    enc = StackedEncoder(3, 4, 2, rng).assign_names()
    x = Tensor(rng.normal(size=(2, 3, 3)), requires_grad=True, name="x")
    r = _probe(rng, (2, 3, 4))
    s = _probe(rng, (2, 16))

    def f():
        out = enc(PaddedBatch(x, np.array([3, 2])))
        return _weighted(out.memory, r) + _weighted(out.summary_vector(), s)

    return gradient_check(f, [x] + enc.parameters(), h=h, tol=tol)


def check_fusion(rng, h, tol):
    layer = AVAlignLayer(3, 3, 3, 3, rng).assign_names()
    audio = Tensor(rng.normal(size=(2, 4, 3)), requires_grad=True, name="audio_lower")
    video = Tensor(rng.normal(size=(2, 2, 3)), requires_grad=True, name="video_memory")
    r = _probe(rng, (2, 4, 3))
    s = _probe(rng, (2, 6))

    def f():
        out = layer(audio, np.array([4, 3]), video, np.array([2, 1]))
        return _weighted(out.memory, r) + _weighted(out.summary_vector(), s)

    return gradient_check(f, [audio, video] + layer.parameters(), h=h, tol=tol)


def check_decoder_step(rng, h, tol):
    dec = AttentionDecoder(6, 4, [3], 5, 4, 3, rng, embed_dim=3).assign_names()
    mem = Tensor(rng.normal(size=(2, 3, 3)), requires_grad=True, name="memory")
    summ = Tensor(rng.normal(size=(2, 5)), requires_grad=True, name="summary")
    mask = np.array([[1, 1, 1], [1, 1, 0]], dtype=float)
    r = _probe(rng, (2, 6))

    def f():
        h0, c0 = dec.initial_state(summ)
        logits, _, _ = dec.decode_step(DecoderState(h0, c0, np.array([1, 4])), [mem], [mask])
        return _weighted(logits, r)

    return gradient_check(f, [mem, summ] + dec.parameters(), h=h, tol=tol)


CHECKS = {
    "conv_block": check_conv_block,
    "lstm_stack": check_lstm_stack,
    "av_align_fusion": check_fusion,
    "decoder_step": check_decoder_step,
}


def run_gradchecks(h: float = 1e-5, tol: float = 1e-4, seed: int = 0, components=COMPONENTS):
    """Return ``[(component, report, seconds)]``; always runs in 64-bit."""
    results = []
    with precision(64):
        for name in components:
            t0 = time.time()
            rep = CHECKS[name](np.random.default_rng(seed), h, tol)
            results.append((name, rep, time.time() - t0))
    return results
