"""Residual CNN mapping 36x36x3 lip crops to 128-d frame embeddings.

Layer chain (NHWC)::

    rescale [0,1] -> [-1,1]                  36x36x3
    conv 3x3                                  36x36x8
    res block (stride 1)                      36x36x8
    res block (stride 2)                      18x18x16
    res block (stride 2)                      9x9x24
    res block (stride 2)                      5x5x32
    conv 5x5 valid                            1x1x128
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .nn_core import BatchNorm, Conv2d, LayerNorm, Module, ModuleList, Tensor, relu
from .nn_core.tensor import DimensionError, take_rows

FRAME_SIZE = 36
CHANNELS = 3
EMBED_DIM = 128
FRAME_RATE = 30.0
STEM_CHANNELS = 8
STAGES = ((8, 1), (16, 2), (24, 2), (32, 2))  # (channels, stride)


class FrameDataError(ValueError):
    pass


def rescale(frames: np.ndarray) -> np.ndarray:
    """Map pixel values from [0, 1] to [-1, 1]."""
    frames = np.asarray(frames, dtype=np.float64)
    if frames.size and (frames.min() < 0.0 or frames.max() > 1.0):
        raise FrameDataError(
            f"frame values must lie in [0, 1], got range [{frames.min():.3g}, {frames.max():.3g}]"
        )
    return 2.0 * frames - 1.0


def check_frames(frames: np.ndarray) -> np.ndarray:
    frames = np.asarray(frames)
    if frames.ndim == 3:
        frames = frames[None]
    if frames.ndim != 4 or frames.shape[1:] != (FRAME_SIZE, FRAME_SIZE, CHANNELS):
        raise DimensionError(
            f"frames must be T x {FRAME_SIZE} x {FRAME_SIZE} x {CHANNELS}, got {frames.shape}"
        )
    return frames


def write_frames(path, frames: np.ndarray) -> None:
    """Header ``int32 T, 36, 36, 3`` then little-endian float32 pixels."""
    frames = check_frames(frames).astype("<f4")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<4i", *frames.shape))
        fh.write(frames.tobytes())


def read_frames(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    if len(buf) < 16:
        raise FrameDataError(f"{path}: truncated frame file")
    shape = struct.unpack_from("<4i", buf, 0)
    if shape[1:] != (FRAME_SIZE, FRAME_SIZE, CHANNELS) or shape[0] < 1:
        raise FrameDataError(f"{path}: bad frame header {shape}")
    n = int(np.prod(shape))
    if len(buf) != 16 + 4 * n:
        raise FrameDataError(f"{path}: expected {n} values, file size {len(buf)}")
    return np.frombuffer(buf, dtype="<f4", count=n, offset=16).reshape(shape).astype(np.float64)


def make_norm(kind: str, channels: int) -> Module:
    if kind == "layer":
        return LayerNorm(channels)
    if kind == "batch":
        return BatchNorm(channels)
    raise ValueError(f"unknown normalisation {kind!r}; choose 'layer' or 'batch'")


class ResidualBlock(Module):
    """Full pre-activation block: norm, ReLU, conv3x3, norm, ReLU, conv3x3 + shortcut.

    When channels or stride change, the shortcut is a strided 1x1 projection of
    the pre-activated input; otherwise it is the identity on the raw input.
    """

    def __init__(self, c_in: int, c_out: int, stride: int, rng: np.random.Generator, norm: str = "layer"):
        if stride not in (1, 2):
            raise DimensionError(f"residual stride must be 1 or 2, got {stride}")
        self.c_in, self.c_out, self.stride = c_in, c_out, stride
        self.norm1 = make_norm(norm, c_in)
        self.conv1 = Conv2d(3, c_in, c_out, rng, stride=stride, padding=1)
        self.norm2 = make_norm(norm, c_out)
        self.conv2 = Conv2d(3, c_out, c_out, rng, stride=1, padding=1)
        self.project = None
        if stride != 1 or c_in != c_out:
            self.project = Conv2d(1, c_in, c_out, rng, stride=stride, padding=0, bias=False)

    def __call__(self, x):
        if x.shape[-1] != self.c_in:
            raise DimensionError(f"block expects {self.c_in} input channels, got {x.shape[-1]}")
        pre = relu(self.norm1(x))
        branch = self.conv2(relu(self.norm2(self.conv1(pre))))
        shortcut = x if self.project is None else self.project(pre)
        return branch + shortcut


class VisualFrontend(Module):
    def __init__(self, rng: np.random.Generator, embed_dim: int = EMBED_DIM, norm: str = "layer"):
        self.stem = Conv2d(3, CHANNELS, STEM_CHANNELS, rng, padding=1)
        blocks, c = [], STEM_CHANNELS
        for c_out, stride in STAGES:
            blocks.append(ResidualBlock(c, c_out, stride, rng, norm))
            c = c_out
        self.blocks = ModuleList(blocks)
        self.head = Conv2d(5, c, embed_dim, rng, padding=0)
        self.embed_dim = embed_dim

    def layer_shapes(self, frames) -> list[tuple]:
        """Output shape (without the frame axis) after every stage."""
        x = Tensor(rescale(check_frames(frames)))
        shapes = [x.shape[1:]]
        x = self.stem(x)
        shapes.append(x.shape[1:])
        for blk in self.blocks:
            x = blk(x)
            shapes.append(x.shape[1:])
        shapes.append(self.head(x).shape[1:])
        return shapes

    def __call__(self, frames, dedupe: bool = True):
        """Embed ``(T, 36, 36, 3)`` frames in [0, 1] to ``(T, 128)``.

        Frames are mapped independently, so identical frames are embedded
        once and gathered (``dedupe``); with layer norm the result is the same
        either way. Batch norm in training mode sees only the distinct frames.
        """
        frames = check_frames(frames)
        if dedupe:
            flat = frames.reshape(frames.shape[0], -1)
            uniq, inverse = np.unique(flat, axis=0, return_inverse=True)
            emb = self._embed(uniq.reshape(-1, FRAME_SIZE, FRAME_SIZE, CHANNELS))
            return take_rows(emb, inverse.reshape(-1))
        return self._embed(frames)

    def _embed(self, frames):
        x = self.stem(Tensor(rescale(frames)))
        for blk in self.blocks:
            x = blk(x)
        y = self.head(x)
        return y.reshape(y.shape[0], self.embed_dim)


def embed_frames(frontend: VisualFrontend, frames) -> Tensor:
    return frontend(frames)


__all__ = [
    "FRAME_SIZE", "EMBED_DIM", "FRAME_RATE", "FrameDataError", "ResidualBlock", "VisualFrontend",
    "rescale", "check_frames", "read_frames", "write_frames", "embed_frames",
]
