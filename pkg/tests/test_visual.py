import numpy as np
import pytest

from avalign.nn_core import DimensionError, Tensor, gradient_check
from avalign.nn_core.tensor import mul
from avalign.visual import (
    FrameDataError, ResidualBlock, VisualFrontend, embed_frames, read_frames, rescale, write_frames,
)

# counted by hand from the layer table: stem 224, blocks 1 328 / 3 920 / 9 368 / 16 680, head 102 528
GOLDEN_PARAMETER_COUNT = 133_840


@pytest.fixture(scope="module")
def frontend():
    return VisualFrontend(np.random.default_rng(5))


def test_rescale_points():
    assert rescale(np.array([0.5]))[0] == 0.0
    assert rescale(np.array([0.0, 1.0])).tolist() == [-1.0, 1.0]


def test_rescale_mean(rng):
    x = rng.uniform(size=(36, 36, 3))
    assert rescale(x).mean() == pytest.approx(2 * x.mean() - 1, abs=1e-12)


def test_rescale_out_of_range():
    with pytest.raises(FrameDataError):
        rescale(np.array([1.2]))


def test_shape_chain(frontend, rng):
    shapes = frontend.layer_shapes(rng.uniform(size=(1, 36, 36, 3)))
    assert shapes == [(36, 36, 3), (36, 36, 8), (36, 36, 8), (18, 18, 16), (9, 9, 24), (5, 5, 32), (1, 1, 128)]


def test_parameter_count_is_golden(frontend):
    assert frontend.num_parameters() == GOLDEN_PARAMETER_COUNT


def test_single_frame_embeds_to_128(frontend, rng):
    assert embed_frames(frontend, rng.uniform(size=(36, 36, 3))).shape == (1, 128)


def test_wrong_frame_size_names_expected(frontend):
    with pytest.raises(DimensionError, match="36 x 36"):
        frontend(np.zeros((2, 32, 32, 3)))


def test_repeated_frames_embed_identically(frontend, rng):
    f = rng.uniform(size=(36, 36, 3))
    out = frontend(np.stack([f, f, f]), dedupe=False).data
    assert np.array_equal(out[0], out[1]) and np.array_equal(out[1], out[2])


def test_dedupe_changes_nothing(frontend, rng):
    frames = rng.uniform(size=(3, 36, 36, 3))
    frames = frames[[0, 1, 0, 2, 2]]
    np.testing.assert_allclose(frontend(frames).data, frontend(frames, dedupe=False).data, atol=1e-12)


def test_time_permutation_equivariance(frontend, rng):
    frames = rng.uniform(size=(4, 36, 36, 3))
    perm = np.array([2, 0, 3, 1])
    np.testing.assert_allclose(frontend(frames[perm]).data, frontend(frames).data[perm], atol=1e-12)


def test_black_and_white_frames_differ(frontend):
    out = frontend(np.stack([np.zeros((36, 36, 3)), np.ones((36, 36, 3))])).data
    assert not np.allclose(out[0], out[1])


def test_zero_branch_returns_shortcut(rng):
    block = ResidualBlock(4, 4, 1, rng)
    for conv in (block.conv1, block.conv2):
        conv.kernel.data[:] = 0
        conv.bias.data[:] = 0
    x = Tensor(rng.normal(size=(2, 6, 6, 4)))
    np.testing.assert_array_equal(block(x).data, x.data)


def test_block_stride_schedule(rng):
    assert ResidualBlock(16, 24, 2, rng)(Tensor(rng.normal(size=(1, 18, 18, 16)))).shape == (1, 9, 9, 24)
    with pytest.raises(DimensionError):
        ResidualBlock(8, 8, 3, rng)
    with pytest.raises(DimensionError):
        ResidualBlock(8, 16, 2, rng)(Tensor(rng.normal(size=(1, 6, 6, 4))))


def test_block_gradients(rng):
    block = ResidualBlock(2, 3, 2, rng).assign_names()
    x = Tensor(rng.normal(size=(2, 5, 5, 2)), requires_grad=True, name="x")
    r = Tensor(rng.normal(size=(2, 3, 3, 3)))
    rep = gradient_check(lambda: mul(block(x), r).sum(), [x] + block.parameters())
    assert rep.passed, rep


def test_two_frame_end_to_end_gradients():
    rng = np.random.default_rng(1)
    net = VisualFrontend(rng, embed_dim=4).assign_names()
    frames = rng.uniform(size=(2, 36, 36, 3))
    r = Tensor(rng.normal(size=(2, 4)))
    # ~2600 ReLU inputs per frame: a larger step straddles some of their kinks
    rep = gradient_check(lambda: mul(net(frames), r).sum(), net.parameters(), h=1e-7, max_coords=6, seed=2)
    assert rep.passed, rep


def test_frame_file_round_trip(tmp_path, rng):
    frames = rng.uniform(size=(5, 36, 36, 3)).astype(np.float32)
    write_frames(tmp_path / "u.frames", frames)
    raw = (tmp_path / "u.frames").read_bytes()
    assert np.frombuffer(raw[:16], "<i4").tolist() == [5, 36, 36, 3]
    assert np.array_equal(read_frames(tmp_path / "u.frames"), frames)


def test_truncated_frame_file(tmp_path, rng):
    write_frames(tmp_path / "u.frames", rng.uniform(size=(2, 36, 36, 3)))
    (tmp_path / "u.frames").write_bytes((tmp_path / "u.frames").read_bytes()[:-4])
    with pytest.raises(FrameDataError):
        read_frames(tmp_path / "u.frames")


def test_batch_norm_variant_keeps_shapes_and_count(rng):
    fe = VisualFrontend(np.random.default_rng(5), norm="batch")
    assert fe.num_parameters() == GOLDEN_PARAMETER_COUNT
    frames = rng.uniform(size=(4, 36, 36, 3))
    assert fe(frames).shape == (4, 128)
    fe.train(False)
    assert fe(frames).shape == (4, 128)


def test_unknown_norm_is_rejected():
    with pytest.raises(ValueError, match="normalisation"):
        VisualFrontend(np.random.default_rng(0), norm="group")
