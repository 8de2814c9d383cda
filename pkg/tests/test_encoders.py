import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from avalign.encoders import PaddedBatch, SequenceDataError, StackedEncoder, encode
from avalign.nn_core import DimensionError, Tensor, gradient_check
from avalign.nn_core.tensor import mul


@pytest.fixture
def enc(rng):
    return StackedEncoder(5, 6, 3, rng)


def test_length_one_memory_is_top_h(enc, rng):
    out = encode(enc, PaddedBatch(rng.normal(size=(1, 1, 5)), [1]))
    assert out.memory.shape == (1, 1, 6)
    np.testing.assert_array_equal(out.memory.data[:, 0], out.summary[-1][0].data)


def test_padding_invariance(enc, rng):
    seqs = [rng.normal(size=(3, 5)), rng.normal(size=(5, 5))]
    both = enc(PaddedBatch.from_sequences(seqs))
    alone = enc(PaddedBatch.from_sequences(seqs[:1]))
    np.testing.assert_allclose(both.summary_vector().data[0], alone.summary_vector().data[0], atol=1e-12)
    np.testing.assert_allclose(both.memory.data[0, :3], alone.memory.data[0], atol=1e-12)
    np.testing.assert_array_equal(both.memory.data[0, 3:], 0.0)


@settings(max_examples=20, deadline=None)
@given(st.lists(st.integers(1, 9), min_size=1, max_size=5), st.integers(0, 999))
def test_padding_invariance_property(lengths, seed):
    rng = np.random.default_rng(seed)
    enc = StackedEncoder(4, 3, 2, rng)
    seqs = [rng.normal(size=(n, 4)) for n in lengths]
    batch = enc(PaddedBatch.from_sequences(seqs))
    assert batch.memory.shape[1] == max(lengths)
    for b, s in enumerate(seqs):
        one = enc(PaddedBatch.from_sequences([s]))
        assert np.abs(batch.memory.data[b, : len(s)] - one.memory.data[0]).max() < 1e-6
        assert np.abs(batch.summary_vector().data[b] - one.summary_vector().data[0]).max() < 1e-6


def test_mask_row_sums_are_lengths(rng):
    pb = PaddedBatch.from_sequences([rng.normal(size=(n, 2)) for n in (4, 1, 3)])
    assert pb.mask.sum(axis=1).tolist() == [4, 1, 3]


def test_zero_length_item_is_data_error():
    with pytest.raises(SequenceDataError):
        PaddedBatch(np.zeros((2, 3, 4)), [3, 0])


def test_feature_dim_checked(enc):
    with pytest.raises(DimensionError):
        enc(PaddedBatch(np.zeros((1, 2, 4)), [2]))


def test_one_second_audio_and_video_lengths(rng):
    from avalign import acoustic
    from avalign.acoustic import Waveform

    feats = acoustic.audio_features(Waveform(rng.normal(size=22050) * 0.1, 22050))
    a = StackedEncoder(90, 8, 3, rng)(PaddedBatch(feats[None], [feats.shape[0]]))
    v = StackedEncoder(128, 8, 3, rng)(PaddedBatch(rng.normal(size=(1, 30, 128)), [30]))
    assert a.memory.shape[1] == 98 and v.memory.shape[1] == 30
    assert 98 / 30 == pytest.approx(10 / 3, rel=0.03)


def test_summary_carries_every_layer(enc, rng):
    out = enc(PaddedBatch(rng.normal(size=(2, 4, 5)), [4, 2]))
    assert len(out.summary) == 3
    assert out.summary_vector().shape == (2, 36)


def test_stack_gradients(rng):
    enc = StackedEncoder(3, 4, 2, rng).assign_names()
    x = Tensor(rng.normal(size=(2, 3, 3)), requires_grad=True, name="x")
    r, s = Tensor(rng.normal(size=(2, 3, 4))), Tensor(rng.normal(size=(2, 16)))

    def f():
        out = enc(PaddedBatch(x, np.array([3, 2])))
        return mul(out.memory, r).sum() + mul(out.summary_vector(), s).sum()

    rep = gradient_check(f, [x] + enc.parameters())
    assert rep.passed, rep


def test_dropout_changes_training_but_not_inference(rng):
    enc = StackedEncoder(3, 4, 3, np.random.default_rng(1), dropout=0.5)
    plain = StackedEncoder(3, 4, 3, np.random.default_rng(1))
    x = PaddedBatch(rng.normal(size=(2, 5, 3)), [5, 4])
    assert not np.allclose(enc(x).memory.data, plain(x).memory.data)
    enc.train(False)
    np.testing.assert_array_equal(enc(x).memory.data, plain(x).memory.data)
