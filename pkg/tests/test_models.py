import math

import numpy as np
import pytest

from avalign.acoustic import NoiseSpec
from avalign.corpus import SyntheticSpec, collate
from avalign.decoder import Vocabulary
from avalign.experiments import synthetic_utterances
from avalign.models import ArchConfig, SpeechRecognizer
from avalign.nn_core import gradient_check
from avalign.training import Trainer, TrainConfig, TrainingDiverged, load_model, score_corpus, transcribe_all

TINY = ArchConfig(enc_layers=2, enc_units=6, dec_units=6, heads=2, att_dim=4, embed_dim=4)
TINY_BN_DROP = ArchConfig(enc_layers=2, enc_units=6, dec_units=6, heads=2, att_dim=4, embed_dim=4,
                          visual_norm="batch", enc_dropout=0.3)


@pytest.fixture(scope="module")
def utts():
    return synthetic_utterances(SyntheticSpec(seed=9, n_utterances=6, chars_per_utterance=(2, 3),
                                              inventory_size=4))


def params(model):
    return {k: v.copy() for k, v in model.state_dict().items()}


@pytest.mark.parametrize("kind", ["A", "AV_ALIGN", "AV_CAT"])
def test_initial_loss_near_log_v(kind, utts):
    model = SpeechRecognizer(kind, TINY, Vocabulary(), seed=0)
    loss = model.loss(collate(utts)).item()
    assert abs(loss - math.log(31)) < 0.5


def test_av_align_exposes_alignments(utts):
    model = SpeechRecognizer("AV_ALIGN", TINY, Vocabulary())
    batch = collate(utts[:3])
    hyps, extras = model.transcribe(batch, max_len=4)
    assert len(hyps) == 3
    al = extras["alignments"]
    assert al.shape == (3, batch.audio.shape[1], batch.frames.shape[1])
    for b in range(3):
        rows = al[b, : batch.audio_lengths[b], : batch.video_lengths[b]]
        np.testing.assert_allclose(rows.sum(axis=1), 1.0, atol=1e-6)


def test_av_align_needs_two_audio_layers():
    with pytest.raises(ValueError):
        SpeechRecognizer("AV_ALIGN", ArchConfig(enc_layers=1, enc_units=4), Vocabulary())


def test_audio_visual_models_need_frames(utts):
    batch = collate(utts[:2])
    batch.frames = None
    with pytest.raises(ValueError, match="video"):
        SpeechRecognizer("AV_CAT", TINY, Vocabulary()).loss(batch)


def test_whole_model_gradients_reach_every_parameter(utts):
    model = SpeechRecognizer("AV_ALIGN", TINY, Vocabulary(), seed=1)
    model.loss(collate(utts[:2])).backward()
    missing = [n for n, p in model.named_parameters() if p.grad is None or not np.any(p.grad)]
    assert missing == []


def test_whole_model_gradient_spot_check(utts):
    model = SpeechRecognizer("AV_ALIGN", TINY, Vocabulary(), seed=2)
    batch = collate(utts[:2])
    picks = [p for n, p in model.named_parameters() if n.startswith(("fusion.", "video_encoder.", "decoder.attn"))]
    rep = gradient_check(lambda: model.loss(batch), picks, h=1e-5, max_coords=3)
    assert rep.passed, rep


def _trainer(utts, kind="AV_ALIGN", steps=6, arch=TINY, warmup=0):
    model = SpeechRecognizer(kind, arch, Vocabulary(), seed=4)
    return Trainer(model, utts, TrainConfig(lr=5e-3, batch_size=4, max_steps=steps, seed=1, log_every=0,
                                            warmup_steps=warmup))


@pytest.mark.parametrize("arch,warmup", [(TINY, 0), (TINY_BN_DROP, 0), (TINY, 5)],
                         ids=["default", "batchnorm-dropout", "warmup"])
def test_resume_reproduces_trajectory_bit_exactly(tmp_path, utts, arch, warmup):
    full = _trainer(utts, arch=arch, warmup=warmup)
    full.run()
    part = _trainer(utts, arch=arch, warmup=warmup)
    part.run(max_steps=3)
    part.save(tmp_path / "c.ckpt")
    resumed = _trainer(utts, arch=arch, warmup=warmup)
    resumed.restore(tmp_path / "c.ckpt")
    assert resumed.progress.step == 3
    resumed.run()
    a, b = params(full.model), params(resumed.model)
    assert all(np.array_equal(a[k], b[k]) for k in a)
    assert [v for _, v in full.history[3:]] == [v for _, v in resumed.history]


@pytest.mark.parametrize("arch", [TINY, TINY_BN_DROP], ids=["default", "batchnorm-dropout"])
def test_checkpoint_rebuilds_model(tmp_path, utts, arch):
    tr = _trainer(utts, kind="AV_CAT", steps=2, arch=arch)
    tr.run()
    tr.save(tmp_path / "m.ckpt")
    model, _, meta = load_model(tmp_path / "m.ckpt")
    assert meta["kind"] == "AV_CAT" and meta["arch"]["enc_units"] == 6
    a, b = params(tr.model), params(model)
    assert all(np.array_equal(a[k], b[k]) for k in a)
    h1, _ = transcribe_all(tr.model, utts)
    h2, _ = transcribe_all(model, utts)
    assert h1 == h2


def test_warmup_ramps_linearly_then_holds(utts):
    tr = _trainer(utts, warmup=4)
    assert [tr.lr_at(s) for s in range(6)] == pytest.approx([1.25e-3, 2.5e-3, 3.75e-3, 5e-3, 5e-3, 5e-3])
    tr.run(max_steps=2)
    assert tr.opt.lr == pytest.approx(2.5e-3)
    assert _trainer(utts).lr_at(0) == 5e-3


def test_nan_loss_aborts(utts):
    tr = _trainer(utts, kind="A")
    tr.model.decoder.output.b.data[:] = np.nan
    with pytest.raises(TrainingDiverged):
        tr.run()


def test_training_lowers_loss_and_scores(utts):
    tr = _trainer(utts, kind="A", steps=40)
    tr.run()
    assert np.mean([v for _, v in tr.history[-5:]]) < tr.history[0][1]
    cell, hyps = score_corpus(tr.model, utts)
    assert cell.n_utts == len(utts) and set(hyps) == {u.utterance_id for u in utts}


def test_inference_is_deterministic_with_dropout_and_batchnorm(utts):
    model = _trainer(utts, arch=TINY_BN_DROP).model
    batch = collate(utts[:3])
    assert model.transcribe(batch, max_len=5)[0] == model.transcribe(batch, max_len=5)[0]
    assert model.training  # restored after decoding


def test_video_embeddings_are_normalised_before_the_encoder(utts):
    model = SpeechRecognizer("AV_CAT", TINY, Vocabulary(), seed=3)
    frames = np.concatenate([u.frames for u in utts[:2]])
    emb = model.embed_norm(model.visual(frames)).data
    np.testing.assert_allclose(emb.mean(axis=-1), 0.0, atol=1e-9)
    np.testing.assert_allclose(emb.std(axis=-1), 1.0, atol=1e-3)
    bare = SpeechRecognizer("AV_CAT", ArchConfig(**{**TINY.as_dict(), "video_embed_norm": False}), Vocabulary())
    assert not hasattr(bare, "embed_norm")
    assert model.num_parameters() == bare.num_parameters() + 2 * TINY.visual_dim


def test_video_embedding_scale_stays_bounded_in_training(utts):
    model = SpeechRecognizer("AV_CAT", TINY, Vocabulary(), seed=3)
    Trainer(model, utts, TrainConfig(lr=5e-3, batch_size=4, max_steps=20, log_every=0)).run()
    frames = np.concatenate([u.frames for u in utts])
    emb = model.embed_norm(model.visual(frames)).data
    # gamma and beta move by at most about lr per step
    assert np.abs(emb).max() < 20 * (1 + 20 * 5e-3)


def test_noise_draws_share_video_but_not_audio():
    spec = SyntheticSpec(seed=3, n_utterances=2, chars_per_utterance=(2, 2), inventory_size=4)
    utts = synthetic_utterances(spec, NoiseSpec("white_gaussian", 0.0, 5), draws=3)
    first = utts[0].utterance_id
    assert [u.utterance_id for u in utts[:3]] == [first, f"{first}~1", f"{first}~2"]
    assert utts[1].frames is utts[0].frames and utts[1].transcript == utts[0].transcript
    assert not np.allclose(utts[1].audio, utts[0].audio)
    single = synthetic_utterances(spec, NoiseSpec("white_gaussian", 0.0, 5))
    np.testing.assert_array_equal(single[0].audio, utts[0].audio)
