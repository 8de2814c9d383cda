import json
import re

import numpy as np
import pytest

from avalign import cli
from avalign.evaluation import results_from_csv
from avalign.nn_core import load_arrays

TINY = ["enc_layers=2", "enc_units=8", "dec_units=8", "heads=2", "att_dim=4", "embed_dim=4",
        "batch_size=4", "synth_chars_min=2", "synth_chars_max=3", "synth_inventory=4"]


def sets(*items):
    return [a for kv in items for a in ("--set", kv)]


@pytest.fixture(scope="module")
def data(tmp_path_factory):
    root = tmp_path_factory.mktemp("data")
    assert cli.main(["prepare", "--data", str(root)] + sets(*TINY, "synth_n_utterances=6")) == 0
    return root


def train(data, out, *extra, model="a", steps=4):
    return cli.main(["train", "--data", str(data), "--out", str(out), "--model", model,
                     "--set", f"max_steps={steps}"] + sets(*TINY) + list(extra))


# -- config -------------------------------------------------------------------

def test_config_file_and_overrides(tmp_path):
    (tmp_path / "c.cfg").write_text("# comment\nenc_units = 32\nsnr_db = clean, 10, -5\nnoise = wgn\n")
    args = cli.build_parser().parse_args(["train", "--config", str(tmp_path / "c.cfg"), "--seed", "7",
                                          "--model", "av-cat"])
    cfg = cli.resolve_config(args)
    assert (cfg.enc_units, cfg.seed, cfg.model, cfg.noise) == (32, 7, "AV_CAT", "white_gaussian")
    assert cfg.snr_db == [None, 10.0, -5.0]


def test_architecture_defaults():
    cfg = cli.RunConfig()
    assert (cfg.enc_layers, cfg.enc_units, cfg.dec_units, cfg.heads, cfg.mel_bins, cfg.visual_dim) == \
        (3, 256, 256, 4, 30, 128)


def test_unknown_key_is_config_error(tmp_path, capsys):
    (tmp_path / "c.cfg").write_text("enc_unitz = 3\n")
    assert cli.main(["train", "--config", str(tmp_path / "c.cfg")]) == 3
    assert "enc_unitz" in capsys.readouterr().err


def test_bad_value_is_config_error(capsys):
    assert cli.main(["train", "--set", "max_steps=lots"]) == 3


# -- prepare ------------------------------------------------------------------

def test_prepare_fifty(tmp_path, capsys):
    assert cli.main(["prepare", "--data", str(tmp_path), "--set", "synth_n_utterances=50"]) == 0
    assert len(list((tmp_path / "audio").glob("*.wav"))) == 50
    assert len(list((tmp_path / "video").glob("*.frames"))) == 50
    assert len(list((tmp_path / "features").glob("*.feat"))) == 50
    out = capsys.readouterr().out
    assert "50 utterances" in out and "s of audio" in out and "vocabulary coverage" in out


def test_prepare_rerun_uses_cache(data, capsys):
    feats = sorted((data / "features").iterdir())
    before = {p.name: (p.stat().st_mtime_ns, p.read_bytes()) for p in feats}
    assert cli.main(["prepare", "--data", str(data)] + sets(*TINY, "synth_n_utterances=6")) == 0
    assert "0 feature files computed" in capsys.readouterr().out
    assert {p.name: (p.stat().st_mtime_ns, p.read_bytes()) for p in feats} == before


def test_prepare_corrupt_wav_names_utterance(tmp_path, capsys):
    assert cli.main(["prepare", "--data", str(tmp_path), "--set", "synth_n_utterances=3"]) == 0
    bad = sorted((tmp_path / "audio").glob("*.wav"))[1]
    bad.write_bytes(b"RIFFjunk")
    for f in (tmp_path / "features").iterdir():
        f.unlink()
    assert cli.main(["prepare", "--data", str(tmp_path), "--set", "synth_n_utterances=3"]) == 2
    assert bad.stem in capsys.readouterr().err


def test_prepare_invalid_transcripts_listed(tmp_path, capsys):
    assert cli.main(["prepare", "--data", str(tmp_path / "src"), "--set", "synth_n_utterances=2"]) == 0
    text = (tmp_path / "src" / "manifest.csv").read_text().splitlines()
    uid = text[1].split(",")[0]
    text[1] = ",".join(text[1].split(",")[:3] + ["bad#text"])
    (tmp_path / "src" / "manifest.csv").write_text("\n".join(text) + "\n")
    code = cli.main(["prepare", "--data", str(tmp_path / "out"), "--manifest", str(tmp_path / "src" / "manifest.csv")])
    assert code == 2
    assert uid in capsys.readouterr().err


# -- train --------------------------------------------------------------------

def test_train_writes_checkpoint_log_and_manifest(data, tmp_path):
    assert train(data, tmp_path / "run", "--seed", "3") == 0
    run = json.loads((tmp_path / "run" / "run.json").read_text())
    assert run["seed"] == 3 and len(run["dataset_hash"]) == 64
    assert re.fullmatch(r"\d+\.\d+\.\d+\+[0-9a-f]{12}", run["code_version"])
    assert run["config"]["enc_units"] == 8 and run["config"]["model"] == "A"
    log = (tmp_path / "run" / "loss.tsv").read_text().splitlines()
    assert len(log) == 4 and len(log[0].split("\t")) == 3
    assert (tmp_path / "run" / "checkpoint.ckpt").exists()


def test_loss_log_records_the_warmup_ramp(data, tmp_path):
    assert train(data, tmp_path / "run", "--set", "warmup_steps=2", "--set", "lr=0.004") == 0
    rows = (tmp_path / "run" / "loss.tsv").read_text().splitlines()
    assert [float(r.split("\t")[2]) for r in rows] == [0.002, 0.004, 0.004, 0.004]


def test_train_dumps_attention(data, tmp_path):
    assert train(data, tmp_path / "run", "--dump-attention", model="av-align", steps=2) == 0
    dumps = sorted((tmp_path / "run" / "attention").glob("*.csv"))
    assert len(dumps) == 6
    alpha = np.loadtxt(dumps[0], delimiter=",", ndmin=2)
    np.testing.assert_allclose(alpha.sum(axis=1), 1.0, atol=1e-5)
    assert alpha.shape[0] > alpha.shape[1]


def test_resume_continues_the_64bit_trajectory(data, tmp_path):
    assert train(data, tmp_path / "full", "--precision", "64", steps=4) == 0
    assert train(data, tmp_path / "part", "--precision", "64", steps=2) == 0
    assert train(data, tmp_path / "part", "--precision", "64", "--resume", steps=4) == 0
    a = load_arrays(tmp_path / "full" / "checkpoint.ckpt")
    b = load_arrays(tmp_path / "part" / "checkpoint.ckpt")
    for k in a:
        if k.startswith(("param/", "opt/")):
            assert np.array_equal(a[k], b[k]), k


def test_nan_keeps_last_good_checkpoint(data, tmp_path, monkeypatch, capsys):
    from avalign import models
    from avalign.nn_core import Tensor

    real = models.SpeechRecognizer.loss
    calls = {"n": 0}

    def flaky(self, batch):
        calls["n"] += 1
        loss = real(self, batch)
        return loss * Tensor(np.nan, dtype=loss.data.dtype) if calls["n"] > 3 else loss

    monkeypatch.setattr(models.SpeechRecognizer, "loss", flaky)
    assert train(data, tmp_path / "run", "--set", "checkpoint_every=2", steps=6) == 1
    assert "last good checkpoint" in capsys.readouterr().err
    assert load_arrays(tmp_path / "run" / "checkpoint.ckpt")["meta/progress"][0] == 2


# -- eval ---------------------------------------------------------------------

@pytest.fixture(scope="module")
def trained(data, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    assert train(data, out, model="av-align", steps=2) == 0
    return out / "checkpoint.ckpt"


def test_eval_full_grid(data, trained, tmp_path):
    code = cli.main(["eval", "--data", str(data), "--checkpoint", str(trained), "--out", str(tmp_path),
                     "--noise", "wgn,cafe,street", "--snr-db", "clean,10,0,-5"] + sets(*TINY))
    assert code == 0
    text = (tmp_path / "results.csv").read_text()
    rows = results_from_csv(text)
    assert len(rows) == 11
    assert {r.model for r in rows} == {"AV Align"}
    assert not any(r.noise == "WGN" and r.snr_db == -5.0 for r in rows)
    assert len({(r.cer, r.wer) for r in rows if r.snr_db is None}) == 1
    hyp = (tmp_path / "hyp_clean.txt").read_text().splitlines()
    assert len(hyp) == 6 and all("\t" in line for line in hyp)
    assert [line.split("\t")[0] for line in hyp] == sorted(line.split("\t")[0] for line in hyp)


def test_eval_architecture_mismatch_names_field(data, trained, tmp_path, capsys):
    code = cli.main(["eval", "--data", str(data), "--checkpoint", str(trained), "--out", str(tmp_path),
                     "--noise", "wgn", "--snr-db", "0"] + sets(*TINY, "heads=4"))
    assert code == 3
    assert "heads" in capsys.readouterr().err


def test_memorised_model_scores_zero(tmp_path):
    small = TINY[:-3] + ["synth_chars_min=2", "synth_chars_max=2", "synth_inventory=3", "synth_n_utterances=3",
                         "enc_units=16", "dec_units=16", "lr=0.01"]
    assert cli.main(["prepare", "--data", str(tmp_path / "d")] + sets(*small)) == 0
    assert cli.main(["train", "--data", str(tmp_path / "d"), "--out", str(tmp_path / "r"), "--model", "a",
                     "--set", "max_steps=300"] + sets(*small)) == 0
    assert cli.main(["eval", "--data", str(tmp_path / "d"), "--checkpoint", str(tmp_path / "r" / "checkpoint.ckpt"),
                     "--out", str(tmp_path / "e"), "--noise", "wgn", "--snr-db", "clean"] + sets(*small)) == 0
    row = results_from_csv((tmp_path / "e" / "results.csv").read_text())[0]
    assert row.snr_db is None and row.cer == 0.0


# -- gradcheck ----------------------------------------------------------------

def test_gradcheck_passes(capsys):
    assert cli.main(["gradcheck"]) == 0
    out = capsys.readouterr().out
    for name in ("conv_block", "lstm_stack", "av_align_fusion", "decoder_step"):
        assert name in out
    assert "h=1e-05" in out and "tol=0.0001" in out


def test_gradcheck_catches_corrupted_adjoint(monkeypatch, capsys):
    from avalign.nn_core import functional

    real = functional._cell_backward

    def broken(*args):
        dz, dc = real(*args)
        return dz * 1.01, dc

    monkeypatch.setattr(functional, "_cell_backward", broken)
    assert cli.main(["gradcheck"]) == 1
    out = capsys.readouterr().out
    assert "FAIL" in out and "av_align_fusion" in out.splitlines()[-1]


def test_resume_and_eval_inherit_the_run_config(data, tmp_path):
    out = tmp_path / "run"
    assert train(data, out, model="av-align", steps=2) == 0
    # no --model, --data or architecture flags: all come from run.json
    assert cli.main(["train", "--out", str(out), "--resume", "--max-steps", "3"]) == 0
    assert int(load_arrays(out / "checkpoint.ckpt")["meta/progress"][0]) == 3
    assert cli.main(["eval", "--out", str(out), "--noise", "wgn", "--snr-db", "clean,0"]) == 0
    rows = results_from_csv((out / "results.csv").read_text())
    assert [r.model for r in rows] == ["AV Align", "AV Align"]
