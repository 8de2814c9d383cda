"""Experiment runner: ``prepare``, ``train``, ``eval`` and ``gradcheck``.

Exit codes: 0 ok, 1 check failure, 2 data error, 3 config error.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import __version__, acoustic, corpus
from .acoustic import NoiseSpec
from .corpus import SyntheticSpec
from .decoder import Vocabulary
from .evaluation import ResultRow, ScoredPair, aggregate, format_grid, parse_snr, results_to_csv
from .gradchecks import run_gradchecks
from .models import DISPLAY, ArchConfig, SpeechRecognizer
from .nn_core import precision

log = logging.getLogger("avalign")

EXIT_OK, EXIT_CHECK, EXIT_DATA, EXIT_CONFIG = 0, 1, 2, 3
MODEL_FLAGS = {"a": "A", "av-align": "AV_ALIGN", "av-cat": "AV_CAT"}
NOISE_FLAGS = {"none": "none", "wgn": "white_gaussian", "cafe": "cafeteria", "street": "street"}
NOISE_NAMES = {"white_gaussian": "WGN", "cafeteria": "Cafe", "street": "Street"}


class ConfigError(ValueError):
    pass


class DataError(ValueError):
    pass


@dataclass
class RunConfig:
    model: str = "A"
    noise: str = "none"
    snr_db: list = field(default_factory=lambda: [None])
    seed: int = 0
    precision: int = 32
    max_steps: int = 2000
    batch_size: int = 16
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_norm: float = 1.0
    warmup_steps: int = 0
    checkpoint_every: int = 500
    # architecture
    enc_layers: int = 3
    enc_units: int = 256
    dec_units: int = 256
    heads: int = 4
    mel_bins: int = 30
    visual_dim: int = 128
    att_dim: int = 256
    embed_dim: int = 64
    score: str = "additive"
    fusion_mix: str = "cell_input"
    visual_norm: str = "layer"
    enc_dropout: float = 0.0
    video_embed_norm: bool = True
    # data
    data_dir: str = ""
    out_dir: str = "runs/default"
    manifest: str = ""
    train_clean_eval_noisy: bool = False
    eval_noise_seed: int = 1000
    beam: int = 0
    # synthetic corpus
    synth_seed: int = 0
    synth_n_utterances: int = 50
    synth_chars_min: int = 3
    synth_chars_max: int = 6
    synth_inventory: int = 10
    synth_ambiguity: str = ""
    synth_word_space: bool = False
    synth_tone_fraction: float = 0.05

    def arch(self) -> ArchConfig:
        return ArchConfig(**{k: getattr(self, k) for k in ArchConfig.field_names()})

    def synthetic_spec(self) -> SyntheticSpec:
        pairs = tuple(tuple(p) for p in self.synth_ambiguity.split(",") if p)
        if any(len(p) != 2 for p in pairs):
            raise ConfigError(f"synth_ambiguity must look like 'ab,cd', got {self.synth_ambiguity!r}")
        return SyntheticSpec(seed=self.synth_seed, n_utterances=self.synth_n_utterances,
                             chars_per_utterance=(self.synth_chars_min, self.synth_chars_max),
                             inventory_size=self.synth_inventory, visual_ambiguity_pairs=pairs,
                             word_space=self.synth_word_space, tone_fraction=self.synth_tone_fraction)

    def train_noise(self) -> NoiseSpec:
        snrs = [s for s in self.snr_db if s is not None]
        if self.noise == "none" or self.train_clean_eval_noisy or not snrs:
            return NoiseSpec()
        return NoiseSpec(self.noise, snrs[0], self.seed)


_FIELDS = {f.name: f for f in fields(RunConfig)}


def _coerce(key: str, raw: str):
    if key not in _FIELDS:
        raise ConfigError(f"unknown config key {key!r}")
    default = getattr(RunConfig(), key)
    raw = raw.strip()
    try:
        if key == "snr_db":
            return [parse_snr(s) for s in raw.split(",") if s.strip()]
        if key == "model":
            return MODEL_FLAGS.get(raw.lower(), raw.upper())
        if key == "noise":
            return NOISE_FLAGS.get(raw, raw)
        if isinstance(default, bool):
            if raw.lower() not in ("1", "0", "true", "false", "yes", "no"):
                raise ValueError(raw)
            return raw.lower() in ("1", "true", "yes")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None


def parse_config_text(text: str) -> dict:
    """Flat ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected key=value, got {line!r}")
        k, v = line.split("=", 1)
        out[k.strip()] = _coerce(k.strip(), v)
    return out


def resolve_config(args, base: dict | None = None) -> RunConfig:
    """``base`` (a stored run config), then the config file, ``--set`` items and flags."""
    values = dict(base or {})
    if getattr(args, "config", None):
        values.update(parse_config_text(Path(args.config).read_text(encoding="utf-8")))
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        values[k.strip()] = _coerce(k.strip(), v)
    flag_map = {"model": "model", "noise": "noise", "snr_db": "snr_db", "seed": "seed",
                "precision": "precision", "out": "out_dir", "data": "data_dir", "max_steps": "max_steps"}
    for attr, key in flag_map.items():
        val = getattr(args, attr, None)
        if val is not None:
            values[key] = _coerce(key, str(val))
    if getattr(args, "train_clean_eval_noisy", False):
        values["train_clean_eval_noisy"] = True
    cfg = RunConfig(**values)
    if cfg.model not in DISPLAY:
        raise ConfigError(f"model must be one of {sorted(MODEL_FLAGS)}, got {cfg.model!r}")
    if cfg.noise not in acoustic.NOISE_KINDS:
        raise ConfigError(f"noise must be one of {sorted(NOISE_FLAGS)}, got {cfg.noise!r}")
    if cfg.precision not in (32, 64):
        raise ConfigError("precision must be 32 or 64")
    return cfg


def stored_config(run_dir: Path, keys=None) -> dict:
    """Config recorded in ``run_dir/run.json``, optionally limited to ``keys``."""
    path = Path(run_dir) / "run.json"
    if not path.exists():
        return {}
    raw = json.loads(path.read_text())["config"]
    raw["snr_db"] = [parse_snr(s) for s in raw.get("snr_db", [])]
    return {k: v for k, v in raw.items() if k in _FIELDS and (keys is None or k in keys)}


def config_dict(cfg: RunConfig) -> dict:
    d = asdict(cfg)
    d["snr_db"] = ["clean" if s is None else s for s in cfg.snr_db]
    return d


# ---------------------------------------------------------------------------
# data access


def _data_dir(cfg: RunConfig) -> Path:
    if not cfg.data_dir:
        raise ConfigError("no data directory: pass --data DIR or set data_dir")
    return Path(cfg.data_dir)


def feature_cache_path(data_dir: Path, utt_id: str) -> Path:
    return data_dir / "features" / f"{utt_id}.feat"


def dataset_hash(entries) -> str:
    h = hashlib.sha256()
    for e in sorted(entries, key=lambda e: e.utterance_id):
        h.update(e.utterance_id.encode())
        h.update(e.transcript.encode())
        for p in (e.audio_path, e.video_path):
            if p and os.path.exists(p):
                h.update(Path(p).read_bytes())
    return h.hexdigest()


def load_dataset(cfg: RunConfig, noise: NoiseSpec, with_video: bool):
    data_dir = _data_dir(cfg)
    entries = corpus.read_manifest(data_dir / "manifest.csv")
    utts = []
    for e in entries:
        try:
            utts.append(corpus.load_utterance(e, noise, with_video, feature_cache_path(data_dir, e.utterance_id)))
        except Exception as exc:  # noqa: BLE001
            raise DataError(f"utterance {e.utterance_id}: {exc}") from exc
    return entries, utts


# ---------------------------------------------------------------------------
# commands


def cmd_prepare(cfg: RunConfig) -> int:
    out = Path(cfg.data_dir or cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    vocab = Vocabulary()
    if cfg.manifest:
        entries = corpus.read_manifest(cfg.manifest)
        if Path(cfg.manifest).resolve() != (out / "manifest.csv").resolve():
            corpus.write_manifest(out / "manifest.csv", entries)
    else:
        spec = cfg.synthetic_spec()
        stamp = json.dumps({k: v for k, v in asdict(spec).items() if k != "audio_noise"}, sort_keys=True,
                           default=str)
        marker = out / "prepare.json"
        if marker.exists() and marker.read_text() == stamp and (out / "manifest.csv").exists():
            entries = corpus.read_manifest(out / "manifest.csv")
        else:
            corpus.synthesize_corpus(spec, out)
            marker.write_text(stamp)
            entries = corpus.read_manifest(out / "manifest.csv")

    bad = [(e.utterance_id, "".join(sorted(vocab.invalid_symbols(e.transcript)))) for e in entries
           if not e.transcript or vocab.invalid_symbols(e.transcript)]
    if bad:
        for uid, syms in bad:
            print(f"invalid transcript: {uid}: symbols {syms!r}" if syms else f"empty transcript: {uid}",
                  file=sys.stderr)
        return EXIT_DATA

    (out / "features").mkdir(exist_ok=True)
    total, computed = 0.0, 0
    for e in entries:
        cache = feature_cache_path(out, e.utterance_id)
        try:
            wav = acoustic.read_wav(e.audio_path)
            total += wav.duration
            if cache.exists() and cache.stat().st_mtime >= Path(e.audio_path).stat().st_mtime:
                continue
            acoustic.write_feature_cache(cache, acoustic.audio_features(wav))
            computed += 1
        except (acoustic.AudioDataError, OSError) as exc:
            print(f"data error in utterance {e.utterance_id}: {exc}", file=sys.stderr)
            return EXIT_DATA
    coverage = sorted(set("".join(e.transcript for e in entries)))
    print(f"prepared {len(entries)} utterances, {total:.1f} s of audio, "
          f"{computed} feature files computed, vocabulary coverage {len(coverage)}: {''.join(coverage)!r}")
    return EXIT_OK


def code_version() -> str:
    """Package version plus a digest of the package sources."""
    h = hashlib.sha256()
    root = Path(__file__).resolve().parent
    for src in sorted(root.rglob("*.py")):
        h.update(src.relative_to(root).as_posix().encode())
        h.update(src.read_bytes())
    return f"{__version__}+{h.hexdigest()[:12]}"


def _write_run_manifest(path: Path, cfg: RunConfig, entries, extra=None):
    info = {"config": config_dict(cfg), "seed": cfg.seed, "code_version": code_version(),
            "dataset_hash": dataset_hash(entries), **(extra or {})}
    path.write_text(json.dumps(info, indent=2, sort_keys=True))


def dump_attention(out_dir: Path, aligns: dict) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    for uid, alpha in aligns.items():
        np.savetxt(out_dir / f"{uid}.csv", alpha, delimiter=",", fmt="%.6f")


def cmd_train(cfg: RunConfig, resume: bool = False, dump_att: bool = False) -> int:
    from .training import Trainer, TrainConfig, TrainingDiverged, transcribe_all

    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    handler = logging.FileHandler(out / "train.log")
    handler.setFormatter(logging.Formatter("%(message)s"))
    logging.getLogger("avalign").addHandler(handler)
    try:
        entries, utts = load_dataset(cfg, cfg.train_noise(), with_video=cfg.model != "A")
        dt = np.float64 if cfg.precision == 64 else np.float32
        with precision(cfg.precision):
            model = SpeechRecognizer(cfg.model, cfg.arch(), Vocabulary(), seed=cfg.seed).astype(dt)
            tcfg = TrainConfig(cfg.lr, cfg.beta1, cfg.beta2, cfg.eps, cfg.clip_norm, cfg.batch_size,
                               cfg.max_steps, cfg.seed, log_every=50, warmup_steps=cfg.warmup_steps)
            ckpt = out / "checkpoint.ckpt"
            trainer = Trainer(model, utts, tcfg)
            if resume and ckpt.exists():
                trainer.restore(ckpt)
            else:
                trainer.normalizer = acoustic.FeatureNormalizer.fit([u.audio for u in utts])
            for u in utts:
                u.audio = trainer.normalizer(u.audio)
            _write_run_manifest(out / "run.json", cfg, entries, {"parameters": model.num_parameters()})

            def on_step(tr, loss):
                if cfg.checkpoint_every and tr.progress.step % cfg.checkpoint_every == 0:
                    tr.save(ckpt)

            try:
                trainer.run(cfg.max_steps, on_step=on_step)
            except TrainingDiverged as exc:
                print(f"training aborted: {exc}; last good checkpoint kept at {ckpt}", file=sys.stderr)
                return EXIT_CHECK
            trainer.save(ckpt)
            with open(out / "loss.tsv", "a", encoding="utf-8") as fh:
                for step, value in trainer.history:
                    fh.write(f"{step}\t{value:.6f}\t{trainer.lr_at(step - 1):g}\n")
            if dump_att:
                if cfg.model != "AV_ALIGN":
                    print("--dump-attention only applies to av-align; nothing dumped", file=sys.stderr)
                else:
                    _, aligns = transcribe_all(model, utts)
                    dump_attention(out / "attention", aligns)
        last = trainer.history[-1][1] if trainer.history else float("nan")
        print(f"trained {DISPLAY[cfg.model]} for {trainer.progress.step} steps, final loss {last:.4f}; "
              f"checkpoint {ckpt}")
        return EXIT_OK
    finally:
        logging.getLogger("avalign").removeHandler(handler)
        handler.close()


def check_architecture(cfg: RunConfig, meta: dict, explicit: set) -> None:
    """Compare explicitly configured architecture keys with the checkpoint."""
    stored = meta.get("arch", {})
    diff = [k for k in ArchConfig.field_names() if k in explicit and stored.get(k) != getattr(cfg, k)]
    if "model" in explicit and meta.get("kind") != cfg.model:
        diff.append("model")
    if diff:
        raise ConfigError("checkpoint architecture differs in: " + ", ".join(
            f"{k} (checkpoint {stored.get(k, meta.get('kind'))!r}, config "
            f"{getattr(cfg, k)!r})" for k in diff))


def cmd_eval(cfg: RunConfig, checkpoint: str, noise_kinds, explicit=frozenset(), dump_att=False) -> int:
    from .training import load_model, transcribe_all

    dt = np.float64 if cfg.precision == 64 else np.float32
    with precision(cfg.precision):
        model, norm, meta = load_model(checkpoint, dtype=dt)
        check_architecture(cfg, meta, set(explicit))
        kind = meta["kind"]
        out = Path(cfg.out_dir)
        out.mkdir(parents=True, exist_ok=True)

        def run_condition(noise: NoiseSpec, tag: str):
            entries, utts = load_dataset(cfg, noise, with_video=kind != "A")
            for u in utts:
                u.audio = norm(u.audio) if norm is not None else u.audio
            hyps, aligns = transcribe_all(model, utts, beam=cfg.beam)
            with open(out / f"hyp_{tag}.txt", "w", encoding="utf-8") as fh:
                for uid in sorted(hyps):
                    fh.write(f"{uid}\t{hyps[uid]}\n")
            if dump_att and aligns:
                dump_attention(out / f"attention_{tag}", aligns)
            return aggregate(ScoredPair.score(u.transcript, hyps[u.utterance_id]) for u in utts)

        from .evaluation import grid_sweep

        snrs = [s for s in cfg.snr_db]
        rows = []
        clean = run_condition(NoiseSpec(), "clean") if None in snrs else None
        for nk in noise_kinds:
            if clean is not None:
                rows.append(ResultRow(DISPLAY[kind], NOISE_NAMES.get(nk, nk), None, clean.cer, clean.wer, clean.n_utts))
            for _, snr in grid_sweep([nk], snrs):
                cell = run_condition(NoiseSpec(nk, snr, cfg.eval_noise_seed), f"{nk}_{snr:g}")
                rows.append(ResultRow(DISPLAY[kind], NOISE_NAMES.get(nk, nk), snr, cell.cer, cell.wer, cell.n_utts))
        with open(out / "results.csv", "w", encoding="utf-8") as fh:
            results_to_csv(rows, fh)
        print(format_grid(rows))
    return EXIT_OK


def cmd_gradcheck(h: float = 1e-5, tol: float = 1e-4) -> int:
    failed = []
    for name, rep, secs in run_gradchecks(h=h, tol=tol):
        print(f"{name:18s} max_rel_err={rep.max_rel_error:.3e} h={rep.h:g} tol={rep.tol:g} "
              f"coords={rep.n_checked} {'PASS' if rep.passed else 'FAIL'} ({secs:.1f}s) worst={rep.worst}")
        if not rep.passed:
            failed.append(name)
    if failed:
        print("gradient check failed: " + ", ".join(failed))
        return EXIT_CHECK
    print("all gradient checks passed")
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="avalign", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="flat key=value config file")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--precision", type=int, choices=(32, 64))
        sp.add_argument("--out", help="output directory")
        sp.add_argument("--data", help="prepared dataset directory")

    sp = sub.add_parser("prepare", help="synthesise or ingest a dataset and cache features")
    common(sp)
    sp.add_argument("--manifest", help="CSV manifest of real pre-processed data")

    for name in ("train", "eval"):
        sp = sub.add_parser(name, help=f"{name} a model")
        common(sp)
        sp.add_argument("--model", choices=sorted(MODEL_FLAGS))
        sp.add_argument("--noise", help="none, wgn, cafe, street (eval accepts a comma list)")
        sp.add_argument("--snr-db", dest="snr_db", help="comma list, e.g. clean,10,0,-5")
        sp.add_argument("--dump-attention", action="store_true")
        sp.add_argument("--train-clean-eval-noisy", action="store_true")
        if name == "train":
            sp.add_argument("--max-steps", dest="max_steps", type=int)
            sp.add_argument("--resume", action="store_true", help="continue from the checkpoint in --out")
        else:
            sp.add_argument("--checkpoint", help="defaults to checkpoint.ckpt in --out")

    sp = sub.add_parser("gradcheck", help="finite-difference check of all differentiable components")
    sp.add_argument("--h", type=float, default=1e-5)
    sp.add_argument("--tol", type=float, default=1e-4)
    return p


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    args = build_parser().parse_args(argv)
    try:
        if args.command == "gradcheck":
            return cmd_gradcheck(args.h, args.tol)
        noise_list = None
        if getattr(args, "noise", None) and "," in args.noise:
            noise_list = [NOISE_FLAGS.get(n, n) for n in args.noise.split(",")]
            args.noise = noise_list[0]
        cfg = resolve_config(args)
        if args.command == "prepare":
            if args.manifest:
                cfg.manifest = args.manifest
            return cmd_prepare(cfg)
        if args.command == "train":
            if args.resume:
                cfg = resolve_config(args, base=stored_config(cfg.out_dir))
            return cmd_train(cfg, resume=args.resume, dump_att=args.dump_attention)
        checkpoint = Path(args.checkpoint or Path(cfg.out_dir) / "checkpoint.ckpt")
        inherited = {"model", "data_dir", "beam", *ArchConfig.field_names()}
        cfg = resolve_config(args, base=stored_config(checkpoint.parent, inherited))
        explicit = set(parse_config_text(Path(args.config).read_text())) if args.config else set()
        explicit |= {item.split("=", 1)[0].strip() for item in args.set or []}
        if args.model:
            explicit.add("model")
        kinds = noise_list or ([cfg.noise] if cfg.noise != "none" else [])
        if not kinds:
            kinds = ["white_gaussian", "cafeteria", "street"]
        for k in kinds:
            if k not in acoustic.NOISE_KINDS or k == "none":
                raise ConfigError(f"bad noise kind {k!r} for eval")
        return cmd_eval(cfg, str(checkpoint), kinds, explicit, args.dump_attention)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, acoustic.AudioDataError, corpus.CorpusConfigError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
