"""Edit-distance scoring (CER, blank-split WER) and results grids."""
from __future__ import annotations

import csv
import io
import re
from dataclasses import dataclass

import numpy as np

MODELS = ("A", "AV Cat", "AV Align")
GRID_SNRS = (None, 10.0, 0.0, -5.0)  # None is the clean column
RESULT_FIELDS = ("model", "noise", "snr_db", "cer", "wer", "n_utts")
_KEEP = re.compile(r"[^a-z' ]")


class ScoringError(ValueError):
    pass


def levenshtein(a, b) -> int:
    """Minimum insertions + deletions + substitutions turning ``a`` into ``b``."""
    a, b = list(a), list(b)
    if len(a) < len(b):
        a, b = b, a
    prev = list(range(len(b) + 1))
    for i, x in enumerate(a, 1):
        cur = [i] + [0] * len(b)
        for j, y in enumerate(b, 1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (x != y))
        prev = cur
    return prev[-1]


def normalize_text(text: str) -> str:
    """Lowercase, drop symbols outside the vocabulary, squeeze blanks."""
    return " ".join(_KEEP.sub("", text.lower()).split())


def words(text: str) -> list[str]:
    return text.split(" ") if text else []


def cer(ref: str, hyp: str) -> float:
    if len(ref) == 0:
        raise ScoringError("empty reference transcription")
    return 100.0 * levenshtein(ref, hyp) / len(ref)


def wer(ref: str, hyp: str) -> float:
    rw = [w for w in ref.split(" ") if w]
    if not rw:
        raise ScoringError("reference has no words")
    return 100.0 * levenshtein(rw, [w for w in hyp.split(" ") if w]) / len(rw)


@dataclass
class ScoredPair:
    reference: str
    hypothesis: str
    char_edits: int
    word_edits: int
    ref_chars: int
    ref_words: int

    @classmethod
    def score(cls, reference: str, hypothesis: str) -> "ScoredPair":
        ref, hyp = normalize_text(reference), normalize_text(hypothesis)
        if not ref:
            raise ScoringError("empty reference transcription")
        rw, hw = ref.split(" "), [w for w in hyp.split(" ") if w]
        return cls(ref, hyp, levenshtein(ref, hyp), levenshtein(rw, hw), len(ref), len(rw))


@dataclass
class GridCell:
    cer: float
    wer: float
    n_utts: int


def aggregate(pairs) -> GridCell:
    """Micro average: total edits over total reference length, in percent."""
    pairs = list(pairs)
    if not pairs:
        raise ScoringError("no scored utterances to aggregate")
    ce = sum(p.char_edits for p in pairs)
    cn = sum(p.ref_chars for p in pairs)
    we = sum(p.word_edits for p in pairs)
    wn = sum(p.ref_words for p in pairs)
    return GridCell(100.0 * ce / cn, 100.0 * we / wn, len(pairs))


@dataclass
class ResultRow:
    model: str
    noise: str
    snr_db: float | None  # None = clean
    cer: float
    wer: float
    n_utts: int


def snr_label(snr_db) -> str:
    return "clean" if snr_db is None else f"{snr_db:g}"


def parse_snr(text: str):
    text = str(text).strip().lower()
    return None if text in ("clean", "inf", "none", "") else float(text)


def results_to_csv(rows, fh=None) -> str:
    """Write rows with header ``model,noise,snr_db,cer,wer,n_utts``; CER/WER to 2 decimals."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(RESULT_FIELDS)
    for r in rows:
        w.writerow([r.model, r.noise, snr_label(r.snr_db), f"{r.cer:.2f}", f"{r.wer:.2f}", r.n_utts])
    text = buf.getvalue()
    if fh is not None:
        fh.write(text)
    return text


def results_from_csv(text: str) -> list[ResultRow]:
    rows = []
    reader = csv.DictReader(io.StringIO(text))
    if tuple(reader.fieldnames or ()) != RESULT_FIELDS:
        raise ScoringError(f"unexpected results header {reader.fieldnames}")
    for rec in reader:
        rows.append(ResultRow(rec["model"], rec["noise"], parse_snr(rec["snr_db"]),
                              float(rec["cer"]), float(rec["wer"]), int(rec["n_utts"])))
    return rows


def grid_sweep(noise_kinds, snrs, skip=(("white_gaussian", -5.0),)):
    """(noise, snr) cells of the results grid; -5 dB white noise is omitted by default."""
    cells = []
    for kind in noise_kinds:
        for s in snrs:
            if s is None or (kind, s) in skip:
                continue
            cells.append((kind, s))
    return cells


def check_grid(rows) -> None:
    """Clean CER/WER must be identical across noise rows of the same model."""
    clean = {}
    for r in rows:
        if r.snr_db is None:
            key = (round(r.cer, 2), round(r.wer, 2))
            if clean.setdefault(r.model, key) != key:
                raise ScoringError(f"clean column differs across noise rows for model {r.model}")
        if r.cer < 0 or r.wer < 0:
            raise ScoringError("negative error rate")


def format_grid(rows) -> str:
    """Human-readable ``CER / WER`` table in the appendix layout."""
    cols = ["clean", "10", "0", "-5"]
    table = {}
    for r in rows:
        table.setdefault((r.model, r.noise), {})[snr_label(r.snr_db)] = f"{r.cer:.2f} / {r.wer:.2f}"
    width = max([16] + [len(v) + 2 for cells in table.values() for v in cells.values()])
    lines = ["".ljust(26) + "".join(c.ljust(width) for c in ["clean", "10db", "0db", "-5db"])]
    for (model, noise), cells in table.items():
        lines.append(f"{model} - {noise}".ljust(26) + "".join(cells.get(c, "").ljust(width) for c in cols))
    return "\n".join(lines)


def micro_cer(refs, hyps) -> float:
    return aggregate(ScoredPair.score(r, h) for r, h in zip(refs, hyps)).cer


def summarize(values) -> dict:
    v = np.asarray(list(values), dtype=float)
    return {"median": float(np.median(v)), "min": float(v.min()), "max": float(v.max())}
