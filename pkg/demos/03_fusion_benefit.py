"""A small version of the fusion experiment: audio at 0 dB white noise, video that
separates every letter except two confusable pairs.

Takes a few minutes. Pass a step count to go longer, e.g. ``python3 03_fusion_benefit.py 6000``.
"""
import sys

from avalign.experiments import FusionSetup, build_fusion_data, run_fusion_model

steps = int(sys.argv[1]) if len(sys.argv) > 1 else 1500
# a short warmup matters here too: without it the first optimiser steps collapse
# the glyph embeddings and the fusion models fall back on audio alone
setup = FusionSetup(steps=steps, warmup_steps=min(1000, steps // 5), n_train=800, n_test=50)
train, test = build_fusion_data(setup)
print(f"{len(train)} training and {len(test)} test utterances, {steps} steps each\n")

for kind in ("A", "AV_CAT", "AV_ALIGN"):
    run = run_fusion_model(kind, seed=0, train=train, test=test, setup=setup)
    print(f"{kind:9s} CER {run.cer:6.2f}  WER {run.wer:6.2f}  ({run.seconds:.0f}s)")
