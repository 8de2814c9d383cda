"""Look inside the fusion layer: every audio step attends over every video frame,
no matter how the two frame rates relate."""
import numpy as np

from avalign.fusion import AVAlignLayer, check_alignment
from avalign.nn_core import Tensor

rng = np.random.default_rng(0)
layer = AVAlignLayer(d_audio=6, d_video=4, units=8, d_att=5, rng=rng)

for ta, tv in [(10, 3), (33, 10), (7, 19)]:
    audio = Tensor(rng.normal(size=(1, ta, 6)))
    video = Tensor(rng.normal(size=(1, tv, 4)))
    out = layer(audio, [ta], video, [tv])
    alpha = out.alignments[0]
    check_alignment(out.alignments)
    print(f"T_a={ta:2d} T_v={tv:2d}: memory {out.memory.shape}, alignment {alpha.shape}, "
          f"rows sum to 1 within {np.abs(alpha.sum(1) - 1).max():.1e}")

np.set_printoptions(precision=2, suppress=True)
print("\nuntrained 10x3 alignment (rows = audio steps):")
out = layer(Tensor(rng.normal(size=(1, 10, 6))), [10], Tensor(rng.normal(size=(1, 3, 4))), [3])
print(out.alignments[0])

# padding: the second item has only 2 valid frames, so its third column stays at zero
out = layer(Tensor(rng.normal(size=(2, 4, 6))), [4, 4], Tensor(rng.normal(size=(2, 3, 4))), [3, 2])
print("\nwith a padded video frame:")
print(out.alignments[1])
