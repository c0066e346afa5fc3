"""How quickly do unfamiliar objects fade in the model's imagination?

Thirty scenes, each with one novel distractor among training-coloured
obstacles.  Novel segments lose most of their structure within five
predicted frames, while familiar ones persist.
"""

import numpy as np

from reoi import distractor, metrics
from common import model

m = model()
scenes = metrics.make_scenes(0, 30, n_novel=1, layout="blocking")

study = metrics.persistence_study(m, scenes)
print(f"novel segments    n={len(study.novel):3d} median persistence {study.novel_median:.3f}")
print(f"training segments n={len(study.training):3d} median persistence {study.training_median:.3f}")

# a coarse text histogram of both populations
bins = np.linspace(0, 1, 11)
for name, vals in (("novel", study.novel), ("training", study.training)):
    counts, _ = np.histogram(vals, bins)
    print(f"{name:9s}", " ".join(f"{c:2d}" for c in counts))
print(" " * 10 + " ".join(f"{b:.1f}"[1:] for b in bins[:-1]))

# sweep the threshold and watch precision and recall trade off
for tau in (0.3, 0.45, distractor.TAU, 0.75, 0.9):
    q = metrics.identification_quality(m, scenes, tau)
    print(f"tau {tau:.2f}: precision {q['precision']:.2f} recall {q['recall']:.2f}")
