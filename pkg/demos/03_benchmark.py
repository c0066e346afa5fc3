"""Prediction quality and closed-loop planning with novel distractors.

Compares raw rollouts with the intervene-reimagine-reinsert pipeline, then
plans on twenty seeded episodes with three planners: the baseline, the
intervened planner and a planner that refuses inputs outside a Lipschitz
trust region fitted on the training data.
"""

from reoi import metrics, trustregion
from common import dataset, model

data = dataset()
m = model(data)

scenes = metrics.make_scenes(0, 30, n_novel=3, layout="random")
for mode in ("baseline", "reoi"):
    r = metrics.eval_pred(m, scenes, mode)
    print(f"{mode:8s} ssim full {r.ssim_full['mean']:.3f}  in-distribution "
          f"{r.ssim_indist['mean']:.3f}  proxy {r.proxy_perceptual_full['mean']:.3f}")

region = trustregion.fit(m, data)
print(f"trust region: {len(region.centers)} centres, radius {region.radius:.2f}, "
      f"L {region.lipschitz:.3f}, bound {region.bound:.2f}")

rep = metrics.bench_planning(m, region, metrics.BenchConfig(episodes=20))
print(f"{'mode':12s} success collision needs-human")
for mode, r in rep.modes.items():
    print(f"{mode:12s} {r['success_rate']:7.2f} {r['collision_rate']:9.2f} "
          f"{r['needs_human_rate']:11.2f}")
