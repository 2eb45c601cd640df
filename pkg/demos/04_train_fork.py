"""Short training run on the synthetic fork, then a before/after report.

Uses a reduced corpus so the demo finishes in about two minutes; the
full, seed-pinned experiment lives in tests/test_acceptance.py.
"""

from trajflow.metrics import evaluate
from trajflow.model import ModelConfig, constant_velocity_baseline, init_params
from trajflow.synthetic import synth_fork
from trajflow.training import (TrainSettings, evaluate_model,
                               prepare_episodes, train)

train_set, stats = prepare_episodes(synth_fork(60, seed=1), 64)
val_set, _ = prepare_episodes(synth_fork(20, seed=2), 64, stats)
print(f"prepared {len(train_set)} train / {len(val_set)} val episodes")

cfg = ModelConfig()
params = init_params(cfg, seed=0)

before, _ = evaluate_model(val_set, params, cfg, k=12, seed=5)
print("\nuntrained:")
print(before.to_table())

settings = TrainSettings(seed=0, alpha=0.5, beta=0.1, lr=2e-3, epochs=3,
                         k=6, n_samples=2)
result = train(train_set, val_set, params, cfg, settings)
print(f"\ntrained for {result.steps} steps; per-epoch log:")
for row in result.log:
    print(f"  epoch {row['epoch']}: loss {row['train_loss']:.3f} "
          f"(fwd {row['forward_ce']:.3f} rev {row['reverse_ce']:.3f}) "
          f"val avgFDE {row['val_avgFDE']:.2f}")

after, _ = evaluate_model(val_set, params, cfg, k=12, seed=5)
print("\ntrained:")
print(after.to_table())

cv = evaluate([p.episode for p in val_set],
              [constant_velocity_baseline(p.episode) for p in val_set])[0]
print(f"\nconstant-velocity baseline minFDE: {cv.min_fde:.3f}")
print(f"trained model minFDE:              {after.min_fde:.3f}")
