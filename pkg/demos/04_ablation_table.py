"""Ablation over training stages and layer count, one seed, desk scale.

Reproduces the *structure* of the staged ablation: first stage only,
first two stages, all three stages, the relation loss removed, a single
disentangled layer, and the everything-in-one-stage variant. Expect the
staged three-stage schedule to lead on target mAP.

Roughly 25 minutes on a desktop CPU; trim `variants` to taste.

    python demos/04_ablation_table.py
"""

from pathlib import Path

from disdet.synthdata import DomainStyle, SceneSpec, generate
from disdet.training import TrainConfig, ablate, format_ablation_table

out_dir = Path("demo_output/ablation")
out_dir.mkdir(parents=True, exist_ok=True)

source_train = generate(SceneSpec(seed=1), DomainStyle.source(), 600, "train", out_dir / "source_train")
target_train = generate(SceneSpec(seed=2), DomainStyle.target(), 600, "train", out_dir / "target_train")
target_eval = generate(SceneSpec(seed=3), DomainStyle.target(), 200, "eval", out_dir / "target_eval")

config = TrainConfig(iterations_phase1=600, iterations_phase2=200, checkpoint_every=0)
variants = (
    "stage1-only",
    "stages1-2",
    "stages1-3",
    "no-relation",
    "one-layer",
    "one-stage-all-losses",
)
rows = ablate(config, variants, seeds=(0,), source_dir=source_train,
              target_dir=target_train, eval_dir=target_eval, out_dir=out_dir / "runs")
print()
print(format_ablation_table(rows, (0,)))
print(f"full table saved to {out_dir / 'runs' / 'ablation.txt'} and ablation.csv")
