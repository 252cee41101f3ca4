"""
The four-stage adaptation pipeline, end to end
===============================================

1. train a Class-Encoder on the frozen backbone
2. search (IS, UGS, encoder epoch) for the best classification accuracy score
3. fine-tune the denoiser with that encoder frozen
4. search again inside the shrunk box, then generate x1..xK datasets

Budgets here are tiny so the script finishes in a few minutes on a laptop;
the acceptance suite uses larger ones.
"""

import tempfile
from pathlib import Path

from synthcas import (ClassifierConfig, DiffusionConfig, PipelineConfig, TrainConfig, TrainingPolicy,
                      build_report, make_toy_dataset, pretrain_backbone, run_pipeline)

work = Path(tempfile.mkdtemp())
diff = DiffusionConfig(base_width=8, levels=2, resolution=16, sample_batch=100)

# the "pretrained model": shapes the target task never uses
source = make_toy_dataset(80, num_classes=3, resolution=32, seed=0, class_offset=3)
pretrain_backbone(source, diff, TrainConfig(epochs=20, batch_size=32, lr=2e-3), work / "backbone")

train = make_toy_dataset(60, num_classes=3, resolution=32, seed=1)
test = make_toy_dataset(60, num_classes=3, resolution=32, seed=1, split="test")
cfg = PipelineConfig(
    name="demo", dataset_name="toy", seed=0,
    stage1=TrainConfig(epochs=4, batch_size=32, lr=1e-2),
    stage3=TrainConfig(epochs=2, batch_size=16, lr=1e-3),
    hpo_trials=8, n_startup=4, eval_size=90, factors=(1, 2, 4), diffusion=diff,
    classifier=ClassifierConfig(3, 8, 1), policy=TrainingPolicy(epochs=6, batch_size=32),
)
report = run_pipeline(cfg, train, test, work / "backbone", work / "runs" / "demo")

for s in report.stages:
    print(f"after {s.stage}: CAS {s.cas:.3f}  {s.seconds:6.1f}s  {s.forward_evals:7d} evals  "
          f"IS={s.params.IS} UGS={s.params.UGS:.2f} epoch={s.params.epoch}")
for r in report.sweep:
    print(f"{r.label:>4}: {r.accuracy:.3f}")

# tables, importance csv and the bar chart
print(build_report(work / "runs" / "demo", work / "report"))
