"""
Toy shapes and the evaluation classifier
=========================================

The toy generator draws one coloured shape per class.  A classifier trained
on real toy images sets the ceiling that synthetic data is compared against.
"""

import numpy as np
from synthcas import ClassifierConfig, TrainingPolicy, accuracy, make_toy_dataset, train_classifier

# 3 classes at 32x32; the test split uses a different random stream
train = make_toy_dataset(100, num_classes=3, resolution=32, seed=1)
test = make_toy_dataset(100, num_classes=3, resolution=32, seed=1, split="test")
print(train.class_names, train.class_distribution(), train.images.shape)

# pixel values are already in [-1, 1]
print("range:", train.images.min(), train.images.max())

# a narrow ResNet is plenty for flat shapes
cfg = ClassifierConfig(num_classes=3, base_width=8, blocks_per_stage=1)
policy = TrainingPolicy(epochs=8, batch_size=64, plateau_patience=3, early_stopping_patience=5)
clf = train_classifier(cfg, policy, train, seed=0)
print(f"real -> real accuracy: {accuracy(clf, test):.3f} after {clf.epochs_run} epochs")

# per-epoch history feeds the pruner during a search
for h in clf.history[:3]:
    print({k: round(v, 4) if isinstance(v, float) else v for k, v in h.items()})
