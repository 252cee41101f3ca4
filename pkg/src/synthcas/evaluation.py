"""Classification Accuracy Score (CAS) evaluation.

A CIFAR-style ResNet20 is trained on synthetic images only and scored on a
real test set.  Training follows a fixed policy: Adam, label smoothing,
reduce-on-plateau and early stopping, no augmentation.
"""

from __future__ import annotations

import copy
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .data import LabeledDataset, stratified_split
from .diffusion import ForwardCounter


class ProvenanceError(Exception):
    """CAS was requested for a classifier that saw real training data."""


# ---------------------------------------------------------------------------
# Model
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ClassifierConfig:
    num_classes: int = 10
    base_width: int = 16
    blocks_per_stage: int = 3
    in_channels: int = 3


class BasicBlock(nn.Module):
    def __init__(self, c_in: int, c_out: int, stride: int):
        super().__init__()
        self.conv1 = nn.Conv2d(c_in, c_out, 3, stride=stride, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(c_out)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(c_out)
        self.stride = stride
        self.pad = c_out - c_in

    def shortcut(self, x):
        # parameter-free: subsample and zero-pad the channel dimension
        if self.stride != 1:
            x = x[:, :, ::self.stride, ::self.stride]
        if self.pad:
            x = F.pad(x, (0, 0, 0, 0, self.pad // 2, self.pad - self.pad // 2))
        return x

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return F.relu(out + self.shortcut(x))


class ResNet(nn.Module):
    """CIFAR ResNet: 3x3 stem, three stages of basic blocks, GAP, linear head.

    The default config is ResNet20 (3 blocks per stage, widths 16/32/64).
    """

    def __init__(self, cfg: ClassifierConfig):
        super().__init__()
        w = cfg.base_width
        self.stem = nn.Conv2d(cfg.in_channels, w, 3, padding=1, bias=False)
        self.bn = nn.BatchNorm2d(w)
        blocks, c = [], w
        for stage, width in enumerate((w, 2 * w, 4 * w)):
            for b in range(cfg.blocks_per_stage):
                stride = 2 if stage > 0 and b == 0 else 1
                blocks.append(BasicBlock(c, width, stride))
                c = width
        self.blocks = nn.Sequential(*blocks)
        self.fc = nn.Linear(c, cfg.num_classes)
        for m in self.modules():
            if isinstance(m, nn.Conv2d):
                nn.init.kaiming_normal_(m.weight, mode="fan_out", nonlinearity="relu")

    def forward(self, x):
        x = F.relu(self.bn(self.stem(x)))
        x = self.blocks(x)
        return self.fc(x.mean(dim=(2, 3)))


def resnet20(num_classes: int = 10) -> ResNet:
    return ResNet(ClassifierConfig(num_classes=num_classes))


# ---------------------------------------------------------------------------
# Loss and schedule
# ---------------------------------------------------------------------------

def smoothed_cross_entropy(logits, labels, eps: float = 0.1) -> torch.Tensor:
    """Cross-entropy against ``(1 - eps)`` on the label plus ``eps / C`` everywhere.

    Accepts a single logit vector with an integer label, or a batch; the
    batch result is the mean.
    """
    if not 0.0 <= eps < 1.0:
        raise ValueError("label smoothing must lie in [0, 1)")
    logits = torch.as_tensor(logits)
    if not logits.is_floating_point():
        logits = logits.double()
    labels = torch.as_tensor(labels, dtype=torch.long)
    if logits.ndim == 1:
        logits, labels = logits[None], labels.reshape(1)
    logp = F.log_softmax(logits, dim=1)
    nll = -logp.gather(1, labels[:, None]).squeeze(1)
    uniform = -logp.mean(dim=1)
    return ((1 - eps) * nll + eps * uniform).mean()


class PlateauScheduler:
    """Multiply the learning rate by ``factor`` after ``patience`` epochs without improvement."""

    def __init__(self, optimizer, patience: int = 10, factor: float = 0.1, min_delta: float = 0.0):
        self.optimizer = optimizer
        self.patience = patience
        self.factor = factor
        self.min_delta = min_delta
        self.best = float("inf")
        self.bad_epochs = 0

    @property
    def lr(self) -> float:
        return self.optimizer.param_groups[0]["lr"]

    def step(self, value: float) -> bool:
        if value < self.best - self.min_delta:
            self.best = value
            self.bad_epochs = 0
            return False
        self.bad_epochs += 1
        if self.bad_epochs >= self.patience:
            for group in self.optimizer.param_groups:
                group["lr"] *= self.factor
            self.bad_epochs = 0
            return True
        return False


@dataclass(frozen=True)
class TrainingPolicy:
    epochs: int = 100
    lr: float = 1e-3
    label_smoothing: float = 0.1
    batch_size: int = 256
    plateau_patience: int = 10
    plateau_factor: float = 0.1
    early_stopping_patience: int = 25
    val_fraction: float = 0.1
    augmentations: tuple = ()

    def __post_init__(self):
        for name in ("epochs", "lr", "batch_size", "plateau_patience", "plateau_factor",
                     "early_stopping_patience", "val_fraction"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.augmentations:
            raise ValueError("augmentation is not supported")


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

@dataclass
class TrainedClassifier:
    model: nn.Module
    num_classes: int
    train_provenance: str
    history: list[dict] = field(default_factory=list)

    @property
    def epochs_run(self) -> int:
        return len(self.history)

    @torch.no_grad()
    def predict(self, images: np.ndarray, batch_size: int = 512) -> np.ndarray:
        self.model.eval()
        preds = []
        for start in range(0, len(images), batch_size):
            x = _nchw(images[start:start + batch_size])
            preds.append(self.model(x).argmax(dim=1).numpy())
        return np.concatenate(preds)


def _nchw(images: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(images.transpose(0, 3, 1, 2)))


@torch.no_grad()
def _evaluate(model, x, y, eps, batch_size=512):
    model.eval()
    loss, correct = 0.0, 0
    for start in range(0, len(y), batch_size):
        logits = model(x[start:start + batch_size])
        yy = y[start:start + batch_size]
        loss += float(smoothed_cross_entropy(logits, yy, eps)) * len(yy)
        correct += int((logits.argmax(1) == yy).sum())
    return loss / len(y), correct / len(y)


def train_classifier(cfg: ClassifierConfig, policy: TrainingPolicy, train: LabeledDataset,
                     seed: int = 0,
                     on_epoch: Callable[[int, float], None] | None = None) -> TrainedClassifier:
    """Train on ``train`` with a stratified validation hold-out.

    Validation loss drives the plateau scheduler and early stopping, and picks
    the returned weights.  Accuracy saturates quickly on small hold-outs, so
    it makes a poor stopping signal.  ``on_epoch(epoch, val_acc)`` is called
    after every epoch and may raise to abort (pruning).
    """
    if len(train) == 0:
        raise ValueError("empty training set")
    if cfg.num_classes != train.num_classes:
        raise ValueError("classifier and dataset disagree on the number of classes")
    fit, val = stratified_split(train, policy.val_fraction, seed)
    if len(val) < train.num_classes:
        raise ValueError("validation split has fewer samples than classes")
    torch.manual_seed(seed)
    model = ResNet(cfg)
    opt = torch.optim.Adam(model.parameters(), lr=policy.lr)
    plateau = PlateauScheduler(opt, policy.plateau_patience, policy.plateau_factor)
    gen = torch.Generator().manual_seed(seed)
    x_fit, y_fit = _nchw(fit.images), torch.from_numpy(fit.labels)
    x_val, y_val = _nchw(val.images), torch.from_numpy(val.labels)
    best_loss, best_state, since_best = float("inf"), None, 0
    history = []
    for epoch in range(1, policy.epochs + 1):
        model.train()
        perm = torch.randperm(len(y_fit), generator=gen)
        total, correct, seen = 0.0, 0, 0
        for start in range(0, len(perm), policy.batch_size):
            idx = perm[start:start + policy.batch_size]
            if len(idx) < 2:
                continue  # batch norm needs more than one sample
            logits = model(x_fit[idx])
            loss = smoothed_cross_entropy(logits, y_fit[idx], policy.label_smoothing)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
            correct += int((logits.argmax(1) == y_fit[idx]).sum())
            seen += len(idx)
        val_loss, val_acc = _evaluate(model, x_val, y_val, policy.label_smoothing)
        history.append({
            "epoch": epoch, "train_loss": total / max(seen, 1), "train_acc": correct / max(seen, 1),
            "val_loss": val_loss, "val_acc": val_acc, "lr": plateau.lr,
        })
        plateau.step(val_loss)
        if val_loss < best_loss:
            best_loss, best_state, since_best = val_loss, copy.deepcopy(model.state_dict()), 0
        else:
            since_best += 1
        if on_epoch is not None:
            on_epoch(epoch, val_acc)
        if since_best >= policy.early_stopping_patience:
            break
    model.load_state_dict(best_state)
    model.eval()
    return TrainedClassifier(model, cfg.num_classes, train.provenance, history)


def accuracy(clf: TrainedClassifier, ds: LabeledDataset) -> float:
    if clf.num_classes != ds.num_classes:
        raise ValueError("classifier and test set disagree on the number of classes")
    return float(np.mean(clf.predict(ds.images) == ds.labels))


def compute_cas(clf: TrainedClassifier, real_test: LabeledDataset) -> float:
    """Top-1 accuracy on real test data of a classifier trained only on synthetic data."""
    if clf.train_provenance != "synthetic":
        raise ProvenanceError("CAS requires a classifier trained exclusively on synthetic data")
    if real_test.provenance != "real":
        raise ProvenanceError("CAS must be measured on real test data")
    return accuracy(clf, real_test)


# ---------------------------------------------------------------------------
# Generation timing and reports
# ---------------------------------------------------------------------------

@dataclass
class GenerationTiming:
    seconds: float
    per_sample: float
    forward_evals: int
    dataset: LabeledDataset


def measure_generation_time(sample: Callable[[ForwardCounter], LabeledDataset], n: int) -> GenerationTiming:
    """Wall-clock a sampler call that produces ``n`` images.

    ``sample`` receives a fresh :class:`ForwardCounter`; disk writes belong
    outside of it.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    counter = ForwardCounter()
    start = time.perf_counter()
    ds = sample(counter)
    seconds = time.perf_counter() - start
    if len(ds) != n:
        raise ValueError(f"sampler produced {len(ds)} images, expected {n}")
    return GenerationTiming(seconds, seconds / n, counter.count, ds)


@dataclass
class CASReport:
    dataset: str
    label: str  # "Real", "x<k>" or "After <stage>."
    accuracy: float
    epochs_run: int
    generation_seconds: float = 0.0
    forward_evals: int = 0
    is_best: bool = False
    beats_baseline: bool = False


def scaling_sweep_eval(datasets: Sequence[LabeledDataset], factors: Sequence[int],
                       real_train: LabeledDataset, real_test: LabeledDataset,
                       cfg: ClassifierConfig, policy: TrainingPolicy, seed: int = 0,
                       dataset_name: str = "toy",
                       timings: Sequence[GenerationTiming] | None = None) -> list[CASReport]:
    """Real-data baseline row followed by one CAS row per scale factor."""
    if len(datasets) != len(factors):
        raise ValueError("one dataset per factor is required")
    base = train_classifier(cfg, policy, real_train, seed=seed)
    reports = [CASReport(dataset_name, "Real", accuracy(base, real_test), base.epochs_run)]
    for i, (ds, k) in enumerate(zip(datasets, factors)):
        clf = train_classifier(cfg, policy, ds, seed=seed)
        rep = CASReport(dataset_name, f"x{k}", compute_cas(clf, real_test), clf.epochs_run)
        if timings is not None:
            rep.generation_seconds = timings[i].seconds
            rep.forward_evals = timings[i].forward_evals
        reports.append(rep)
    synthetic = reports[1:]
    if synthetic:
        best = max(synthetic, key=lambda r: r.accuracy)  # first maximum wins ties
        best.is_best = True
        best.beats_baseline = best.accuracy > reports[0].accuracy
    return reports
