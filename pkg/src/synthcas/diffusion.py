"""Desk-scale class-conditional pixel diffusion.

Epsilon-prediction denoiser with a linear Class-Encoder, a learned null
embedding for classifier-free guidance, and a deterministic DDIM sampler
driven by the number of inference steps (IS) and guidance scale (UGS).
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .data import LabeledDataset, normalize_to_unit_range, resize_batch, to_uint8

DEFAULT_IS = 50
DEFAULT_UGS = 7.5


# ---------------------------------------------------------------------------
# Noise schedule
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class NoiseSchedule:
    betas: np.ndarray

    @property
    def T(self) -> int:
        return len(self.betas)

    @property
    def alphas(self) -> np.ndarray:
        return 1.0 - self.betas

    @property
    def alpha_bars(self) -> np.ndarray:
        return np.cumprod(self.alphas)


def build_schedule(T: int = 1000, beta_start: float = 1e-4, beta_end: float = 2e-2) -> NoiseSchedule:
    """Linear beta ramp from ``beta_start`` to ``beta_end`` over ``T`` steps."""
    if T < 2:
        raise ValueError("T must be >= 2")
    if not 0 < beta_start <= beta_end < 1:
        raise ValueError("need 0 < beta_start <= beta_end < 1")
    return NoiseSchedule(np.linspace(beta_start, beta_end, T, dtype=np.float64))


def q_sample(x0, t: int, eps, sched: NoiseSchedule):
    """Forward-noise ``x0`` to timestep ``t`` with the given noise."""
    if not 0 <= t < sched.T:
        raise ValueError(f"timestep {t} outside [0, {sched.T})")
    if x0.shape != eps.shape:
        raise ValueError("x0 and eps shapes differ")
    ab = sched.alpha_bars[t]
    return math.sqrt(ab) * x0 + math.sqrt(1.0 - ab) * eps


def _q_sample_batch(x0: torch.Tensor, t: torch.Tensor, eps: torch.Tensor, sched: NoiseSchedule):
    ab = torch.as_tensor(sched.alpha_bars, dtype=x0.dtype)[t].view(-1, 1, 1, 1)
    return ab.sqrt() * x0 + (1 - ab).sqrt() * eps


# ---------------------------------------------------------------------------
# Networks
# ---------------------------------------------------------------------------

class ClassEncoder(nn.Module):
    """Affine map from one-hot class vectors to the conditioning space.

    Also owns the learned null embedding used for unconditional passes.
    """

    def __init__(self, num_classes: int, cond_dim: int):
        super().__init__()
        self.num_classes = num_classes
        self.cond_dim = cond_dim
        self.linear = nn.Linear(num_classes, cond_dim)
        self.null = nn.Parameter(torch.zeros(cond_dim))

    @property
    def weight(self) -> torch.Tensor:
        return self.linear.weight  # (cond_dim, num_classes)

    @property
    def bias(self) -> torch.Tensor:
        return self.linear.bias

    def forward(self, class_ids: torch.Tensor) -> torch.Tensor:
        if class_ids.numel() and (class_ids.min() < 0 or class_ids.max() >= self.num_classes):
            raise ValueError("class id out of range")
        one_hot = F.one_hot(class_ids.long(), self.num_classes).to(self.linear.weight.dtype)
        return self.linear(one_hot)

    def unconditional(self, n: int) -> torch.Tensor:
        return self.null.unsqueeze(0).expand(n, -1)


def encode_class(enc: ClassEncoder, class_id: int) -> np.ndarray:
    if not 0 <= class_id < enc.num_classes:
        raise ValueError(f"class id {class_id} outside [0, {enc.num_classes})")
    with torch.no_grad():
        return (enc.weight[:, class_id] + enc.bias).cpu().numpy()


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / half)
    args = t.double()[:, None] * freqs[None]
    emb = torch.cat([torch.sin(args), torch.cos(args)], dim=1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


def _groups(ch: int) -> int:
    for g in (8, 4, 2, 1):
        if ch % g == 0:
            return g
    return 1


class ResBlock(nn.Module):
    def __init__(self, c_in: int, c_out: int, emb_dim: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(_groups(c_in), c_in)
        self.conv1 = nn.Conv2d(c_in, c_out, 3, padding=1)
        self.emb = nn.Linear(emb_dim, 2 * c_out)
        self.norm2 = nn.GroupNorm(_groups(c_out), c_out)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, padding=1)
        self.skip = nn.Conv2d(c_in, c_out, 1) if c_in != c_out else nn.Identity()

    def forward(self, x, emb):
        h = self.conv1(F.silu(self.norm1(x)))
        scale, shift = self.emb(emb)[:, :, None, None].chunk(2, dim=1)
        h = self.norm2(h) * (1 + scale) + shift
        h = self.conv2(F.silu(h))
        return self.skip(x) + h


class Denoiser(nn.Module):
    """Small U-Net epsilon predictor.

    The conditioning vector is added to the timestep embedding, which then
    modulates every residual block (scale/shift).  The network output is
    preconditioned as ``eps = c_skip * x_t + c_out * F``: ``c_skip`` is the
    optimal linear predictor for data of standard deviation ``data_std`` and
    ``c_out`` the matching residual scale, which keeps the implied ``x0``
    estimate bounded at low signal-to-noise timesteps.
    """

    def __init__(self, channels: int = 3, base_width: int = 32, levels: int = 2,
                 cond_dim: int = 64, resolution: int = 32,
                 schedule: NoiseSchedule | None = None, data_std: float = 0.5):
        super().__init__()
        self.channels = channels
        self.resolution = resolution
        self.cond_dim = cond_dim
        self.config = dict(channels=channels, base_width=base_width, levels=levels,
                           cond_dim=cond_dim, resolution=resolution, data_std=data_std)
        schedule = schedule or build_schedule()
        ab = torch.as_tensor(schedule.alpha_bars, dtype=torch.float64)
        var = ab * data_std**2 + (1 - ab)
        self.register_buffer("c_skip", ((1 - ab).sqrt() / var).float(), persistent=False)
        self.register_buffer("c_out", (ab * data_std**2 / var).sqrt().float(), persistent=False)
        emb_dim = cond_dim
        self.time_mlp = nn.Sequential(
            nn.Linear(emb_dim, emb_dim), nn.SiLU(), nn.Linear(emb_dim, emb_dim)
        )
        widths = [base_width * (2 ** min(i, 1)) for i in range(levels)]
        self.conv_in = nn.Conv2d(channels, widths[0], 3, padding=1)
        self.down = nn.ModuleList()
        self.downsample = nn.ModuleList()
        c = widths[0]
        for i, w in enumerate(widths):
            self.down.append(ResBlock(c, w, emb_dim))
            c = w
            if i < levels - 1:
                self.downsample.append(nn.Conv2d(c, c, 3, stride=2, padding=1))
        self.mid = ResBlock(c, c, emb_dim)
        self.up = nn.ModuleList()
        self.upsample = nn.ModuleList()
        for i, w in reversed(list(enumerate(widths))):
            self.up.append(ResBlock(c + w, w, emb_dim))
            c = w
            if i > 0:
                self.upsample.append(nn.Conv2d(c, c, 3, padding=1))
        self.norm_out = nn.GroupNorm(_groups(c), c)
        self.conv_out = nn.Conv2d(c, channels, 3, padding=1)

    def forward(self, x, t, cond):
        emb = self.time_mlp(timestep_embedding(t, self.cond_dim).to(x.dtype)) + cond
        h = self.conv_in(x)
        skips = []
        for i, block in enumerate(self.down):
            h = block(h, emb)
            skips.append(h)
            if i < len(self.downsample):
                h = self.downsample[i](h)
        h = self.mid(h, emb)
        for j, block in enumerate(self.up):
            h = block(torch.cat([h, skips.pop()], dim=1), emb)
            if j < len(self.upsample):
                h = F.interpolate(h, scale_factor=2, mode="nearest")
                h = self.upsample[j](h)
        out = self.conv_out(F.silu(self.norm_out(h)))
        c_skip = self.c_skip.to(x.dtype)[t].view(-1, 1, 1, 1)
        c_out = self.c_out.to(x.dtype)[t].view(-1, 1, 1, 1)
        return c_skip * x + c_out * out


def parameter_count(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


# ---------------------------------------------------------------------------
# Objective
# ---------------------------------------------------------------------------

LOSS_WEIGHTINGS = ("eps", "edm")


def denoise_loss(denoiser, x0: torch.Tensor, class_ids: torch.Tensor, enc: ClassEncoder,
                 sched: NoiseSchedule, uncond_prob: float = 0.1,
                 generator: torch.Generator | None = None, t=None, eps=None,
                 weighting: str = "eps") -> torch.Tensor:
    """Mean squared error between injected and predicted noise.

    Timesteps are uniform over the schedule; each sample's conditioning is
    swapped for the null embedding with probability ``uncond_prob``.

    ``weighting="edm"`` divides each sample's error by ``c_out[t]**2``,
    which is unit-weight regression of the network's residual branch.  With
    the plain ``"eps"`` weighting the high-noise timesteps that decide
    global layout contribute almost nothing once the skip path explains most
    of the noise.
    """
    if not 0.0 <= uncond_prob <= 1.0:
        raise ValueError("uncond_prob must lie in [0, 1]")
    if weighting not in LOSS_WEIGHTINGS:
        raise ValueError(f"unknown loss weighting {weighting!r}")
    n = x0.shape[0]
    if n == 0:
        raise ValueError("empty batch")
    if t is None:
        t = torch.randint(0, sched.T, (n,), generator=generator)
    if eps is None:
        eps = torch.randn(x0.shape, generator=generator, dtype=x0.dtype)
    xt = _q_sample_batch(x0, t, eps, sched)
    drop = torch.rand(n, generator=generator) < uncond_prob
    cond = torch.where(drop[:, None], enc.unconditional(n), enc(class_ids))
    if weighting == "eps":
        return F.mse_loss(denoiser(xt, t, cond), eps)
    w = denoiser.c_out.to(x0.dtype)[t].pow(-2).view(-1, *([1] * (x0.dim() - 1)))
    return (w * (denoiser(xt, t, cond) - eps) ** 2).mean()


def cosine_lr(t: int, T_total: int, lr0: float) -> float:
    """Cosine annealing from ``lr0`` at step 0 to 0 at ``T_total``."""
    if T_total <= 0:
        return lr0
    return lr0 * (1.0 + math.cos(math.pi * t / T_total)) / 2.0


# ---------------------------------------------------------------------------
# Sampling
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SamplerParams:
    IS: int = DEFAULT_IS
    UGS: float = DEFAULT_UGS
    epoch: int = 0
    seed: int = 0

    def validate(self, sched: NoiseSchedule) -> None:
        if self.IS < 1:
            raise ValueError("IS must be >= 1")
        if self.IS > sched.T:
            raise ValueError(f"IS={self.IS} exceeds the schedule length T={sched.T}")
        if self.UGS < 0:
            raise ValueError("UGS must be non-negative")
        if self.seed < 0:
            raise ValueError("seed must be non-negative")


class ForwardCounter:
    """Thread-safe tally of per-image denoiser evaluations."""

    def __init__(self):
        self._lock = threading.Lock()
        self._count = 0

    def add(self, n: int) -> None:
        with self._lock:
            self._count += n

    @property
    def count(self) -> int:
        with self._lock:
            return self._count

    def reset(self) -> None:
        with self._lock:
            self._count = 0


def guided_epsilon(eps_cond, eps_uncond, UGS: float):
    """Classifier-free guidance: ``eps_uncond + UGS * (eps_cond - eps_uncond)``."""
    if eps_cond.shape != eps_uncond.shape:
        raise ValueError("eps_cond and eps_uncond shapes differ")
    return eps_uncond + UGS * (eps_cond - eps_uncond)


def ddim_timesteps(T: int, IS: int) -> np.ndarray:
    """Descending, uniformly spaced sub-sequence of ``IS`` timesteps from ``T-1``."""
    if not 1 <= IS <= T:
        raise ValueError(f"IS must lie in [1, {T}]")
    return np.rint(np.linspace(T - 1, 0, IS)).astype(np.int64)


def initial_noise(seed: int, class_id: int, index: int, shape) -> np.ndarray:
    rng = np.random.default_rng([seed, class_id, index])
    return rng.standard_normal(shape).astype(np.float32)


@torch.no_grad()
def ddim_sample_batch(denoiser, enc: ClassEncoder, sched: NoiseSchedule, class_ids,
                      noise, params: SamplerParams, counter: ForwardCounter | None = None,
                      clip_x0: bool = True) -> torch.Tensor:
    """Deterministic DDIM from the given starting noise; returns NCHW in [-1, 1]."""
    params.validate(sched)
    dtype = next(denoiser.parameters()).dtype if any(True for _ in denoiser.parameters()) else torch.float32
    x = torch.as_tensor(noise, dtype=dtype)
    class_ids = torch.as_tensor(class_ids, dtype=torch.long)
    n = x.shape[0]
    alpha_bars = sched.alpha_bars
    steps = ddim_timesteps(sched.T, params.IS)
    cond = enc(class_ids).to(dtype)
    uncond = enc.unconditional(n).to(dtype)
    for i, t in enumerate(steps):
        ab = float(alpha_bars[t])
        ab_prev = float(alpha_bars[steps[i + 1]]) if i + 1 < len(steps) else 1.0
        tt = torch.full((n,), int(t), dtype=torch.long)
        if params.UGS == 0:
            eps = denoiser(x, tt, uncond)
            if counter is not None:
                counter.add(n)
        else:
            both = denoiser(torch.cat([x, x]), torch.cat([tt, tt]), torch.cat([cond, uncond]))
            eps = guided_epsilon(both[:n], both[n:], params.UGS)
            if counter is not None:
                counter.add(2 * n)
        x0 = (x - math.sqrt(1 - ab) * eps) / math.sqrt(ab)
        if clip_x0:
            x0 = x0.clamp(-1, 1)
        x = math.sqrt(ab_prev) * x0 + math.sqrt(1 - ab_prev) * eps
    return x.clamp(-1, 1)


def ddim_sample(denoiser, enc: ClassEncoder, sched: NoiseSchedule, class_id: int,
                params: SamplerParams, counter: ForwardCounter | None = None,
                clip_x0: bool = True, index: int = 0) -> np.ndarray:
    """One image ``(H, W, C)`` for ``class_id``, seeded by ``(params.seed, class_id, index)``."""
    shape = (denoiser.channels, denoiser.resolution, denoiser.resolution)
    noise = initial_noise(params.seed, class_id, index, shape)[None]
    out = ddim_sample_batch(denoiser, enc, sched, [class_id], noise, params, counter, clip_x0)
    return out[0].permute(1, 2, 0).cpu().numpy()


def sample_batch(denoiser, enc: ClassEncoder, sched: NoiseSchedule, counts: Sequence[int],
                 params: SamplerParams, counter: ForwardCounter | None = None,
                 class_names: Sequence[str] | None = None, batch_size: int = 128,
                 checkpoint: str = "", output_resolution: int | None = None) -> LabeledDataset:
    """Generate ``counts[i]`` images of every class ``i`` as a synthetic dataset.

    Samples are bilinearly resized to ``output_resolution`` when it differs
    from the denoiser's internal resolution, then quantised to the 8-bit
    grid so they round-trip through lossless files exactly.
    """
    counts = np.asarray(counts, dtype=np.int64)
    if (counts < 0).any() or counts.sum() == 0:
        raise ValueError("counts must be non-negative with a positive total")
    params.validate(sched)
    shape = (denoiser.channels, denoiser.resolution, denoiser.resolution)
    out_res = output_resolution or denoiser.resolution
    jobs = [(c, i) for c, k in enumerate(counts) for i in range(int(k))]
    images = np.empty((len(jobs), out_res, out_res, shape[0]), dtype=np.float32)
    for start in range(0, len(jobs), batch_size):
        chunk = jobs[start:start + batch_size]
        noise = np.stack([initial_noise(params.seed, c, i, shape) for c, i in chunk])
        out = ddim_sample_batch(denoiser, enc, sched, [c for c, _ in chunk], noise, params, counter)
        out = resize_batch(out.permute(0, 2, 3, 1).cpu().numpy(), out_res)
        images[start:start + len(chunk)] = normalize_to_unit_range(to_uint8(out))
    labels = np.array([c for c, _ in jobs])
    if class_names is None:
        class_names = [f"class{c}" for c in range(len(counts))]
    meta = {"IS": str(params.IS), "UGS": repr(float(params.UGS)), "epoch": str(params.epoch),
            "seed": str(params.seed), "checkpoint": checkpoint}
    return LabeledDataset(images, labels, list(class_names), split="train",
                          provenance="synthetic", meta=meta)


# ---------------------------------------------------------------------------
# Training and checkpoints
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    batch_size: int = 64
    lr: float = 1e-4
    weight_decay: float = 4e-3
    clip_norm: float = 10.0
    uncond_prob: float = 0.1
    seed: int = 0
    loss_weighting: str = "edm"

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or self.lr <= 0:
            raise ValueError("epochs, batch_size and lr must be positive")
        if self.loss_weighting not in LOSS_WEIGHTINGS:
            raise ValueError(f"unknown loss weighting {self.loss_weighting!r}")

    def fingerprint(self) -> str:
        blob = json.dumps(dataclasses.asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


STAGE1_PRESET = TrainConfig(epochs=50, batch_size=64, lr=1e-4)
STAGE3_PRESET = TrainConfig(epochs=10, batch_size=16, lr=1e-5)


def state_hash(module: nn.Module) -> str:
    h = hashlib.sha256()
    for name, tensor in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(tensor.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


@dataclass
class Checkpoint:
    component: str
    epoch: int
    params: dict[str, np.ndarray]
    config_fingerprint: str = ""

    @classmethod
    def capture(cls, component: str, epoch: int, module: nn.Module, fingerprint: str = ""):
        params = {k: v.detach().cpu().numpy().copy() for k, v in module.state_dict().items()}
        return cls(component, epoch, params, fingerprint)

    @property
    def parameter_count(self) -> int:
        return int(sum(v.size for v in self.params.values()))

    def apply(self, module: nn.Module) -> None:
        module.load_state_dict({k: torch.from_numpy(v.copy()) for k, v in self.params.items()})

    def param_hash(self) -> str:
        h = hashlib.sha256()
        for name in sorted(self.params):
            h.update(name.encode())
            h.update(np.ascontiguousarray(self.params[name]).tobytes())
        return h.hexdigest()

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "wb") as fh:
            np.savez(fh, **self.params)
        meta = {
            "component": self.component,
            "epoch": self.epoch,
            "config_fingerprint": self.config_fingerprint,
            "parameter_count": self.parameter_count,
            "param_hash": self.param_hash(),
        }
        path.with_suffix(".txt").write_text("".join(f"{k} = {v}\n" for k, v in meta.items()))
        return path


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    meta = {}
    for line in path.with_suffix(".txt").read_text().splitlines():
        if "=" in line:
            k, v = line.split("=", 1)
            meta[k.strip()] = v.strip()
    with np.load(path) as blob:
        params = {k: blob[k] for k in blob.files}
    return Checkpoint(meta["component"], int(meta["epoch"]), params, meta.get("config_fingerprint", ""))


def _to_nchw(ds: LabeledDataset, resolution: int | None = None) -> torch.Tensor:
    images = ds.images if resolution is None else resize_batch(ds.images, resolution)
    return torch.from_numpy(np.ascontiguousarray(images.transpose(0, 3, 1, 2)))


def train_component(target: str, config: TrainConfig, data: LabeledDataset, denoiser: Denoiser,
                    enc: ClassEncoder, sched: NoiseSchedule, checkpoint_dir=None,
                    on_epoch: Callable[[int, float], None] | None = None):
    """Train one component with the other frozen; one checkpoint per epoch.

    ``target`` is ``"class_encoder"``, ``"denoiser"`` or ``"all"`` (the
    last is used only for backbone pre-training).  Returns ``(checkpoints,
    history)``; history holds per-epoch mean loss, the largest post-clip
    gradient norm and the learning rate at each epoch start.
    """
    if len(data) == 0:
        raise ValueError("empty training data")
    modules = {"class_encoder": [enc], "denoiser": [denoiser], "all": [denoiser, enc]}
    if target not in modules:
        raise ValueError(f"unknown training target {target!r}")
    trained = modules[target]
    frozen = [m for m in (denoiser, enc) if all(m is not t for t in trained)]
    for m in frozen:
        m.requires_grad_(False)
    for m in trained:
        m.requires_grad_(True)
    params = [p for m in trained for p in m.parameters()]
    opt = torch.optim.Adam(params, lr=config.lr, weight_decay=config.weight_decay)
    steps_per_epoch = math.ceil(len(data) / config.batch_size)
    total_steps = steps_per_epoch * config.epochs
    sched_lr = torch.optim.lr_scheduler.LambdaLR(
        opt, lambda step: cosine_lr(step, total_steps, 1.0)
    )
    gen = torch.Generator().manual_seed(config.seed)
    x_all = _to_nchw(data, denoiser.resolution)
    y_all = torch.from_numpy(data.labels)
    checkpoints, history = [], []
    try:
        for epoch in range(1, config.epochs + 1):
            lr_start = opt.param_groups[0]["lr"]
            perm = torch.randperm(len(data), generator=gen)
            losses, max_norm = [], 0.0
            for start in range(0, len(data), config.batch_size):
                idx = perm[start:start + config.batch_size]
                loss = denoise_loss(denoiser, x_all[idx], y_all[idx], enc, sched,
                                    config.uncond_prob, generator=gen, weighting=config.loss_weighting)
                opt.zero_grad(set_to_none=True)
                loss.backward()
                torch.nn.utils.clip_grad_norm_(params, config.clip_norm)
                grads = [p.grad for p in params if p.grad is not None]
                if grads:
                    max_norm = max(max_norm, float(torch.linalg.vector_norm(
                        torch.stack([torch.linalg.vector_norm(g) for g in grads]))))
                opt.step()
                sched_lr.step()
                losses.append(loss.item())
            mean_loss = float(np.mean(losses))
            history.append({"epoch": epoch, "loss": mean_loss, "grad_norm": max_norm, "lr": lr_start})
            component = "denoiser" if target == "all" else target
            ckpt = Checkpoint.capture(component, epoch, trained[0], config.fingerprint())
            if checkpoint_dir is not None:
                ckpt.save(Path(checkpoint_dir) / f"{component}_epoch{epoch:03d}.npz")
            checkpoints.append(ckpt)
            if on_epoch is not None:
                on_epoch(epoch, mean_loss)
    finally:
        for m in (denoiser, enc):
            m.requires_grad_(True)
    return checkpoints, history


@dataclass
class ConditionalSampler:
    """A denoiser and Class-Encoder pair ready to generate labelled datasets."""

    denoiser: Denoiser
    encoder: ClassEncoder
    schedule: NoiseSchedule
    class_names: list[str]
    output_resolution: int | None = None
    batch_size: int = 128
    checkpoint: str = ""

    def sample(self, counts, params: SamplerParams, counter: ForwardCounter | None = None) -> LabeledDataset:
        return sample_batch(self.denoiser, self.encoder, self.schedule, counts, params, counter,
                            class_names=self.class_names, batch_size=self.batch_size,
                            checkpoint=self.checkpoint, output_resolution=self.output_resolution)
