"""Cross-architecture self-supervised pretraining.

One augmented view per image goes through both arms; the loss pulls the two
L2-normalized logit vectors together. There is no parameter sharing and no
gradient exchange between the arms beyond the shared loss value.
"""

from __future__ import annotations

import copy
import csv
import dataclasses
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import numkernel as nk
from .augment import AugmentConfig, Augmenter, eval_batch
from .models import ArmSpec, build_arm, checkpoint_save, recompute_bn_stats
from .optim import Optimizer, SwaState, cosine_anneal, swa_update

TRACE_COLUMNS = ("epoch", "step", "loss", "lr", "seconds", "augment_calls")


class DivergenceError(FloatingPointError):
    def __init__(self, message, epoch=None, step=None):
        super().__init__(message)
        self.epoch = epoch
        self.step = step


@dataclass
class PretrainConfig:
    arm_a: ArmSpec = field(default_factory=lambda: ArmSpec(kind="cnn"))
    arm_b: ArmSpec = field(default_factory=lambda: ArmSpec(kind="transformer"))
    epochs: int = 100
    batch_size: int = 16
    optimizer_a: str = "adam"
    optimizer_b: str = "adam"
    lr: float = 1e-3
    momentum: float = 0.9
    t_max: int = 16
    lr_min: float = 1e-6
    swa_enabled: bool = True
    loss_eps: float = 1e-12
    equality_tolerance: float = 1e-12
    noise_r: tuple = (1e-6, 1e-9)
    noise_t: tuple = (1e-10, 1e-15)
    init_a: str = "random"
    init_b: str = "random"
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.arm_a, dict):
            self.arm_a = ArmSpec.from_dict(self.arm_a)
        if isinstance(self.arm_b, dict):
            self.arm_b = ArmSpec.from_dict(self.arm_b)
        if isinstance(self.augment, dict):
            self.augment = AugmentConfig(**self.augment)
        self.noise_r = tuple(float(v) for v in self.noise_r)
        self.noise_t = tuple(float(v) for v in self.noise_t)
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.arm_a.head_dim_out != self.arm_b.head_dim_out:
            raise ValueError(
                f"arms must share head width, got {self.arm_a.head_dim_out} and {self.arm_b.head_dim_out}"
            )

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["arm_a"] = self.arm_a.to_dict()
        d["arm_b"] = self.arm_b.to_dict()
        d["augment"] = self.augment.to_dict()
        d["noise_r"] = list(self.noise_r)
        d["noise_t"] = list(self.noise_t)
        return d


# ---------------------------------------------------------------------------
# loss and collapse guard
# ---------------------------------------------------------------------------


def cass_loss(r, t, eps=1e-12):
    """Batch mean of ``2 - 2 <F(r_i), F(t_i)>`` with ``F(x) = x / max(||x||, eps)``.

    Evaluated in float64 whatever the input precision, so tiny angular
    differences (such as those injected by the equality guard) survive.
    Computed as ``||F(r_i) - F(t_i)||^2``, which equals the cosine form for
    unit rows and cannot round below zero.
    """
    if r.shape != t.shape:
        raise nk.DimensionError(f"cass_loss: shape mismatch {r.shape} vs {t.shape}")
    fr = nk.l2_normalize(nk.cast(r, np.float64), eps)
    ft = nk.l2_normalize(nk.cast(t, np.float64), eps)
    diff = nk.sub(fr, ft)
    return nk.mean(nk.sum_(nk.mul(diff, diff), axis=-1))


def equality_guard(r, t, rng, tolerance=1e-12, noise_r=(1e-6, 1e-9), noise_t=(1e-10, 1e-15)):
    """Add small Gaussian offsets to both outputs when they coincide.

    Returns the inputs unchanged (same objects) unless ``max |r - t| < tolerance``.
    Offsets are constants: no gradient flows through the noise.
    """
    if r.shape != t.shape or np.max(np.abs(r.data.astype(np.float64) - t.data)) >= tolerance:
        return r, t
    nr = rng.normal(noise_r[0], noise_r[1], size=r.shape)
    nt = rng.normal(noise_t[0], noise_t[1], size=t.shape)
    r2 = nk.add(nk.cast(r, np.float64), nk.Tensor(nr, dtype=np.float64))
    t2 = nk.add(nk.cast(t, np.float64), nk.Tensor(nt, dtype=np.float64))
    return r2, t2


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


@dataclass
class PretrainResult:
    arm_a: object
    arm_b: object
    trace: list
    swa_a: SwaState | None = None
    swa_b: SwaState | None = None
    checkpoint_a: Path | None = None
    checkpoint_b: Path | None = None


def _clone(arm):
    return arm.clone() if hasattr(arm, "clone") else copy.deepcopy(arm)


def _apply_average(arm, swa: SwaState):
    out = _clone(arm)
    for name, p in out.params.items():
        p.data = swa.averaged[name].astype(p.dtype)
        p.grad = None
    return out


def _seeds(seed):
    ss = np.random.SeedSequence(seed).spawn(5)
    return [int(s.generate_state(1)[0]) for s in ss]


def build_arms(cfg: PretrainConfig):
    seed_a, seed_b, *_ = _seeds(cfg.seed)
    arm_a = build_arm(cfg.arm_a, init="checkpoint" if cfg.init_a != "random" else "random", seed=seed_a,
                      checkpoint=None if cfg.init_a == "random" else cfg.init_a)
    arm_b = build_arm(cfg.arm_b, init="checkpoint" if cfg.init_b != "random" else "random", seed=seed_b,
                      checkpoint=None if cfg.init_b == "random" else cfg.init_b)
    return arm_a, arm_b


def run_pretrain(cfg: PretrainConfig, data, out_dir=None, arms=None, single_arm=None, dual_view=False,
                 log=None) -> PretrainResult:
    """Pretrain both arms on the training split of ``data``.

    ``data`` is a DatasetBundle or a plain N×C×H×W array of training images.
    ``arms`` overrides the arms built from ``cfg`` (any objects exposing
    ``params`` and ``forward``). ``single_arm`` ("a" or "b") trains one arm
    against a detached random target, for timing references; ``dual_view``
    feeds each arm its own augmented view, for augmentation-count references.
    """
    images = data.images_for("train") if hasattr(data, "images_for") else np.asarray(data)
    if len(images) == 0:
        raise ValueError("training split is empty")
    _, _, shuffle_seed, augment_seed, guard_seed = _seeds(cfg.seed)
    arm_a, arm_b = arms if arms is not None else build_arms(cfg)
    active = {"a": [arm_a], "b": [arm_b], None: [arm_a, arm_b]}[single_arm]
    kinds = {"a": cfg.optimizer_a, "b": cfg.optimizer_b}
    optimizers = []
    for key, arm in (("a", arm_a), ("b", arm_b)):
        if arm in active:
            optimizers.append(Optimizer(arm.params, kinds[key], cfg.momentum))
    shuffle_rng = np.random.default_rng(shuffle_seed)
    guard_rng = np.random.default_rng(guard_seed)
    augmenter = Augmenter(cfg.augment, augment_seed)
    dtype = next(iter(arm_a.params.values())).dtype
    swa_a = SwaState() if cfg.swa_enabled else None
    swa_b = SwaState() if cfg.swa_enabled else None

    trace, step = [], 0
    n = len(images)
    for epoch in range(cfg.epochs):
        lr = cosine_anneal(cfg.lr, cfg.lr_min, epoch, cfg.t_max)
        order = shuffle_rng.permutation(n)
        calls_before = augmenter.calls
        losses = []
        start_time = time.perf_counter()
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            view = augmenter(images[idx]).astype(dtype, copy=False)
            if single_arm is None:
                view_b = augmenter(images[idx]).astype(dtype, copy=False) if dual_view else view
                r = arm_a.forward(view, "train")
                t = arm_b.forward(view_b, "train")
                r, t = equality_guard(r, t, guard_rng, cfg.equality_tolerance, cfg.noise_r, cfg.noise_t)
            else:
                r = active[0].forward(view, "train")
                t = nk.Tensor(guard_rng.standard_normal(r.shape), dtype=np.float64)
            loss = cass_loss(r, t, cfg.loss_eps)
            value = float(loss.data)
            if not np.isfinite(value):
                raise DivergenceError(f"non-finite loss at epoch {epoch}, step {step}", epoch, step)
            nk.backward(loss)
            for opt in optimizers:
                opt.step(lr)
            losses.append(value)
            step += 1
        seconds = time.perf_counter() - start_time
        if cfg.swa_enabled and ((epoch + 1) % cfg.t_max == 0 or epoch == cfg.epochs - 1):
            swa_update(swa_a, arm_a.params)
            swa_update(swa_b, arm_b.params)
        row = {
            "epoch": epoch,
            "step": step,
            "loss": float(np.mean(losses)),
            "lr": lr,
            "seconds": seconds,
            "augment_calls": augmenter.calls - calls_before,
        }
        trace.append(row)
        if log is not None:
            log(row)

    final_a, final_b = arm_a, arm_b
    if cfg.swa_enabled and swa_a.snapshot_count:
        final_a = _apply_average(arm_a, swa_a)
        final_b = _apply_average(arm_b, swa_b)
        eval_images = eval_batch(cfg.augment, images).astype(dtype, copy=False)
        for arm in (final_a, final_b):
            if getattr(arm, "buffers", None):
                recompute_bn_stats(arm, eval_images, cfg.batch_size)
    result = PretrainResult(final_a, final_b, trace, swa_a, swa_b)
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        result.checkpoint_a = checkpoint_save(final_a, out_dir / "arm_a.ckpt")
        result.checkpoint_b = checkpoint_save(final_b, out_dir / "arm_b.ckpt")
        write_trace(trace, out_dir / "trace.csv")
    return result


def write_trace(trace, path):
    path = Path(path)
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=TRACE_COLUMNS)
        writer.writeheader()
        for row in trace:
            writer.writerow({k: row[k] for k in TRACE_COLUMNS})
    return path


def read_trace(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    out = []
    for r in rows:
        out.append({
            "epoch": int(r["epoch"]),
            "step": int(r["step"]),
            "loss": float(r["loss"]),
            "lr": float(r["lr"]),
            "seconds": float(r["seconds"]),
            "augment_calls": int(r["augment_calls"]),
        })
    return out
