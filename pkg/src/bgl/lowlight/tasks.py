"""Toy low-light tasks wired into the bilevel contract.

The enhancement problem composes the generative block ``F`` (upper
parameters) with the Retinex enhancer ``G`` (lower parameters):

* ``L_F``: L1 between ``G(F(z))`` and the reference, on validation batches;
* ``L_G``: the self-supervised illumination loss of ``G`` on ``F(z)``, on
  training batches (no references needed).
"""

from __future__ import annotations

import hashlib
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .. import tensor as T
from ..bilevel import BilevelProblem
from ..solvers import Optimizer, lr_schedule
from ..tensor import ParameterVector, Tensor
from .losses import loss_lower_illum, loss_upper_l1
from .metrics import batch_psnr, ssim
from .networks import (
    EnhancerConfig,
    GBConfig,
    denoise_forward,
    enhancer_forward,
    generative_block_forward,
    init_generative_block,
    init_three_conv,
)
from .synth import Dataset, SynthConfig, naive_demosaic


@dataclass
class PipelineConfig:
    image_size: int = 32
    n_train: int = 200
    n_val: int = 50
    n_test: int = 50
    gain_range: tuple[float, float] = (0.1, 0.3)
    shot_scale: float = 1e-3
    read_sigma: float = 5e-3
    gb_widths: tuple[int, ...] = (8, 16, 16, 16)
    enhancer_width: int = 8
    s_min: float = 0.05
    w_fidelity: float = 1.0
    w_smooth: float = 0.1
    eval_batch: int = 25

    def __post_init__(self):
        self.gain_range = tuple(self.gain_range)
        self.gb_widths = tuple(self.gb_widths)
        if not 0 < self.s_min < 1:
            raise ValueError("s_min must lie in (0, 1)")
        if self.w_fidelity < 0 or self.w_smooth < 0:
            raise ValueError("loss weights must be nonnegative")
        packed = self.image_size // 2
        if packed % (2 ** (len(self.gb_widths) - 1)):
            raise ValueError(f"image_size {self.image_size} not divisible for {len(self.gb_widths)} U-Net levels")

    def synth_config(self, seed: int) -> SynthConfig:
        return SynthConfig(self.image_size, self.n_train, self.n_val, self.n_test, self.gain_range,
                           self.shot_scale, self.read_sigma, seed=seed)

    def gb_config(self) -> GBConfig:
        return GBConfig(self.gb_widths)

    def enhancer_config(self) -> EnhancerConfig:
        return EnhancerConfig(self.enhancer_width, self.s_min)


class Batch(NamedTuple):
    indices: tuple[int, ...]
    raw: Tensor
    clean: np.ndarray


def _batch(ds: Dataset, idx) -> Batch:
    idx = tuple(int(i) for i in idx)
    return Batch(idx, Tensor(ds.raw[list(idx)]), ds.clean[list(idx)])


class EnhancementTask:
    """Dataset, network shapes and loss definitions for the enhancement problem."""

    def __init__(self, cfg: PipelineConfig, dataset: Dataset, batch_size: int = 2, init_seed: int = 0):
        self.cfg = cfg
        self.dataset = dataset
        self.batch_size = batch_size
        self.splits = {s: dataset.indices(s) for s in ("train", "val", "test")}
        for s in ("train", "val"):
            if self.splits[s].size == 0:
                raise ValueError(f"dataset split {s!r} is empty")
        rng = np.random.default_rng(init_seed)
        self.omega_init = init_generative_block(cfg.gb_config(), rng)
        self.theta_init = init_three_conv(cfg.enhancer_width, rng)
        self._gb_cache: OrderedDict = OrderedDict()

    # -- forward passes -----------------------------------------------------------------

    def _gb(self, omega: ParameterVector, batch: Batch) -> Tensor:
        if any(t.requires_grad for _, t in omega.items()):
            return generative_block_forward(batch.raw, omega)
        key = (hashlib.blake2b(omega.flatten().tobytes(), digest_size=16).digest(), batch.indices)
        hit = self._gb_cache.get(key)
        if hit is None:
            hit = generative_block_forward(batch.raw, omega)
            self._gb_cache[key] = hit
            if len(self._gb_cache) > 8:
                self._gb_cache.popitem(last=False)
        return hit

    def upper_loss(self, omega, theta, batch: Batch) -> Tensor:
        x = self._gb(omega, batch)
        _, y = enhancer_forward(x, theta, self.cfg.s_min)
        return loss_upper_l1(y, batch.clean)

    def lower_loss(self, omega, theta, batch: Batch) -> Tensor:
        x = self._gb(omega, batch)
        s, _ = enhancer_forward(x, theta, self.cfg.s_min)
        return loss_lower_illum(x, s, self.cfg.w_fidelity, self.cfg.w_smooth)

    def sample_batches(self, rng: np.random.Generator) -> tuple[Batch, Batch]:
        up = rng.choice(self.splits["val"], size=min(self.batch_size, self.splits["val"].size), replace=False)
        low = rng.choice(self.splits["train"], size=min(self.batch_size, self.splits["train"].size), replace=False)
        return _batch(self.dataset, np.sort(up)), _batch(self.dataset, np.sort(low))

    def problem(self) -> BilevelProblem:
        first = self.sample_batches(np.random.default_rng(0))
        return BilevelProblem(self.upper_loss, self.lower_loss, self.omega_init, self.theta_init,
                              first[0], first[1], self.sample_batches, name="enhancement", context=self)

    # -- evaluation ---------------------------------------------------------------------------

    def predict(self, omega_flat, theta_flat, indices) -> np.ndarray:
        omega = self.omega_init.unflatten(omega_flat)
        theta = self.theta_init.unflatten(theta_flat)
        out = []
        for start in range(0, len(indices), self.cfg.eval_batch):
            b = _batch(self.dataset, indices[start:start + self.cfg.eval_batch])
            _, y = enhancer_forward(generative_block_forward(b.raw, omega), theta, self.cfg.s_min)
            out.append(y.data)
        return np.concatenate(out)

    def evaluate(self, omega_flat, theta_flat, split: str = "test") -> dict[str, float]:
        idx = self.splits[split]
        y = np.clip(self.predict(omega_flat, theta_flat, idx), 0.0, 1.0)
        return image_metrics(y, self.dataset.clean[idx])


def image_metrics(pred: np.ndarray, ref: np.ndarray) -> dict[str, float]:
    return {
        "psnr": batch_psnr(pred, ref),
        "ssim": ssim(pred, ref),
        "l1": float(np.mean(np.abs(pred - ref))),
    }


def build_enhancement_problem(config: PipelineConfig, dataset: Dataset, batch_size: int = 2,
                              init_seed: int = 0) -> BilevelProblem:
    """Bilevel problem over (GB params, enhancer params); ``problem.context`` is the task."""
    return EnhancementTask(config, dataset, batch_size, init_seed).problem()


# ---------------------------------------------------------------------------
# single-level training helpers


@dataclass
class HeadTrainConfig:
    steps: int = 600
    batch_size: int = 8
    lr_init: float = 3e-3
    lr_final: float = 3e-5
    optimizer: str = "adam"
    seed: int = 0


def _train_head(loss_fn, theta: ParameterVector, pool: np.ndarray, cfg: HeadTrainConfig) -> np.ndarray:
    """Minimise ``loss_fn(theta_params, batch_indices)`` over minibatches of ``pool``."""
    rng = np.random.default_rng(cfg.seed)
    opt = Optimizer(cfg.optimizer)
    vec = theta.flatten()
    for step in range(cfg.steps):
        idx = np.sort(rng.choice(pool, size=min(cfg.batch_size, pool.size), replace=False))
        params = theta.unflatten(vec, requires_grad=True)
        T.backward(loss_fn(params, idx))
        lr = lr_schedule(step, max(cfg.steps, 1), cfg.lr_init, cfg.lr_final)
        vec = opt.step(vec, params.grad_vector(), lr)
        if not np.all(np.isfinite(vec)):
            raise FloatingPointError(f"non-finite head parameters at step {step}")
    return vec


def fixed_gb_images(dataset: Dataset) -> np.ndarray:
    """Naive demosaic plus exposure-gain correction, clipped to [0, 1]."""
    gains = dataset.gains.reshape(-1, 1, 1, 1)
    return np.clip(naive_demosaic(dataset.raw) / gains, 0.0, 1.0)


def fixed_gb_baseline(task: EnhancementTask, cfg: HeadTrainConfig) -> dict[str, float]:
    """Enhancer trained on ``L_G`` over fixed (non-learned) RGB conversions."""
    x_all = fixed_gb_images(task.dataset)
    pc = task.cfg

    def loss(theta, idx):
        x = Tensor(x_all[idx])
        s, _ = enhancer_forward(x, theta, pc.s_min)
        return loss_lower_illum(x, s, pc.w_fidelity, pc.w_smooth)

    theta = _train_head(loss, task.theta_init, task.splits["train"], cfg)
    test = task.splits["test"]
    _, y = enhancer_forward(Tensor(x_all[test]), task.theta_init.unflatten(theta), pc.s_min)
    return image_metrics(np.clip(y.data, 0, 1), task.dataset.clean[test])


@dataclass
class TransferResult:
    metrics: dict[str, float]
    omega_unchanged: bool
    theta: np.ndarray = field(repr=False)


def freeze_and_transfer(trained_omega: ParameterVector, dataset: Dataset, cfg: PipelineConfig,
                        head_cfg: HeadTrainConfig, head_seed: int = 0) -> TransferResult:
    """Train a denoising head on top of a frozen generative block.

    The block maps each RAW image of ``dataset`` once; only the head's
    parameters are optimised (L1 to the reference on the train split).
    Held-out L1/PSNR/SSIM are reported on the test split.
    """
    expected = init_generative_block(cfg.gb_config(), np.random.default_rng(0)).shapes()
    if trained_omega.shapes() != expected:
        raise ValueError("generative block parameters do not match the pipeline configuration")
    before = trained_omega.flatten().copy()
    frozen = trained_omega.unflatten(before)
    xs = []
    for start in range(0, len(dataset), cfg.eval_batch):
        raw = Tensor(dataset.raw[start:start + cfg.eval_batch])
        xs.append(generative_block_forward(raw, frozen).data)
    x_all = np.concatenate(xs)

    theta0 = init_three_conv(cfg.enhancer_width, np.random.default_rng(head_seed), last_scale=0.01)

    def loss(theta, idx):
        return loss_upper_l1(denoise_forward(Tensor(x_all[idx]), theta), dataset.clean[idx])

    theta = _train_head(loss, theta0, dataset.indices("train"), head_cfg)
    test = dataset.indices("test")
    out = denoise_forward(Tensor(x_all[test]), theta0.unflatten(theta)).data
    metrics = image_metrics(np.clip(out, 0, 1), dataset.clean[test])
    unchanged = bool(np.array_equal(before, frozen.flatten()) and np.array_equal(before, trained_omega.flatten()))
    return TransferResult(metrics, unchanged, theta)
