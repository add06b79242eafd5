import numpy as np
import pytest

from bgl.lowlight.networks import init_generative_block
from bgl.lowlight.synth import synthesize_dataset
from bgl.lowlight.tasks import (
    EnhancementTask,
    HeadTrainConfig,
    PipelineConfig,
    _batch,
    build_enhancement_problem,
    fixed_gb_baseline,
    fixed_gb_images,
    freeze_and_transfer,
)
from bgl.solvers import SolverConfig, warm_start
from helpers import resolvable_grad_check

SMALL = PipelineConfig(image_size=16, n_train=12, n_val=6, n_test=6, gb_widths=(2, 3, 3, 3), enhancer_width=3)


@pytest.fixture(scope="module")
def small_ds():
    return synthesize_dataset(SMALL.synth_config(0))


def test_losses_finite_at_init(small_ds):
    p = build_enhancement_problem(SMALL, small_ds)
    assert np.isfinite(p.upper_value(p.omega0, p.theta0))
    assert np.isfinite(p.lower_value(p.omega0, p.theta0))


def test_batches_come_from_disjoint_splits(small_ds):
    task = EnhancementTask(SMALL, small_ds, batch_size=3)
    assert not set(task.splits["val"]) & set(task.splits["train"])
    rng = np.random.default_rng(0)
    for _ in range(20):
        up, low = task.sample_batches(rng)
        assert set(up.indices) <= set(task.splits["val"])
        assert set(low.indices) <= set(task.splits["train"])


def test_empty_split_rejected():
    ds = synthesize_dataset(PipelineConfig(image_size=16, n_train=2, n_val=0, n_test=1).synth_config(0))
    with pytest.raises(ValueError):
        EnhancementTask(SMALL, ds)


def test_pipeline_config_validation():
    with pytest.raises(ValueError):
        PipelineConfig(s_min=1.0)
    with pytest.raises(ValueError):
        PipelineConfig(w_smooth=-0.1)
    with pytest.raises(ValueError):
        PipelineConfig(image_size=20)


def test_end_to_end_gradient_matches_fd(small_ds):
    task = EnhancementTask(SMALL, small_ds, batch_size=2, init_seed=3)
    batch = _batch(small_ds, task.splits["val"][:1])
    worst, normwise, _ = resolvable_grad_check(lambda w: task.upper_loss(w, task.theta_init, batch),
                                               task.omega_init, tol=1e-4)
    assert worst < 1e-4 and normwise < 1e-4


def test_gb_cache_does_not_change_values(small_ds):
    task = EnhancementTask(SMALL, small_ds)
    p = task.problem()
    a = p.lower_value(p.omega0, p.theta0)
    b = p.lower_value(p.omega0, p.theta0)
    _, g = p.lower_grads(p.omega0, p.theta0)
    assert a == b and np.all(np.isfinite(g["omega"]))


@pytest.mark.xfail(strict=True, reason="joint descent on the illumination loss darkens the GB output; see ledger")
def test_warm_phase_decreases_upper_loss():
    cfg = PipelineConfig()
    ds = synthesize_dataset(cfg.synth_config(0))
    task = EnhancementTask(cfg, ds, batch_size=2, init_seed=1)
    p = task.problem()
    val = _batch(ds, task.splits["val"])
    before = task.upper_loss(task.omega_init, task.theta_init, val).item()
    s = warm_start(p, SolverConfig(warm_steps=200, seed=1))
    omega, theta = s.params(p)
    assert task.upper_loss(omega, theta, val).item() < before


def test_evaluate_metrics(small_ds):
    task = EnhancementTask(SMALL, small_ds)
    m = task.evaluate(task.omega_init.flatten(), task.theta_init.flatten())
    assert set(m) == {"psnr", "ssim", "l1"}
    assert 0 < m["l1"] < 1 and np.isfinite(m["psnr"])


def test_fixed_gb_images(small_ds):
    x = fixed_gb_images(small_ds)
    assert x.shape == small_ds.clean.shape
    assert x.min() >= 0 and x.max() <= 1


def test_fixed_gb_baseline_runs(small_ds):
    task = EnhancementTask(SMALL, small_ds)
    m = fixed_gb_baseline(task, HeadTrainConfig(steps=5, batch_size=4))
    assert np.isfinite(m["psnr"])


def test_transfer_keeps_omega_frozen(small_ds):
    omega = init_generative_block(SMALL.gb_config(), np.random.default_rng(5))
    before = omega.flatten().tobytes()
    res = freeze_and_transfer(omega, small_ds, SMALL, HeadTrainConfig(steps=10, batch_size=4))
    assert res.omega_unchanged
    assert omega.flatten().tobytes() == before
    assert np.isfinite(res.metrics["l1"])


def test_transfer_trains_only_the_head(small_ds):
    omega = init_generative_block(SMALL.gb_config(), np.random.default_rng(5))
    zero = freeze_and_transfer(omega, small_ds, SMALL, HeadTrainConfig(steps=0))
    some = freeze_and_transfer(omega, small_ds, SMALL, HeadTrainConfig(steps=20, batch_size=4))
    assert zero.theta.shape == some.theta.shape
    assert np.linalg.norm(some.theta - zero.theta) > 0


def test_transfer_shape_mismatch(small_ds):
    wrong = init_generative_block(PipelineConfig(gb_widths=(2, 2, 2, 2)).gb_config(), np.random.default_rng(0))
    with pytest.raises(ValueError):
        freeze_and_transfer(wrong, small_ds, SMALL, HeadTrainConfig(steps=1))
