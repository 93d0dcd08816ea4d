import math
from dataclasses import replace

import numpy as np
import pytest

from bioformer import data as D
from bioformer import model as M
from bioformer import training as TR

FD_STEP = 1e-3
# fp32 central differences resolve ~eps32*|loss|/step ~ 6e-5 per entry, so grads whose
# norm sits below this floor are structurally zero (e.g. key biases,
# which cancel inside the softmax); relative error is meaningless there
ZERO_FLOOR = 1e-3


def rel_err(a, b):
    scale = max(np.linalg.norm(a), np.linalg.norm(b))
    if scale < ZERO_FLOOR:
        return 0.0  # structurally zero on both sides
    return float(np.linalg.norm(a - b) / scale)


def fd_grad(f, x):
    g = np.zeros(x.shape, np.float64)
    for idx in np.ndindex(x.shape):
        old = x[idx]
        x[idx] = old + FD_STEP
        a = f()
        x[idx] = old - FD_STEP
        b = f()
        x[idx] = old
        g[idx] = (a - b) / (2 * FD_STEP)
    return g


def perturbed_params(cfg, seed):
    rng = np.random.default_rng(seed)
    p = M.init_params(cfg, seed)
    return {k: (v + rng.normal(0, 0.3, v.shape)).astype(np.float32) for k, v in p.items()}


def batch(cfg, seed, n=5):
    rng = np.random.default_rng(seed + 100)
    return (rng.normal(size=(n, cfg.window_len, cfg.in_channels)).astype(np.float32),
            rng.integers(0, cfg.num_classes, n))


def model_grad_errors(cfg, seed):
    p = perturbed_params(cfg, seed)
    x, y = batch(cfg, seed)
    _, grads = TR.loss_and_grads(x, y, p, cfg)
    loss = lambda: TR.cross_entropy(M.forward_batch(p, x, cfg)[0], y)[0]
    return {k: (rel_err(fd_grad(loss, p[k]), grads[k]), grads[k]) for k in p}


# --- single-op gradients --------------------------------------------------

def test_cross_entropy_gradient(rng):
    z = rng.normal(size=(4, 8))
    y = rng.integers(0, 8, 4)
    _, g = TR.cross_entropy(z, y)
    assert rel_err(fd_grad(lambda: TR.cross_entropy(z, y)[0], z), g) < 1e-2


def test_layernorm_backward(rng):
    x = rng.normal(size=(3, 6)).astype(np.float32)
    gamma = rng.normal(size=6).astype(np.float32)
    beta = rng.normal(size=6).astype(np.float32)
    w = rng.normal(size=(3, 6))
    f = lambda: float(np.sum(w * M.layernorm(x, gamma, beta, 1e-5)))
    dx, dg, db = M._ln_backward(w.astype(np.float32), x, gamma, 1e-5)
    assert rel_err(fd_grad(f, x), dx) < 1e-2
    assert rel_err(fd_grad(f, gamma), dg) < 1e-2
    assert rel_err(fd_grad(f, beta), db) < 1e-2


def test_linear_grads(rng):
    x = rng.normal(size=(2, 3, 4))
    dy = rng.normal(size=(2, 3, 5))
    gw, gb = M._lin_grads(x, dy)
    np.testing.assert_allclose(gw, np.einsum("bsk,bsm->km", x, dy), atol=1e-12)
    np.testing.assert_allclose(gb, dy.sum((0, 1)), atol=1e-12)


@pytest.mark.parametrize("variant", ["default", "no_pos", "no_norm", "deep"])
def test_every_parameter_matches_finite_differences(variant, tiny_cfg):
    cfg = {"default": tiny_cfg, "no_pos": replace(tiny_cfg, use_pos_embedding=False),
           "no_norm": replace(tiny_cfg, norm_residual=False), "deep": replace(tiny_cfg, depth=2)}[variant]
    errs = model_grad_errors(cfg, 7)
    bad = {k: e for k, (e, _) in errs.items() if e >= 1e-2}
    assert not bad


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_full_model_grad_check_seeds(seed, tiny_cfg2):
    errs = model_grad_errors(tiny_cfg2, seed)
    assert max(e for e, _ in errs.values()) < 1e-2


def test_key_bias_gradient_is_zero(tiny_cfg):
    p = perturbed_params(tiny_cfg, 3)
    x, y = batch(tiny_cfg, 3)
    _, g = TR.loss_and_grads(x, y, p, tiny_cfg)
    assert np.abs(g["layers.0.b_key"]).max() < 1e-6
    assert np.abs(g["layers.0.b_query"]).max() > 1e-4


# --- loss -----------------------------------------------------------------

def test_uniform_logits_loss(tiny_cfg):
    p = M.init_params(tiny_cfg, 0)
    cfg8 = replace(tiny_cfg, num_classes=8)
    p = M.init_params(cfg8, 0)
    p["head_w"][:] = 0
    p["head_b"][:] = 0
    x, _ = batch(cfg8, 0)
    loss, _ = TR.loss_and_grads(x, np.arange(5), p, cfg8)
    assert loss == pytest.approx(math.log(8), abs=1e-6)


def test_duplicated_batch_invariance(tiny_cfg):
    p = perturbed_params(tiny_cfg, 4)
    x, y = batch(tiny_cfg, 4)
    l1, g1 = TR.loss_and_grads(x, y, p, tiny_cfg)
    l2, g2 = TR.loss_and_grads(np.concatenate([x, x]), np.concatenate([y, y]), p, tiny_cfg)
    assert abs(l1 - l2) < 1e-6
    for k in p:
        np.testing.assert_allclose(g1[k], g2[k], atol=1e-6)


def test_loss_and_grads_validation(tiny_cfg):
    p = M.init_params(tiny_cfg)
    with pytest.raises(ValueError):
        TR.loss_and_grads(np.zeros((0, 6, 3)), np.zeros(0, int), p, tiny_cfg)
    with pytest.raises(ValueError):
        TR.loss_and_grads(np.zeros((1, 6, 3)), np.array([4]), p, tiny_cfg)


# --- Adam -----------------------------------------------------------------

def test_adam_zero_grads():
    p = {"w": np.array([1.5, -2.0])}
    s = TR.OptimizerState.zeros_like(p)
    p2, s2 = TR.adam_step(p, {"w": np.zeros(2)}, s, 0.1)
    assert np.array_equal(p2["w"], p["w"]) and s2.step == 1


def test_adam_first_step_is_minus_lr():
    p = {"w": np.array([0.0])}
    p2, _ = TR.adam_step(p, {"w": np.array([1.0])}, TR.OptimizerState.zeros_like(p), 0.01)
    assert p2["w"][0] == pytest.approx(-0.01, rel=1e-6)


def test_adam_matches_scalar_reference():
    w_ref, m, v = 1.0, 0.0, 0.0
    lr, b1, b2, eps = 0.1, 0.9, 0.999, 1e-8
    for t in range(1, 11):
        g = 2 * w_ref
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        w_ref -= lr * (m / (1 - b1**t)) / (math.sqrt(v / (1 - b2**t)) + eps)
    p = {"w": np.array([1.0])}
    s = TR.OptimizerState.zeros_like(p)
    for _ in range(10):
        p, s = TR.adam_step(p, {"w": 2 * p["w"]}, s, lr)
    assert abs(p["w"][0] - w_ref) < 1e-7 and s.step == 10


def test_loss_decreases_on_fixed_batch(tiny_cfg):
    p = M.init_params(tiny_cfg, 0)
    x, y = batch(tiny_cfg, 0, n=16)
    s = TR.OptimizerState.zeros_like(p)
    losses = []
    for _ in range(6):
        loss, g = TR.loss_and_grads(x, y, p, tiny_cfg)
        losses.append(loss)
        p, s = TR.adam_step(p, g, s, 1e-3)
    assert all(b < a for a, b in zip(losses, losses[1:]))


# --- learning-rate schedule -----------------------------------------------

def test_lr_schedule_examples():
    c = TR.TrainConfig()
    assert TR.lr_at("pretrain", 0, 0, c) == pytest.approx(1e-7)
    assert TR.lr_at("pretrain", 5, 0, c) == pytest.approx((1e-7 + 5e-4) / 2)
    assert TR.lr_at("pretrain", 10, 0, c) == pytest.approx(5e-4)
    assert TR.lr_at("pretrain", 99, 3, c, 50) == pytest.approx(5e-4)
    assert TR.lr_at("finetune", 9, 0, c) == pytest.approx(1e-4)
    assert TR.lr_at("finetune", 10, 0, c) == pytest.approx(1e-5)
    assert TR.lr_at("finetune", 19, 0, c) == pytest.approx(1e-5)


def test_lr_warmup_is_linear_in_steps():
    c = TR.TrainConfig()
    lrs = [TR.lr_at("pretrain", e, j, c, 7) for e in range(10) for j in range(7)]
    np.testing.assert_allclose(np.diff(lrs), (5e-4 - 1e-7) / 70, rtol=1e-9)


def test_lr_unknown_phase():
    with pytest.raises(ValueError):
        TR.lr_at("eval", 0, 0, TR.TrainConfig())


@pytest.mark.parametrize("bad", [dict(lr_peak=0), dict(finetune_epochs=0), dict(finetune_drop_epoch=20),
                                 dict(batch_size=0)])
def test_train_config_validation(bad):
    with pytest.raises(ValueError):
        TR.TrainConfig(**bad)


# --- protocol -------------------------------------------------------------

@pytest.fixture(scope="module")
def small_ds():
    return D.build_dataset(D.generate_synthetic(3, 10, 1, gesture_s=0.3, rest_s=0.2))


def test_pretrain_pool_excludes_target(small_ds):
    pool = TR.pretrain_pool(small_ds, 1)
    assert set(pool.subjects.tolist()) == {2, 3}
    assert len(pool) == len(small_ds) - int(np.sum(small_ds.subjects == 1))


def test_pretrain_pool_two_subjects(small_ds):
    two = small_ds.subset(small_ds.subjects != 3)
    assert set(TR.pretrain_pool(two, 2).subjects.tolist()) == {1}


def test_pretrain_pool_errors(small_ds):
    with pytest.raises(ValueError):
        TR.pretrain_pool(small_ds, 9)
    with pytest.raises(ValueError):
        TR.pretrain_pool(small_ds.subset(small_ds.subjects == 1), 1)


def test_finetune_missing_sessions(small_ds):
    only_train = small_ds.subset(small_ds.sessions <= 5)
    cfg = M.BioformerConfig(filter=30, heads=2)
    with pytest.raises(ValueError):
        TR.finetune_subject(M.init_params(cfg), only_train, 1, cfg, TR.with_epochs(TR.TrainConfig(), 0, 1))


def test_finetune_reaches_high_train_accuracy_and_never_sees_test():
    ds = D.build_dataset(D.generate_synthetic(1, 10, 1, gesture_s=0.6, rest_s=0.3))
    cfg = M.BioformerConfig(filter=30, heads=2)
    tcfg = TR.with_epochs(TR.TrainConfig(finetune_lr=1e-3), 0, 10)
    log = TR.MetricsLog()
    res = TR.two_stage(ds, 1, cfg, tcfg, pretrain=False, metrics=log)
    assert res.train_acc >= 0.95
    assert res.seen_hashes_disjoint
    assert set(res.session_acc) == {6, 7, 8, 9, 10}
    lines = log.to_csv().splitlines()
    assert lines[0].split(",") == ["epoch", "phase", "lr", "loss", "train_acc"] + [f"test_acc_s{s}" for s in range(6, 11)]
    assert len(lines) == 11


def test_training_is_bit_reproducible(small_ds):
    cfg = M.BioformerConfig(filter=30, heads=2)
    tcfg = TR.with_epochs(TR.TrainConfig(batch_size=32), 1, 2, warmup=1)
    runs = []
    for _ in range(2):
        log = TR.MetricsLog()
        res = TR.two_stage(small_ds, 2, cfg, tcfg, metrics=log)
        runs.append((M.encode_checkpoint(cfg, res.params), log.to_csv()))
    assert runs[0] == runs[1]
