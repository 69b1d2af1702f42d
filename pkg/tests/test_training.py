import copy
import csv
import math

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st
from torch.func import functional_call

from fdcheck import fd_check
from sigvic.codec import SigVIC, load_model
from sigvic.config import CodecConfig, LambdaSpec
from sigvic.errors import ConfigurationError
from sigvic.training import (
    RECORD_HEADER,
    TrainConfig,
    TrainingDiverged,
    calibrate_topk,
    channel_activity,
    distortion,
    lr_at,
    rd_loss,
    sample_lambda,
    train,
    train_step,
)

TINY = CodecConfig(N=16, K=4, sffm_width=8, reduction=4)
MSE_SPEC = LambdaSpec()


# ---------------------------------------------------------------------------
# lambda sampling
# ---------------------------------------------------------------------------


@pytest.mark.parametrize("u,expect", [(0.0, 0.0016), (1.0, 0.045), (0.5, math.sqrt(0.0016 * 0.045))])
def test_sample_lambda_examples(u, expect):
    assert sample_lambda(MSE_SPEC, u) == pytest.approx(expect, rel=1e-12)


def test_sample_lambda_geometric_mean_value():
    assert sample_lambda(MSE_SPEC, 0.5) == pytest.approx(0.008485, abs=1e-6)


@given(st.floats(0.0, 1.0))
def test_sample_lambda_degenerate_range(u):
    assert sample_lambda(LambdaSpec(0.01, 0.01), u) == 0.01


@pytest.mark.parametrize("lo,hi", [(0.0, 0.01), (0.02, 0.01), (-1.0, 1.0)])
def test_lambda_spec_rejects_bad_range(lo, hi):
    with pytest.raises(ConfigurationError):
        LambdaSpec(lo, hi)


@given(st.floats(0.0, 1.0))
def test_sample_lambda_in_range(u):
    lam = sample_lambda(MSE_SPEC, u)
    assert MSE_SPEC.lambda_min <= lam <= MSE_SPEC.lambda_max


def test_sample_lambda_median():
    u = np.random.default_rng(0).random(100_000)
    draws = np.array([sample_lambda(MSE_SPEC, float(v)) for v in u])
    geo = math.sqrt(MSE_SPEC.lambda_min * MSE_SPEC.lambda_max)
    assert abs(np.median(draws) / geo - 1) < 0.05


def test_msssim_defaults():
    spec = LambdaSpec.for_metric("msssim")
    assert (spec.lambda_min, spec.lambda_max) == (5.0, 120.0)


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------


def test_loss_worked_value():
    x = torch.zeros(1, 3, 10, 10, dtype=torch.float64)
    x_hat = torch.full_like(x, 0.01)  # MSE = 1e-4
    loss = rd_loss(x, x_hat, 1.0, 0.0016)
    assert float(loss) == pytest.approx(1.0 + 0.0016 * 65025 * 1e-4, abs=1e-12)
    assert float(loss) == pytest.approx(1.010404, abs=1e-6)


@pytest.mark.parametrize("metric", ["mse", "msssim"])
def test_perfect_reconstruction_costs_rate_only(metric):
    x = torch.rand(1, 3, 48, 48, dtype=torch.float64)
    assert float(rd_loss(x, x.clone(), 0.37, 0.01, metric)) == 0.37


def test_zero_lambda_is_rate():
    x = torch.rand(1, 3, 8, 8)
    assert float(rd_loss(x, torch.rand(1, 3, 8, 8), 0.5, 0.0)) == 0.5


def test_loss_shape_mismatch():
    with pytest.raises(ValueError):
        rd_loss(torch.rand(1, 3, 8, 8), torch.rand(1, 3, 8, 9), 1.0, 0.01)


def test_loss_slope_in_lambda_is_distortion():
    x, x_hat = torch.rand(1, 3, 8, 8, dtype=torch.float64), torch.rand(1, 3, 8, 8, dtype=torch.float64)
    lam = torch.tensor(0.01, dtype=torch.float64, requires_grad=True)
    rd_loss(x, x_hat, 0.3, lam).backward()
    d = distortion(x, x_hat)
    assert lam.grad.item() == pytest.approx(d.item(), rel=1e-12)
    assert d.item() >= 0


def test_unknown_metric():
    with pytest.raises(ConfigurationError):
        distortion(torch.rand(1, 3, 8, 8), torch.rand(1, 3, 8, 8), "l1")


# ---------------------------------------------------------------------------
# schedule and steps
# ---------------------------------------------------------------------------


def test_lr_schedule():
    cfg = TrainConfig(iters=1000, lr=1e-4, lr_final=1e-5, lr_drop_frac=0.05)
    assert lr_at(0, cfg) == 1e-4
    assert lr_at(949, cfg) == 1e-4
    assert lr_at(950, cfg) == 1e-5
    assert lr_at(999, cfg) == 1e-5


@pytest.mark.parametrize(
    "kw", [dict(lr=1e-5, lr_final=1e-4), dict(iters=0), dict(batch_size=-1), dict(lr_drop_frac=1.0)]
)
def test_train_config_validation(kw):
    with pytest.raises(ConfigurationError):
        TrainConfig(**kw)


def _step(seed, batch):
    torch.manual_seed(seed)
    model = SigVIC(copy.deepcopy(TINY))
    opt = torch.optim.Adam(model.parameters(), lr=1e-4, betas=(0.9, 0.999))
    recs = [
        train_step(model, batch, MSE_SPEC, opt, np.random.default_rng(seed), torch.Generator().manual_seed(seed), i)
        for i in range(2)
    ]
    return recs, model


def test_train_step_reproducible():
    batch = torch.rand(2, 3, 32, 32, generator=torch.Generator().manual_seed(0))
    (r1, m1), (r2, m2) = _step(3, batch), _step(3, batch)
    assert [(r.lam, r.loss, r.bpp, r.distortion) for r in r1] == [(r.lam, r.loss, r.bpp, r.distortion) for r in r2]
    assert all(torch.equal(a, b) for a, b in zip(m1.parameters(), m2.parameters()))


def test_train_step_diverged():
    torch.manual_seed(0)
    model = SigVIC(copy.deepcopy(TINY))
    with torch.no_grad():
        model.out_conv.bias.fill_(float("nan"))
    opt = torch.optim.Adam(model.parameters())
    with pytest.raises(TrainingDiverged) as info:
        train_step(model, torch.rand(1, 3, 16, 16), MSE_SPEC, opt, np.random.default_rng(0), torch.Generator())
    assert info.value.record.iter == 0


@pytest.mark.parametrize(
    "name",
    ["enc_convs.0.bias", "enc_convs.1.bias", "enc_stages.1.sgu.gate3_b", "enc_stages.2.ssn.fc1_b",
     "enc_stages.0.ssn.fc2_w", "enc_stages.3.sgu.mask1_b"],
)
def test_end_to_end_gradient(name):
    # whole-model rd loss w.r.t. one encoder parameter, training noise frozen by
    # seed.  The loss is ~200 while some gradients are ~1e-7, so float32 would
    # only measure cancellation; both sides run in float64.
    torch.manual_seed(0)
    model = SigVIC(CodecConfig(N=8, K=2, sffm_width=4, reduction=2)).double().train()
    with torch.no_grad():
        # a fresh SSN has a zero output layer, which would hide its first layer
        for key, p in model.named_parameters():
            if key.endswith("fc2_w"):
                p.normal_(0, 0.3)
    x = torch.rand(1, 3, 16, 16, generator=torch.Generator().manual_seed(1), dtype=torch.float64)
    lam = 0.01

    def loss(p):
        out = functional_call(model, {name: p}, (x, lam, "train", torch.Generator().manual_seed(7)))
        return rd_loss(x, out["x_hat"], out["bpp"], lam)

    param = dict(model.named_parameters())[name].detach()
    assert fd_check(loss, [param], step=1e-5) < 5e-3


# ---------------------------------------------------------------------------
# calibration
# ---------------------------------------------------------------------------


def test_calibration_prefers_scaled_copy():
    torch.manual_seed(0)
    model = SigVIC(CodecConfig(N=16, K=2, sffm_width=8, reduction=4))
    conv = model.enc_convs[0]
    with torch.no_grad():
        conv.weight.mul_(0.01)
        conv.bias.zero_()
        conv.weight[3] = torch.randn_like(conv.weight[3])
        conv.weight[7] = 10 * conv.weight[3]
    images = [torch.rand(3, 32, 32, generator=torch.Generator().manual_seed(i)) for i in range(3)]
    stats = channel_activity(model, images)
    # leaky relu is positively homogeneous, so activity scales exactly
    assert stats[7] == pytest.approx(10 * stats[3], rel=1e-5)
    assert calibrate_topk(model, images) == [3, 7]
    assert model.topk_indices == [3, 7]


def test_calibration_deterministic():
    images = [torch.rand(3, 32, 32, generator=torch.Generator().manual_seed(0))] * 4
    torch.manual_seed(0)
    model = SigVIC(copy.deepcopy(TINY))
    assert calibrate_topk(model, images) == calibrate_topk(model, images)


def test_calibration_empty_set():
    with pytest.raises(ConfigurationError):
        calibrate_topk(SigVIC(copy.deepcopy(TINY)), [])


def test_default_shallow_channel_count():
    assert CodecConfig().K == 32


# ---------------------------------------------------------------------------
# loop
# ---------------------------------------------------------------------------


def test_train_loop_logs_and_calibrates(tmp_path):
    images = [torch.rand(3, 40, 40, generator=torch.Generator().manual_seed(i)) for i in range(6)]
    torch.manual_seed(0)
    model = SigVIC(copy.deepcopy(TINY))
    cfg = TrainConfig(batch_size=2, crop=32, iters=12, calibrate_frac=0.25, checkpoint_every=5, log_every=1)
    log = tmp_path / "log.csv"
    records = train(model, images, cfg, log_path=log, checkpoint_dir=tmp_path)
    assert [r.iter for r in records] == list(range(12))
    assert model.config.topk_indices is not None
    rows = list(csv.reader(open(log)))
    assert tuple(rows[0]) == RECORD_HEADER
    assert len(rows) == 13
    ckpts = sorted(tmp_path.glob("checkpoint_*.npz"))
    assert [p.name for p in ckpts] == ["checkpoint_000005.npz", "checkpoint_000010.npz"]
    assert load_model(ckpts[-1]).config.topk_indices == model.config.topk_indices


def test_train_loop_reproducible():
    images = [torch.rand(3, 40, 40, generator=torch.Generator().manual_seed(i)) for i in range(4)]
    cfg = TrainConfig(batch_size=2, crop=32, iters=6)

    def run():
        torch.manual_seed(0)
        model = SigVIC(copy.deepcopy(TINY))
        return [(r.lam, r.loss) for r in train(model, images, cfg)], model

    (a, ma), (b, mb) = run(), run()
    assert a == b
    assert all(torch.equal(p, q) for p, q in zip(ma.parameters(), mb.parameters()))


def test_loss_drops_over_2000_iterations(train_images):
    from sigvic.training import smoke_configs

    codec, _ = smoke_configs()
    torch.manual_seed(0)
    model = SigVIC(codec)
    cfg = TrainConfig(batch_size=8, crop=32, iters=2001, log_every=500)
    records = train(model, train_images[:200], cfg)
    # single steps are noisy (one lambda each), so compare against the last 50 steps' mean
    final = float(np.mean([r.loss for r in records[-50:]]))
    assert final <= 0.8 * records[0].loss
