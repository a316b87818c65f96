import math

import numpy as np
import pytest
import torch
from torch import nn

from cotseg.errors import ConfigurationError, DivergenceError, FreezePolicyError
from cotseg.segcore import PromptableSegmenter, read_checkpoint
from cotseg.training import (
    InMemoryData,
    TrainConfig,
    batch_indices,
    bce_loss,
    check_freeze_policy,
    compute_loss,
    dice_loss,
    fit,
    freeze_policy,
    make_optimizer,
    read_loss_log,
)

TINY = dict(d_llm=8, d_vis=16, d_hidden=32, num_heads=2, encoder_depth=1, decoder_depth=1, mask_channels=4)


def _data(n=4, seed=0):
    rng = np.random.default_rng(seed)
    images = rng.integers(0, 256, (n, 32, 32, 3), dtype=np.uint8)
    prompts = [rng.standard_normal((1 + i % 3, 8)).astype(np.float32) for i in range(n)]
    masks = []
    for i in range(n):
        m = np.zeros((32, 32), np.uint8)
        m[i * 4 : i * 4 + 12, 8:20] = 1
        masks.append(m)
    return InMemoryData(images, prompts, masks)


def _params(model):
    return {n: p.detach().clone() for n, p in model.named_parameters()}


class TestLosses:
    def test_zero_logits_bce_is_ln2(self):
        t = torch.randint(0, 2, (3, 5, 5)).double()
        assert float(bce_loss(torch.zeros_like(t), t)) == pytest.approx(math.log(2), abs=1e-12)

    def test_saturation_limit(self):
        t = torch.randint(0, 2, (2, 4, 4)).double()
        logits = (2 * t - 1) * 50
        assert float(bce_loss(logits, t)) < 1e-20
        assert float(dice_loss(logits, t)) < 1e-12

    def test_bce_matches_per_pixel_loop(self):
        rng = np.random.default_rng(0)
        x, t = rng.standard_normal((2, 3, 4)) * 3, (rng.random((2, 3, 4)) < 0.5).astype(float)
        total = 0.0
        for xi, ti in zip(x.ravel(), t.ravel()):
            p = 1 / (1 + math.exp(-xi))
            total += -(ti * math.log(p) + (1 - ti) * math.log(1 - p))
        assert float(bce_loss(x, t)) == pytest.approx(total / x.size, abs=1e-12)

    def test_dice_matches_loop(self):
        rng = np.random.default_rng(1)
        x, t = rng.standard_normal((3, 4, 5)), (rng.random((3, 4, 5)) < 0.3).astype(float)
        per = []
        for b in range(3):
            inter = ps = ts = 0.0
            for xi, ti in zip(x[b].ravel(), t[b].ravel()):
                p = 1 / (1 + math.exp(-xi))
                inter += p * ti
                ps += p
                ts += ti
            per.append(1 - (2 * inter + 1.0) / (ps + ts + 1.0))
        assert float(dice_loss(x, t)) == pytest.approx(sum(per) / 3, abs=1e-7)

    def test_weighted_sum(self):
        x, t = torch.randn(2, 4, 4, dtype=torch.float64), torch.randint(0, 2, (2, 4, 4)).double()
        rec = compute_loss(x, t, TrainConfig(lambda_bce=0.3, lambda_dice=2.0))
        assert float(rec.total) == pytest.approx(0.3 * float(bce_loss(x, t)) + 2.0 * float(dice_loss(x, t)), abs=1e-12)

    def test_config_validation(self):
        with pytest.raises(ConfigurationError):
            TrainConfig(learning_rate=-1)
        with pytest.raises(ConfigurationError):
            TrainConfig(batch_size=0)


class TestFreezePolicy:
    def test_encoder_frozen_rest_trainable(self):
        model = PromptableSegmenter(**TINY)
        names = freeze_policy(model)
        assert names and not any(n.startswith("encoder.") for n in names)
        assert {n.split(".")[0] for n in names} == {"adapters", "decoder", "projection"}
        for n, p in model.named_parameters():
            assert p.requires_grad == (n in names)
        assert not any(n.startswith("projection.") for n in freeze_policy(model, train_projection=False))

    def test_encoder_in_trainable_set_rejected(self):
        model = PromptableSegmenter(**TINY)
        with pytest.raises(FreezePolicyError):
            check_freeze_policy(model, freeze_policy(model) + ["encoder.patch_embed.weight"])

    def test_encoder_unchanged_by_training(self):
        model = PromptableSegmenter(**TINY)
        before = _params(model)
        fit(TrainConfig(learning_rate=1e-2, batch_size=2, total_iterations=3), _data(), model)
        after = _params(model)
        assert all(torch.equal(before[n], after[n]) for n in before if n.startswith("encoder."))
        assert not all(torch.equal(before[n], after[n]) for n in before if n.startswith("decoder."))


class TestOptimizer:
    def test_zero_rates_leave_parameters_identical(self):
        model = PromptableSegmenter(**TINY)
        before = _params(model)
        fit(TrainConfig(learning_rate=0.0, weight_decay=0.0, batch_size=2, total_iterations=3), _data(), model)
        assert all(torch.equal(before[n], p) for n, p in model.named_parameters())

    def test_adamw_closed_form_recurrence(self):
        class Scalar(nn.Module):
            def __init__(self):
                super().__init__()
                self.w = nn.Parameter(torch.tensor(2.0, dtype=torch.float64))

        lr, wd, b1, b2, eps = 0.1, 0.05, 0.9, 0.999, 1e-8
        mod = Scalar()
        opt = make_optimizer(mod, ["w"], TrainConfig(learning_rate=lr, weight_decay=wd))
        theta, m, v = 2.0, 0.0, 0.0
        for t in range(1, 6):
            opt.zero_grad()
            (0.5 * mod.w**2).backward()
            opt.step()
            g = theta
            theta *= 1 - lr * wd
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            theta -= lr * (m / (1 - b1**t)) / (math.sqrt(v / (1 - b2**t)) + eps)
            assert float(mod.w.detach()) == pytest.approx(theta, abs=1e-12)


class TestFit:
    def test_zero_iterations_checkpoint_equals_init(self, tmp_path):
        model = PromptableSegmenter(**TINY)
        init = _params(model)
        result = fit(TrainConfig(total_iterations=0), _data(), model, out_dir=tmp_path)
        assert [p.name for p in result.checkpoints] == ["ckpt_000000.npz"]
        manifest, params, _ = read_checkpoint(result.checkpoints[0])
        assert manifest["iteration"] == 0
        assert all(np.array_equal(params[n], init[n].numpy()) for n in init)

    def test_batch_indices_are_a_function_of_seed_and_step(self):
        assert np.array_equal(batch_indices(10, 4, 3, 7), batch_indices(10, 4, 3, 7))
        assert not np.array_equal(batch_indices(100, 8, 3, 7), batch_indices(100, 8, 3, 8))
        assert len(set(batch_indices(10, 4, 0, 0).tolist())) == 4

    def test_resume_matches_uninterrupted_run(self, tmp_path):
        cfg = TrainConfig(learning_rate=1e-3, batch_size=2, total_iterations=6, checkpoint_every=3)
        full = PromptableSegmenter(**TINY)
        fit(cfg, _data(), full, out_dir=tmp_path / "full")

        part = PromptableSegmenter(**TINY)
        first = fit(cfg, _data(), part, out_dir=tmp_path / "part", stop_at=3)
        assert first.iteration == 3 and (tmp_path / "part" / "latest.txt").read_text().strip() == "ckpt_000003.npz"
        resumed = PromptableSegmenter(**TINY, seed=99)
        second = fit(cfg, _data(), resumed, out_dir=tmp_path / "part", resume_from=first.checkpoints[-1])
        assert second.iteration == 6
        for (n, a), (_, b) in zip(full.named_parameters(), resumed.named_parameters()):
            assert torch.equal(a, b), n
        log_full = read_loss_log(tmp_path / "full" / "loss_log.jsonl")
        log_part = read_loss_log(tmp_path / "part" / "loss_log.jsonl")
        assert [r["iteration"] for r in log_part] == list(range(1, 7))
        assert [r["total"] for r in log_part] == [r["total"] for r in log_full]
        assert set(log_full[0]) == {"iteration", "total", "bce", "dice", "lr", "wall_clock"}

    def test_divergence_reports_batch(self):
        model = PromptableSegmenter(**TINY)
        with torch.no_grad():
            model.projection.fc1.weight.fill_(float("nan"))
        with pytest.raises(DivergenceError) as err:
            fit(TrainConfig(batch_size=2, total_iterations=1), _data(), model)
        assert len(err.value.batch_ids) == 2

    def test_loss_decreases(self):
        model = PromptableSegmenter(**TINY)
        result = fit(TrainConfig(learning_rate=3e-3, batch_size=4, total_iterations=60), _data(), model)
        first, last = result.losses[0]["total"], np.mean([r["total"] for r in result.losses[-5:]])
        assert last < 0.7 * first
