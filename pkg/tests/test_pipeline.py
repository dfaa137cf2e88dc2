from dataclasses import replace

import numpy as np
import pytest
import torch

from radssl.encoder import EncoderConfig, init_encoder
from radssl.features import from_array
from radssl.losses import LossWeights
from radssl.pipeline import (
    FoldAudit,
    LeakageError,
    TrainConfig,
    ablate,
    class_weights,
    finetune,
    nested_cv,
    outer_folds,
    predict,
    pretrain,
    sweep_config,
)
from radssl.simulator import SimConfig, generate, reference_spec

TINY_ENC = EncoderConfig(n_blocks=1, n_heads=2, d_model=4, d_embed=2, d_recon_hidden=4)
TINY = TrainConfig(epochs=2, batch_size=4, K=3, k_max=2, finetune_epochs=3, finetune_batch_size=8, head_hidden=4)


@pytest.fixture(scope="module")
def sim():
    return generate(reference_spec(5, 4, seed=0), SimConfig(24, 0.01, separated_rois=(0, 1), seed=0))


# -- configuration ------------------------------------------------------------------------


def test_defaults():
    cfg = TrainConfig()
    assert (cfg.epochs, cfg.batch_size, cfg.learning_rate, cfg.weight_decay, cfg.k_max, cfg.K) == (
        500, 8, 1e-3, 1e-3, 30, 50)
    assert cfg.loss_weights == LossWeights(0.5, 1.0, 0.1)


@pytest.mark.parametrize("bad", [dict(epochs=0), dict(learning_rate=0.0), dict(task_mode="other"),
                                 dict(label_fraction=0.0), dict(recon_target="rows")])
def test_config_errors(bad):
    with pytest.raises(ValueError):
        TrainConfig(**bad)


# -- pretraining ---------------------------------------------------------------------------


def test_batch_size_one_is_rejected(sim):
    with pytest.raises(ValueError, match="batch_size"):
        pretrain(sim, TINY_ENC, TrainConfig(batch_size=1, epochs=1))


def test_pretrain_history_and_determinism(sim):
    enc_a, hist_a = pretrain(sim, TINY_ENC, TINY)
    enc_b, hist_b = pretrain(sim, TINY_ENC, TINY)
    assert len(hist_a) == TINY.epochs
    assert hist_a == hist_b
    assert torch.equal(enc_a.flat_parameters(), enc_b.flat_parameters())


def test_lambda_zero_changes_trajectory_and_matches_recon_only(sim):
    default, _ = pretrain(sim, TINY_ENC, TINY)
    lam0 = sweep_config(TINY, "lambda", 0.0)
    no_disc, _ = pretrain(sim, TINY_ENC, lam0)
    recon_only, _ = pretrain(sim, TINY_ENC, sweep_config(TINY, "task_mode", "recon_only"))
    assert not torch.equal(default.flat_parameters(), no_disc.flat_parameters())
    assert torch.equal(no_disc.flat_parameters(), recon_only.flat_parameters())


def test_pretraining_loss_decreases():
    d = generate(reference_spec(10, 20, seed=1), SimConfig(200, 0.01, separated_rois=(0, 1), seed=1))
    enc_cfg = EncoderConfig(n_blocks=1, n_heads=2, d_model=20, d_embed=4, d_recon_hidden=20)
    cfg = TrainConfig(epochs=50, batch_size=8, K=4, k_max=3)
    _, hist = pretrain(d, enc_cfg, cfg)
    assert hist[-1] < hist[0]
    assert np.median(hist[-5:]) < np.median(hist[:5])


def test_pretraining_without_a_task_is_rejected(sim):
    with pytest.raises(ValueError):
        pretrain(sim, TINY_ENC, sweep_config(TINY, "task_mode", "none"))


# -- fine-tuning -----------------------------------------------------------------------------


def test_class_weights_inverse_frequency():
    w = class_weights([0] * 90 + [1] * 10)
    np.testing.assert_allclose(w / w.sum(), np.array([1 / 90, 1 / 10]) / (1 / 90 + 1 / 10))
    with pytest.raises(ValueError):
        class_weights([1, 1, 1])


def test_separable_toy_reaches_perfect_training_accuracy():
    rng = np.random.default_rng(0)
    y = np.array([0, 1] * 10)
    x = rng.normal(0, 0.3, size=(20, 2, 2))
    x[:, :, 0] += np.where(y == 1, 3.0, -3.0)[:, None]
    d = from_array(x, labels=y)
    enc_cfg = EncoderConfig(n_blocks=1, n_heads=1, d_model=2, d_embed=2, d_recon_hidden=2)
    cfg = TrainConfig(finetune_epochs=200, finetune_batch_size=20, learning_rate=1e-2, head_hidden=8)
    model, hist = finetune(None, d, "classification", cfg, enc_cfg=enc_cfg)
    pred = predict(model, d) >= 0.5
    assert np.array_equal(pred, y == 1)
    assert hist[-1] < hist[0]


def test_constant_regression_target():
    rng = np.random.default_rng(1)
    d = from_array(rng.normal(size=(16, 3, 2)), labels=np.full(16, 2.5))
    enc_cfg = EncoderConfig(n_blocks=1, n_heads=1, d_model=2, d_embed=2, d_recon_hidden=2)
    cfg = TrainConfig(finetune_epochs=200, finetune_batch_size=16, learning_rate=1e-2, head_hidden=8)
    model, _ = finetune(None, d, "regression", cfg, enc_cfg=enc_cfg)
    assert np.abs(predict(model, d) - 2.5).mean() < 0.05


def test_finetune_errors(sim):
    unlabeled = from_array(sim.tensor())
    with pytest.raises(ValueError, match="labels"):
        finetune(init_encoder(TINY_ENC), unlabeled, "classification", TINY)
    regression = from_array(sim.tensor(), labels=np.linspace(0, 1, len(sim)))
    with pytest.raises(ValueError, match="classification"):
        finetune(init_encoder(TINY_ENC), regression, "classification", TINY)


def test_finetune_leaves_pretrained_encoder_alone(sim):
    enc = init_encoder(TINY_ENC)
    before = enc.flat_parameters()
    model, _ = finetune(enc, sim, "classification", TINY)
    assert torch.equal(enc.flat_parameters(), before)
    assert not torch.equal(model.encoder.flat_parameters(), before)


# -- cross-validation ------------------------------------------------------------------------


def test_outer_folds_partition(sim):
    folds = outer_folds(sim, 4, seed=3)
    tests = [set(te.tolist()) for _, te in folds]
    assert set().union(*tests) == set(range(len(sim)))
    assert sum(len(t) for t in tests) == len(sim)
    for tr, te in folds:
        assert not set(tr.tolist()) & set(te.tolist())


def test_too_many_folds(sim):
    with pytest.raises(ValueError, match="exceeds"):
        outer_folds(sim, len(sim) + 1, seed=0)


def test_nested_cv_never_touches_test_subjects(sim):
    audit = FoldAudit()
    report = nested_cv(sim, TINY_ENC, TINY, folds=3, repetitions=2, audit=audit)
    assert len(report.runs) == 6
    for (rep, fold), stages in audit.records.items():
        test = stages["test"]
        for stage in ("normalization", "pretraining", "finetuning", "validation"):
            assert stages[stage], stage
            assert not stages[stage] & test
    # each repetition tests every subject exactly once
    for rep in range(2):
        seen = [s for (r, _), st in audit.records.items() if r == rep for s in st["test"]]
        assert sorted(seen) == sorted(sim.subject_ids)


def test_audit_catches_leaks():
    audit = FoldAudit()
    audit.touch(0, 0, "test", ["a"])
    audit.touch(0, 0, "pretraining", ["b", "a"])
    with pytest.raises(LeakageError, match="pretraining"):
        audit.check(0, 0)


def test_nested_cv_reproducible(sim):
    a = nested_cv(sim, TINY_ENC, TINY, folds=3, repetitions=1)
    b = nested_cv(sim, TINY_ENC, TINY, folds=3, repetitions=1)
    for name in a.metric_names:
        np.testing.assert_allclose(a.values(name), b.values(name), atol=1e-6)


def test_regression_cv(sim):
    d = from_array(sim.tensor(), labels=sim.tensor()[:, 0, 0] * 10)
    report = nested_cv(d, TINY_ENC, TINY, folds=3, repetitions=1)
    assert report.task == "regression" and len(report.runs) == 3


# -- ablation ---------------------------------------------------------------------------------


def test_ablation_tables(sim):
    rows = ablate(sim, TINY_ENC, TINY, {"beta": [0.0, 1.0], "task_mode": ["recon_only", "none"]}, folds=3,
                  repetitions=1)
    assert [(r.sweep, r.value) for r in rows] == [("beta", 0.0), ("beta", 1.0), ("task_mode", "recon_only"),
                                                   ("task_mode", "none")]
    assert all(len(r.report.runs) == 3 for r in rows)


def test_recon_only_ignores_lambda(sim):
    rows = ablate(sim, TINY_ENC, sweep_config(TINY, "task_mode", "recon_only"), {"lambda": [0.0, 2.0]}, folds=3,
                  repetitions=1)
    np.testing.assert_array_equal(rows[0].report.values("auc"), rows[1].report.values("auc"))
    lam0 = nested_cv(sim, TINY_ENC, sweep_config(TINY, "lambda", 0.0), folds=3, repetitions=1)
    np.testing.assert_array_equal(rows[0].report.values("auc"), lam0.values("auc"))


def test_five_value_grid_gives_five_rows(sim):
    quick = replace(TINY, epochs=1, finetune_epochs=1)
    rows = ablate(sim, TINY_ENC, quick, {"beta": [0, 0.2, 0.5, 0.7, 1.0]}, folds=2, repetitions=1)
    assert [r.value for r in rows] == [0, 0.2, 0.5, 0.7, 1.0]


def test_label_fraction_reuses_the_pretrained_encoder(sim):
    rows = ablate(sim, TINY_ENC, TINY, {"label_fraction": [0.5, 1.0]}, folds=3, repetitions=1)
    assert len(rows) == 2


def test_ablation_errors(sim):
    with pytest.raises(ValueError, match="empty"):
        ablate(sim, TINY_ENC, TINY, {})
    with pytest.raises(ValueError, match="unknown sweep"):
        sweep_config(TINY, "gamma", 1.0)
