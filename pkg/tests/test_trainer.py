import math
from dataclasses import replace

import numpy as np
import pytest

from peftlab import tensor as T
from peftlab.data import VOCAB_SIZE, sentiment3
from peftlab.lora import AdapterConfig, attach_adapters
from peftlab.model import build_model, tiny_config
from peftlab.synthetic import make_records
from peftlab.trainer import (
    AdamState,
    TrainConfig,
    TrainingError,
    accumulate_and_step,
    adam_step,
    encode_all,
    example_loss,
    load_train_config,
    parameter_fingerprint,
    steps_per_epoch,
    train,
)

TASK = sentiment3()
QUIET = AdapterConfig(rank=4, dropout_p=0.0)


def _model(seed=0, adapter=QUIET):
    model = build_model(tiny_config(vocab_size=VOCAB_SIZE), seed=seed)
    attach_adapters(model, adapter, seed=seed)
    for ad in model.adapters.values():  # nonzero B so every adapter gets a gradient
        ad.B.data = np.random.default_rng(seed).normal(0, 0.02, size=ad.B.shape)
    return model


def _snapshot(model):
    return {k: p.data.copy() for k, p in model.trainable_parameters().items()}


# -- adam -------------------------------------------------------------------
def test_adam_zero_gradient_is_noop():
    p = {"w": T.tensor([1.0, -2.0, 3.0])}
    adam_step(p, {"w": np.zeros(3)}, AdamState(), lr=0.1)
    np.testing.assert_array_equal(p["w"].data, [1.0, -2.0, 3.0])


def test_adam_first_step():
    p = {"w": T.tensor([0.0])}
    adam_step(p, {"w": np.array([1.0])}, AdamState(), lr=0.1)
    assert p["w"].data[0] == pytest.approx(-0.1, abs=1e-8)


def test_adam_two_step_trace():
    b1, b2, eps, lr = 0.9, 0.999, 1e-8, 0.01
    g1, g2, x0 = 0.5, -2.0, 1.5
    m1, v1 = (1 - b1) * g1, (1 - b2) * g1**2
    x1 = x0 - lr * (m1 / (1 - b1)) / (math.sqrt(v1 / (1 - b2)) + eps)
    m2, v2 = b1 * m1 + (1 - b1) * g2, b2 * v1 + (1 - b2) * g2**2
    x2 = x1 - lr * (m2 / (1 - b1**2)) / (math.sqrt(v2 / (1 - b2**2)) + eps)
    p, state = {"x": T.tensor([x0])}, AdamState()
    adam_step(p, {"x": np.array([g1])}, state, lr, b1, b2, eps)
    assert abs(p["x"].data[0] - x1) < 1e-12
    adam_step(p, {"x": np.array([g2])}, state, lr, b1, b2, eps)
    assert abs(p["x"].data[0] - x2) < 1e-12
    assert state.step == 2


# -- accumulation -----------------------------------------------------------
def _examples(n, seed=0):
    return encode_all(make_records(n, seed, TASK), TASK, TrainConfig())


def _cfg(**kw):
    return TrainConfig(neftune_alpha=0.0, adapter=QUIET, learning_rate=1e-3, **kw)


def test_accum_one_is_plain_step():
    exs = _examples(3)
    a, b = _model(), _model()
    loss_a = accumulate_and_step(a, [exs], _cfg(grad_accum=1), AdamState())
    # plain step: mean loss, backward, adam
    b.zero_grad()
    total = example_loss(b, exs[0], "train")
    for ex in exs[1:]:
        total = total + example_loss(b, ex, "train")
    loss = total * (1 / 3)
    loss.backward()
    params = b.trainable_parameters()
    adam_step(params, {k: p.grad for k, p in params.items()}, AdamState(), 1e-3)
    assert loss_a == pytest.approx(loss.item(), abs=1e-12)
    for k, v in _snapshot(a).items():
        np.testing.assert_allclose(v, params[k].data, rtol=0, atol=1e-12)


def test_micro_three_by_accum_four_equals_batch_of_twelve():
    exs = _examples(12, seed=1)
    a, b = _model(), _model()
    before = _snapshot(a)
    accumulate_and_step(a, [exs[i:i + 3] for i in range(0, 12, 3)], _cfg(), AdamState())
    accumulate_and_step(b, [exs], _cfg(micro_batch=12, grad_accum=1), AdamState())
    after_a, after_b = _snapshot(a), _snapshot(b)
    for k in before:
        np.testing.assert_allclose(after_a[k] - before[k], after_b[k] - before[k], rtol=0, atol=1e-8)


def test_reported_loss_is_mean_of_micro_batch_losses():
    exs = _examples(6, seed=2)
    model = _model()
    with T.no_grad():
        per = [example_loss(model, ex, "train").item() for ex in exs]
    micro = [exs[:2], exs[2:3], exs[3:6]]
    expected = np.mean([np.mean(per[:2]), per[2], np.mean(per[3:6])])
    assert accumulate_and_step(model, micro, _cfg(), AdamState()) == pytest.approx(expected, abs=1e-12)


def test_empty_micro_batch_rejected():
    with pytest.raises(ValueError):
        accumulate_and_step(_model(), [[]], _cfg(), AdamState())


# -- training loop ----------------------------------------------------------
def _train(records, seed=0, **kw):
    model = build_model(tiny_config(vocab_size=VOCAB_SIZE), seed=seed)
    cfg = TrainConfig(epochs=kw.pop("epochs", 1), seed=seed, learning_rate=1e-3, **kw)
    return train(model, records, TASK, cfg)


def test_training_is_deterministic():
    recs = make_records(30, 3, TASK)
    (r1, m1), (r2, m2) = _train(recs), _train(recs)
    assert r1.step_losses == r2.step_losses
    for k, p in m1.trainable_parameters().items():
        np.testing.assert_array_equal(p.data, m2.trainable_parameters()[k].data)


def test_training_leaves_base_untouched():
    recs = make_records(24, 4, TASK)
    model = build_model(tiny_config(vocab_size=VOCAB_SIZE), seed=0)
    fp = parameter_fingerprint(model.params)
    report, model = train(model, recs, TASK, TrainConfig(epochs=1, learning_rate=1e-3))
    assert parameter_fingerprint(model.params) == fp
    assert report.trainable_params == sum(p.data.size for p in model.trainable_parameters().values())


def test_report_shape_and_partial_window():
    recs = make_records(30, 5, TASK)  # 30 = 2 full windows of 12 + one of 6
    report, _ = _train(recs, epochs=2)
    assert report.steps_per_epoch == steps_per_epoch(30, TrainConfig()) == 3
    assert len(report.step_losses) == 6 and report.epoch_boundaries == [3, 6]
    assert all(math.isfinite(x) for x in report.step_losses)


def test_streaming_and_naive_training_agree():
    recs = make_records(24, 6, TASK)
    (_, a), (_, b) = _train(recs, use_streaming_attention=True, block_size=16), _train(
        recs, use_streaming_attention=False
    )
    for k, p in a.trainable_parameters().items():
        np.testing.assert_allclose(p.data, b.trainable_parameters()[k].data, rtol=0, atol=1e-6)


def test_non_finite_loss_aborts_with_step_and_ids():
    recs = make_records(12, 7, TASK)
    model = build_model(tiny_config(vocab_size=VOCAB_SIZE), seed=0)
    model.params["head"].data = np.full(model.params["head"].shape, 1e308)
    with np.errstate(all="ignore"), pytest.raises(TrainingError, match=r"step 0: .*batch example ids \["):
        train(model, recs, TASK, TrainConfig(epochs=1))


def test_config_file_and_seed_override(tmp_path, monkeypatch):
    p = tmp_path / "train.cfg"
    p.write_text(
        "# comment line\nbatch_size = 2\ngrad_accum = 5\nlearning_rate = 1e-4\nlora_rank = 4\n"
        "lora_scheme = lora\nlora_targets = q,v\nstreaming_attention = false\nseed = 3\n[model]\nn_layers = 1\n"
    )
    monkeypatch.delenv("PEFT_SEED", raising=False)
    cfg, model_section = load_train_config(p)
    assert (cfg.micro_batch, cfg.grad_accum, cfg.learning_rate, cfg.seed) == (2, 5, 1e-4, 3)
    assert cfg.adapter == AdapterConfig(rank=4, scheme="lora", targets=("q", "v"))
    assert cfg.use_streaming_attention is False and model_section == {"n_layers": 1}
    monkeypatch.setenv("PEFT_SEED", "11")
    assert load_train_config(p)[0].seed == 11
    p.write_text("batch_sz = 2\n")
    with pytest.raises(ValueError, match="batch_sz"):
        load_train_config(p)


def test_defaults_mirror_recipe():
    cfg = TrainConfig()
    assert (cfg.micro_batch, cfg.grad_accum, cfg.learning_rate, cfg.epochs, cfg.max_tokens) == (3, 4, 5e-5, 3, 360)
    assert (cfg.adapter.rank, cfg.adapter.dropout_p, cfg.adapter.scheme) == (8, 0.1, "rslora")
    assert cfg.neftune_alpha == 0.3 and cfg.use_streaming_attention and cfg.effective_batch == 12
    with pytest.raises(ValueError):
        replace(cfg, epochs=0)
