import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from peftlab import tensor as T
from peftlab.gradcheck import check_gradients
from peftlab.model import (
    ConfigError,
    ContextLengthError,
    ModelConfig,
    VocabularyError,
    build_model,
    estimate_param_count,
    forward,
    qwen3_8b_preset,
    rmsnorm,
    rope_apply,
    swiglu_ffn,
    tiny_config,
)

from reference import reference_forward


def _tokens(n, vocab, seed=0):
    return np.random.default_rng(seed).integers(0, vocab, size=n).tolist()


# -- config and preset ------------------------------------------------------
def test_tiny_model_builds_and_runs():
    model = build_model(tiny_config(), seed=0)
    logits = forward(model, _tokens(5, 256))
    assert logits.shape == (5, 256)


def test_build_is_deterministic():
    a, b = build_model(tiny_config(), seed=7), build_model(tiny_config(), seed=7)
    for name in a.params:
        np.testing.assert_array_equal(a.params[name].data, b.params[name].data)


def test_invalid_configs_name_the_invariant():
    with pytest.raises(ConfigError, match="n_heads mod n_kv_heads"):
        tiny_config(n_kv_heads=3)
    with pytest.raises(ConfigError, match="n_heads \\* head_dim"):
        tiny_config(head_dim=8)
    with pytest.raises(ConfigError, match="vocab_size"):
        tiny_config(vocab_size=1)


def test_preset_field_values():
    p = qwen3_8b_preset()
    assert (p.n_layers, p.d_model, p.d_ff, p.n_heads, p.n_kv_heads, p.vocab_size, p.max_context) == (
        36, 5120, 13_696, 32, 8, 151_552, 32_768
    )
    assert p.group_size == 4


def test_param_count_matches_enumeration():
    cfg = tiny_config()
    model = build_model(cfg, seed=0)
    assert estimate_param_count(cfg) == sum(p.data.size for p in model.params.values())


def test_param_count_degenerate():
    cfg = ModelConfig(n_layers=0, d_model=1, n_heads=1, n_kv_heads=1, head_dim=1,
                      d_ff=1, vocab_size=2, max_context=4)
    assert estimate_param_count(cfg) == 5


def test_param_count_linear_in_layers():
    c1 = tiny_config(n_layers=2)
    c2 = tiny_config(n_layers=4)
    per_layer = estimate_param_count(tiny_config(n_layers=1)) - estimate_param_count(tiny_config(n_layers=0))
    assert estimate_param_count(c2) - estimate_param_count(c1) == 2 * per_layer


def test_preset_count_exceeds_nominal_size():
    # the layer shapes alone imply well over the nominal ~8.2B
    assert estimate_param_count(qwen3_8b_preset()) > 8.2e9


# -- rope ---------------------------------------------------------------------
def test_rope_position_zero_is_identity():
    x = T.tensor(np.random.default_rng(0).normal(size=(1, 2, 8)))
    np.testing.assert_array_equal(rope_apply(x, [0]).data, x.data)


def test_rope_preserves_pair_norms():
    rng = np.random.default_rng(1)
    x = T.tensor(rng.normal(size=(6, 3, 8)))
    out = rope_apply(x, np.arange(6) * 37).data
    pair = lambda a: np.hypot(a[..., 0::2], a[..., 1::2])  # noqa: E731
    np.testing.assert_allclose(pair(out), pair(x.data), atol=1e-9)


def test_rope_rejects_odd_head_dim():
    with pytest.raises(ConfigError):
        rope_apply(T.zeros((2, 1, 3)), [0, 1])


def test_rope_relative_position_property():
    rng = np.random.default_rng(2)
    for _ in range(100):
        hd = 2 * int(rng.integers(1, 9))
        q, k = rng.normal(size=(1, 1, hd)), rng.normal(size=(1, 1, hd))
        m, n, s = (int(v) for v in rng.integers(0, 500, size=3))
        a = np.dot(rope_apply(T.tensor(q), [m]).data.ravel(), rope_apply(T.tensor(k), [n]).data.ravel())
        b = np.dot(rope_apply(T.tensor(q), [m + s]).data.ravel(), rope_apply(T.tensor(k), [n + s]).data.ravel())
        assert abs(a - b) < 1e-6


# -- rmsnorm / swiglu ---------------------------------------------------------
def test_rmsnorm_examples():
    one = T.tensor(np.ones(4))
    np.testing.assert_allclose(rmsnorm(T.tensor([1.0, 1, 1, 1]), one, 0.0).data, [1, 1, 1, 1])
    out = rmsnorm(T.tensor([3.0, 4.0]), T.tensor([1.0, 1.0]), 0.0).data
    np.testing.assert_allclose(out, np.array([3, 4]) / math.sqrt(12.5), atol=1e-15)
    np.testing.assert_allclose(out, [0.8485, 1.1314], atol=1e-4)


@settings(max_examples=50, deadline=None)
@given(st.floats(1e-3, 1e3), st.integers(0, 1000))
def test_rmsnorm_scale_invariance(c, seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(3, 5))
    w = T.tensor(rng.normal(size=5))
    np.testing.assert_allclose(rmsnorm(T.tensor(c * x), w, 0.0).data, rmsnorm(T.tensor(x), w, 0.0).data, atol=1e-9)


def test_swiglu_examples():
    one = T.tensor([[1.0]])
    assert swiglu_ffn(T.zeros((2, 1)), one, one, one).data.tolist() == [[0.0], [0.0]]
    assert swiglu_ffn(one, one, one, one).item() == pytest.approx(1 / (1 + math.exp(-1)), abs=1e-15)


def test_swiglu_gradients():
    rng = np.random.default_rng(3)
    x = T.tensor(rng.normal(size=(4, 3)))
    gate, up, down = (T.tensor(rng.normal(size=s), requires_grad=True) for s in [(3, 5), (3, 5), (5, 3)])
    errors = check_gradients(lambda: T.sum(swiglu_ffn(x, gate, up, down)), {"gate": gate, "up": up, "down": down})
    assert max(errors.values()) < 1e-5, errors


def test_rmsnorm_gradients():
    rng = np.random.default_rng(4)
    x = T.tensor(rng.normal(size=(3, 6)), requires_grad=True)
    w = T.tensor(rng.normal(size=6), requires_grad=True)
    c = T.tensor(rng.normal(size=(3, 6)))
    errors = check_gradients(lambda: T.sum(rmsnorm(x, w, 1e-6) * c), {"x": x, "w": w})
    assert max(errors.values()) < 1e-5, errors


# -- forward --------------------------------------------------------------------
def test_forward_matches_numpy_reference_with_gqa():
    cfg = tiny_config()
    model = build_model(cfg, seed=0)
    toks = _tokens(11, 256, seed=1)
    ref = reference_forward({k: p.data for k, p in model.params.items()}, cfg, toks)
    np.testing.assert_allclose(forward(model, toks).data, ref, rtol=0, atol=1e-10)


def test_mha_degenerate_case_matches_reference():
    cfg = tiny_config(n_kv_heads=4)
    model = build_model(cfg, seed=5)
    toks = _tokens(9, 256, seed=2)
    ref = reference_forward({k: p.data for k, p in model.params.items()}, cfg, toks)
    np.testing.assert_allclose(forward(model, toks).data, ref, rtol=0, atol=1e-10)


@pytest.mark.parametrize("kernel", ["naive", "streaming"])
def test_causality(kernel):
    model = build_model(tiny_config(), seed=0)
    model.attention_kernel, model.block_size = kernel, 3
    toks = _tokens(10, 256, seed=3)
    base = forward(model, toks).data
    for t in (0, 4, 9):
        changed = list(toks)
        changed[t] = (changed[t] + 17) % 256
        out = forward(model, changed).data
        np.testing.assert_allclose(out[:t], base[:t], rtol=0, atol=1e-12)


def test_eval_forward_is_deterministic():
    model = build_model(tiny_config(), seed=0)
    toks = _tokens(6, 256)
    np.testing.assert_array_equal(forward(model, toks).data, forward(model, toks).data)


def test_forward_input_validation():
    model = build_model(tiny_config(max_context=8), seed=0)
    with pytest.raises(VocabularyError):
        forward(model, [1, 256])
    with pytest.raises(ContextLengthError):
        forward(model, [1] * 9)
    with pytest.raises(ValueError):
        forward(model, [])


def test_end_to_end_gradient_check():
    cfg = ModelConfig(n_layers=1, d_model=8, n_heads=2, n_kv_heads=1, head_dim=4,
                      d_ff=12, vocab_size=16, max_context=16)
    model = build_model(cfg, seed=1)
    for p in model.params.values():  # break the all-ones symmetry of norm weights
        p.data = p.data + np.random.default_rng(2).normal(0, 0.3, size=p.shape)
    toks = _tokens(5, 16, seed=3)

    def loss():
        return T.cross_entropy(forward(model, toks[:-1]), toks[1:])

    errors = check_gradients(loss, model.trainable_parameters())
    assert max(errors.values()) < 1e-4, errors
