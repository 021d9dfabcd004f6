import numpy as np
import pytest

from xraygen import lora as L
from xraygen import tensor as T
from xraygen.encoder import EncoderConfig, VisualEncoder
from xraygen.model import Geometry
from xraygen.nn import Linear
from xraygen.tensor import Tensor


def _layer(rng, d=6, k=5, bias=True, r=2, alpha=3.0):
    base = Linear(k, d, rng, bias=bias)
    if bias:
        base.bias.data = rng.normal(size=d)
    return base, L.LoraLinear(base, r, alpha, rng)


def test_fresh_wrap_is_forward_identical(rng):
    base, lo = _layer(rng)
    w0 = base.weight.data.copy()
    x = Tensor(rng.normal(size=(4, 5)))
    np.testing.assert_array_equal(lo(x).data, x.data @ w0.T + base.bias.data)
    np.testing.assert_array_equal(lo.lora_B.data, 0.0)


def test_default_scale_is_one():
    assert L.DEFAULT_RANK == 16 and L.DEFAULT_ALPHA == 16.0
    base = Linear(32, 32, np.random.default_rng(0))
    assert L.wrap(base).scale == 1.0


@pytest.mark.parametrize("r", [0, 5, 6])
def test_rank_bounds(rng, r):
    base = Linear(5, 6, rng)
    with pytest.raises(L.LoraConfigError):
        L.LoraLinear(base, r, 1.0, rng)


def test_wrap_rejects_double_wrap(rng):
    enc = VisualEncoder(EncoderConfig(image_size=16, patch_size=8, embed_dim=8, num_layers=1, num_heads=2), rng)
    L.apply_lora(enc, r=2, alpha=2.0)
    with pytest.raises(L.LoraConfigError):
        L.wrap(enc.attention_projections()[0])


def test_effective_weight_rank_one_example():
    base = Linear(2, 2, np.random.default_rng(0), bias=False)
    lo = L.LoraLinear(base, 1, 1.0, np.random.default_rng(0))
    lo.lora_B.data = np.array([[1.0], [1.0]])
    lo.lora_A.data = np.array([[1.0, 1.0]])
    np.testing.assert_array_equal(lo.effective_weight(), base.weight.data + [[1.0, 1.0], [1.0, 1.0]])


def test_effective_weight_zero_delta_and_alpha_linearity(rng):
    base, lo = _layer(rng)
    np.testing.assert_array_equal(lo.effective_weight(), base.weight.data)
    lo.lora_B.data = rng.normal(size=lo.lora_B.shape)
    d1 = lo.effective_weight() - base.weight.data
    lo.alpha = 2 * lo.alpha
    d2 = lo.effective_weight() - base.weight.data
    np.testing.assert_allclose(d2, 2 * d1, rtol=1e-14)


def test_merge_agrees_with_factored_path(rng):
    base, lo = _layer(rng)
    lo.lora_B.data = rng.normal(size=lo.lora_B.shape)
    lo.lora_A.data = rng.normal(size=lo.lora_A.shape)
    merged = lo.merge()
    x = rng.normal(size=(100, 5))
    two_path = x @ base.weight.data.T + lo.scale * ((x @ lo.lora_A.data.T) @ lo.lora_B.data.T) + base.bias.data
    np.testing.assert_allclose(merged(Tensor(x)).data, two_path, rtol=0, atol=1e-12)
    np.testing.assert_allclose(lo(Tensor(x)).data, merged(Tensor(x)).data, rtol=0, atol=1e-12)
    np.testing.assert_array_equal(lo.merge().weight.data, merged.weight.data)


def test_merge_after_zero_steps_is_w0(rng):
    base, lo = _layer(rng)
    np.testing.assert_array_equal(lo.merge().weight.data, base.weight.data)


def test_forward_is_linear_in_input(rng):
    base, lo = _layer(rng, bias=False)
    lo.lora_B.data = rng.normal(size=lo.lora_B.shape)
    x, y = rng.normal(size=(3, 5)), rng.normal(size=(3, 5))
    f = lambda v: lo(Tensor(v)).data
    np.testing.assert_allclose(f(2 * x - 3 * y), 2 * f(x) - 3 * f(y), atol=1e-12)


def test_gradient_partition(rng):
    base, lo = _layer(rng)
    lo.lora_B.data = rng.normal(size=lo.lora_B.shape)
    T.backward(lo(Tensor(rng.normal(size=(4, 5)))).sum())
    assert lo.lora_A.grad is not None and np.abs(lo.lora_A.grad).sum() > 0
    assert lo.lora_B.grad is not None and np.abs(lo.lora_B.grad).sum() > 0
    assert lo.weight.grad is None and lo.bias.grad is None


def test_train_then_merge_has_no_hidden_state(rng):
    base, lo = _layer(rng)
    x = Tensor(rng.normal(size=(8, 5)))
    for _ in range(5):
        lo.lora_A.grad = lo.lora_B.grad = None
        y = lo(x)
        T.backward((y * y).sum())
        lo.lora_A.data = lo.lora_A.data - 0.01 * lo.lora_A.grad
        lo.lora_B.data = lo.lora_B.data - 0.01 * lo.lora_B.grad
    analytic = base.weight.data + lo.scale * (lo.lora_B.data @ lo.lora_A.data)
    np.testing.assert_array_equal(lo.merge().weight.data, analytic)


def test_apply_lora_targets_query_and_value(rng):
    enc = VisualEncoder(EncoderConfig(image_size=16, patch_size=8, embed_dim=8, num_layers=2, num_heads=2), rng)
    adapters = L.apply_lora(enc, r=2, alpha=2.0)
    assert len(adapters) == 4
    names = [n for n, _ in L.lora_modules(enc)]
    assert names == ["layer0.query", "layer0.value", "layer1.query", "layer1.value"]
    params = [n for n, _ in enc.named_parameters()]
    assert "layer0.query.lora_A" in params and "layer1.value.lora_B" in params
    assert not any("key.lora" in n or "output.lora" in n for n in params)


def test_merge_lora_restores_plain_linears(rng):
    enc = VisualEncoder(EncoderConfig(image_size=16, patch_size=8, embed_dim=8, num_layers=1, num_heads=2), rng)
    imgs = rng.uniform(size=(2, 1, 16, 16))
    L.apply_lora(enc, r=2, alpha=2.0)
    for _, m in L.lora_modules(enc):
        m.lora_B.data = rng.normal(size=m.lora_B.shape) * 0.1
    before = enc(imgs).data
    L.merge_lora(enc)
    assert not L.lora_modules(enc)
    np.testing.assert_allclose(enc(imgs).data, before, atol=1e-12)


def test_param_count_formula():
    assert L.lora_param_count([(512, 512), (512, 512)], 16) == 32_768
    assert L.lora_param_count([(4, 4)], 1) == 8
    with pytest.raises(L.LoraConfigError):
        L.lora_param_count([(4, 4)], 0)


def test_param_count_large_geometry():
    widths = [128] * 2 + [256] * 2 + [512] * 18 + [1024] * 2
    assert L.lora_param_count(L.qv_shapes(widths), 16) == 770_048
    assert Geometry.full_size().lora_count() == 770_048


def test_param_count_matches_enumeration(rng):
    enc = VisualEncoder(EncoderConfig(image_size=16, patch_size=8, embed_dim=8, num_layers=3, num_heads=2), rng)
    predicted = L.lora_param_count(enc.attention_projections(), 3)
    L.apply_lora(enc, r=3, alpha=1.0)
    counted = sum(p.size for n, p in enc.named_parameters() if n.endswith(("lora_A", "lora_B")))
    assert counted == predicted == 3 * 2 * 3 * 16
