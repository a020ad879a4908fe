import numpy as np
import pytest

from voxsep.denoiser import (Denoiser, DenoiserConfig, build_tiny_htmd,
                             htmd_denoiser_config, skip_shapes, tiny_denoiser_config,
                             waveunet_config)
from voxsep.diffcore import Tensor
from voxsep.trainer import deep_loss, loss_preset


@pytest.fixture(scope="module")
def tiny():
    return Denoiser(tiny_denoiser_config(), np.random.default_rng(0))


def test_config_validation():
    with pytest.raises(ValueError):
        DenoiserConfig(bottleneck="what")
    with pytest.raises(ValueError):
        DenoiserConfig(hidden=7)
    with pytest.raises(ValueError):
        DenoiserConfig(depth=0)


def test_skip_shape_table():
    cfg = htmd_denoiser_config()
    table = skip_shapes(cfg, 16384)
    assert table[0] == (1, 16384, 12)
    assert table[2] == (3, 4096, 36)
    assert table[-1] == (12, 8, 144)
    wun = skip_shapes(waveunet_config(), 16384)
    assert wun[-1] == (12, 8, 288)
    with pytest.raises(ValueError):
        skip_shapes(cfg, 16385)


def test_bottleneck_time_arithmetic():
    # 16384 samples through 12 halvings leave 4 bottleneck steps
    assert 16384 // 2 ** htmd_denoiser_config().depth == 4


def test_output_shape_and_range(tiny):
    x = Tensor(np.random.default_rng(1).uniform(-3, 3, (2, 1, 256)).astype(np.float32))
    out = tiny.denoise(x)
    assert out.shape == (2, 1, 256)
    assert np.all(out.data > -1) and np.all(out.data < 1)


def test_off_by_one_length_is_an_error(tiny):
    with pytest.raises(ValueError, match="divisible"):
        tiny.denoise(Tensor(np.zeros((1, 1, 255), np.float32)))


def test_convolutional_bottleneck_variant():
    cfg = DenoiserConfig(depth=3, growth=4, bottleneck="convolutional")
    model = Denoiser(cfg, np.random.default_rng(2))
    out = model.denoise(Tensor(np.zeros((1, 1, 64), np.float32)))
    assert out.shape == (1, 1, 64)
    names = [n for n, _ in model.named_parameters()]
    assert any("bottleneck_conv" in n for n in names)
    assert not any("recurrent" in n for n in names)


def test_gradient_reaches_every_denoiser_parameter(tiny):
    x = Tensor(np.random.default_rng(3).standard_normal((2, 1, 128)).astype(np.float32))
    out = tiny.denoise(x)
    tiny.zero_grad()
    out.backward(np.ones_like(out.data))
    for name, p in tiny.named_parameters():
        assert p.grad is not None and np.linalg.norm(p.grad) > 0, name


def test_hybrid_forward_exposes_both_estimates():
    model = build_tiny_htmd(seed=4)
    zeros = Tensor(np.zeros((1, 1, 256), np.float32))
    final, mid = model.forward(zeros, training=False)
    assert final.shape == mid.shape == (1, 1, 256)
    assert np.all(mid.data == 0)  # biasless linear masking path maps 0 to 0
    assert np.all(np.isfinite(final.data))

    x = Tensor(np.random.default_rng(5).uniform(-1, 1, (2, 1, 256)).astype(np.float32))
    final, mid = model.forward(x, training=True)
    assert final.shape == mid.shape == (2, 1, 256)


def test_hybrid_backward_through_both_losses():
    model = build_tiny_htmd(seed=6)
    rng = np.random.default_rng(7)
    x = Tensor(rng.uniform(-1, 1, (1, 1, 256)).astype(np.float32))
    y = Tensor(rng.uniform(-1, 1, (1, 1, 256)).astype(np.float32))
    final, mid = model.forward(x, training=True)
    loss = deep_loss(y, final, mid, loss_preset("mse-mae"))
    model.zero_grad()
    loss.backward()
    with_grad = sum(1 for _, p in model.named_parameters() if p.grad is not None)
    total = sum(1 for _ in model.named_parameters())
    # every parameter except the dead residual conv of the final TCN block
    assert with_grad == total - 1
