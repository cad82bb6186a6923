import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dvp import tensor as T
from dvp.nn import grad_check
from dvp.perception import DEFAULT_CHANNELS, Perception, channel_plan, cnn1_forward, perceive


def _conv_block_params(channels, c_in=3):
    # conv 3x3 weight + bias, batch-norm gamma + beta
    n = 0
    for c in channels:
        n += 9 * c_in * c + c + 2 * c
        c_in = c
    return n


def test_default_plan_and_output_shape():
    p = Perception(np.random.default_rng(0))
    assert p.channels == DEFAULT_CHANNELS
    img = np.random.default_rng(1).uniform(size=(2, 3, 64, 64)).astype(np.float32)
    p.eval()
    y = cnn1_forward(p, img)
    assert y.shape == (2, 256, 1, 1)
    assert perceive(p, img).shape == (2, 256)


def test_parameter_count_matches_layer_formula():
    p = Perception(np.random.default_rng(0))
    blocks = _conv_block_params(DEFAULT_CHANNELS)
    head = 512 * 256 + 256
    assert blocks == 4_504_320  # about 4.5M for the conv stack
    assert p.num_parameters() == blocks + head == 4_635_648


def test_zero_weights_give_zero_output():
    p = Perception(np.random.default_rng(0), channels=(4, 8, 8), image_size=8, latent_dim=16)
    for t in p.parameters():
        t.data[...] = 0
    img = np.random.default_rng(2).uniform(size=(3, 3, 8, 8))
    for mode in (True, False):
        p.train(mode)
        np.testing.assert_array_equal(perceive(p, img).data, 0)


def test_gradient_matches_finite_differences_in_eval_mode():
    with T.precision(np.float64):
        p = Perception(np.random.default_rng(3), channels=(4, 6, 8, 8), image_size=16, latent_dim=8)
        p.astype(np.float64)
        p.eval()
        rng = np.random.default_rng(4)
        for bn in (b.bn for b in p.blocks):
            bn.running_mean[...] = rng.normal(size=bn.running_mean.shape) * 0.1
            bn.running_var[...] = rng.uniform(0.5, 2.0, size=bn.running_var.shape)
        x = T.Tensor(rng.uniform(size=(2, 3, 16, 16)))
        err = grad_check(lambda v: T.tsum(cnn1_forward(p, v)), x, h=1e-5, coords=20, rng=rng)
    assert err <= 1e-2


def test_identical_images_identical_latents():
    p = Perception(np.random.default_rng(5), channels=(4, 8, 8, 8), image_size=16, latent_dim=12)
    p.eval()
    img = np.random.default_rng(6).uniform(size=(1, 3, 16, 16))
    z = perceive(p, np.concatenate([img, img])).data
    np.testing.assert_array_equal(z[0], z[1])
    np.testing.assert_array_equal(perceive(p, img).data[0], z[0])


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 2**31 - 1), st.booleans())
def test_batch_permutation_equivariance(seed, training):
    rng = np.random.default_rng(seed)
    p = Perception(np.random.default_rng(7), channels=(4, 8, 8), image_size=8, latent_dim=6)
    p.train(training)
    img = rng.uniform(size=(5, 3, 8, 8))
    perm = rng.permutation(5)
    z = perceive(p, img).data
    zp = perceive(p, img[perm]).data
    np.testing.assert_allclose(zp, z[perm], rtol=1e-5, atol=1e-5)


def test_scaled_plan_gives_finite_latent():
    p = Perception(np.random.default_rng(8), channels=(16, 32, 64, 64, 64), image_size=32)
    z = perceive(p, np.random.default_rng(9).uniform(size=(2, 3, 32, 32)))
    assert z.shape == (2, 256)
    assert np.isfinite(z.data).all()


@pytest.mark.parametrize("scale", [0.125, 0.25, 0.5, 1.0])
def test_latent_dim_independent_of_plan(scale):
    p = Perception.from_config(np.random.default_rng(0), channels_scale=scale, image_size=16, latent_dim=32)
    assert p.channels == channel_plan(scale, 4)
    assert perceive(p, np.zeros((1, 3, 16, 16))).shape == (1, 32)


def test_channel_plan_scaling():
    assert channel_plan(0.25) == (16, 32, 64, 64, 128, 128)
    assert channel_plan(1.0, 7) == DEFAULT_CHANNELS + (512,)


def test_input_errors():
    p = Perception(np.random.default_rng(0), channels=(4, 4), image_size=4, latent_dim=4)
    with pytest.raises(ValueError):
        cnn1_forward(p, np.zeros((1, 3, 6, 6)))
    with pytest.raises(ValueError):
        cnn1_forward(p, np.zeros((1, 1, 4, 4)))
    with pytest.raises(ValueError):
        cnn1_forward(p, np.zeros((3, 4, 4)))
    with pytest.raises(ValueError):
        Perception(np.random.default_rng(0), channels=(4, 4), image_size=8)


def test_checkpoint_names():
    p = Perception(np.random.default_rng(0), channels=(4, 4), image_size=4, latent_dim=4)
    names = dict(p.named_parameters())
    assert {"block0.conv.weight", "block0.bn.weight", "block1.bn.bias", "head.weight"} <= set(names)
