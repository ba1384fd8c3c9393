'''
Tests of the noise schedule, classifier-free guidance, the pooling
encoder and the built-in score models
'''
import dataclasses

import motiondistill as md
import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st
import hypothesis.extra.numpy

from motiondistill.errors import ShapeError
from helper_functions_for_tests import get_random_video

sigmastrategy = st.floats(min_value=0.01, max_value=0.99)
valuestrategy = st.floats(min_value=-10., max_value=10., allow_nan=False)
scalestrategy = st.floats(min_value=-5., max_value=200., allow_nan=False)


def test_add_noise_preserves_variance():
    '''
    unit-variance data stay unit-variance at any noise level
    '''
    rng = np.random.default_rng(0)
    z = torch.tensor(rng.standard_normal(100000))
    for sigma in (0.05, 0.5, 0.95):
        noise = torch.tensor(rng.standard_normal(100000))
        noised = md.add_noise(z, sigma, noise)
        assert noised.sigma == sigma and noised.noised
        assert abs(float(noised.latents.var()) - 1.) < 2e-2


def test_add_noise_arguments():
    '''
    sigma must lie strictly inside (0, 1), noise must match the latents
    '''
    z = torch.zeros(2, 4, 2, 2)
    for sigma in (0., 1., -0.1, 1.5):
        with pytest.raises(ValueError):
            md.add_noise(z, sigma, torch.zeros_like(z))
    with pytest.raises(ShapeError):
        md.add_noise(z, 0.5, torch.zeros(2, 4, 2, 3))


def test_add_noise_is_differentiable():
    '''
    the gradient with respect to the clean latent is sqrt(1 - sigma^2)
    '''
    z = torch.zeros(3, dtype=torch.float64, requires_grad=True)
    md.add_noise(z, 0.6, torch.ones(3, dtype=torch.float64)).latents.sum().backward()
    np.testing.assert_allclose(z.grad.numpy(), 0.8)


@given(hypothesis.extra.numpy.arrays(np.float64, (6,), elements=valuestrategy),
       hypothesis.extra.numpy.arrays(np.float64, (6,), elements=valuestrategy),
       scalestrategy)
def test_cfg_combine_is_affine_in_scale(cond, uncond, scale):
    '''
    cfg_combine interpolates (and extrapolates) between the branches
    '''
    cond, uncond = torch.tensor(cond), torch.tensor(uncond)
    assert torch.equal(md.cfg_combine(cond, uncond, 1.), cond)
    assert torch.equal(md.cfg_combine(cond, uncond, 0.), uncond)
    np.testing.assert_allclose(md.cfg_combine(cond, uncond, scale).numpy(),
                               (uncond + scale * (cond - uncond)).numpy(), atol=1e-9)


def test_cfg_combine_shapes():
    '''
    branches of different shape raise ShapeError
    '''
    with pytest.raises(ShapeError):
        md.cfg_combine(torch.zeros(3), torch.zeros(4), 2.)


def test_pooling_encoder():
    '''
    latents have four channels, are downsampled and lie in [-1, 1]
    '''
    rng = np.random.default_rng(1)
    video = get_random_video(rng, n_frames=3, resolution=(16, 8))
    encoder = md.PoolingEncoder(4)
    latents = encoder(video.frames)
    assert latents.shape == (3, 4, 4, 2)
    assert encoder.latent_shape(3, (16, 8)) == (3, 4, 4, 2)
    assert float(latents.min()) >= -1. and float(latents.max()) <= 1.
    white = encoder(torch.ones(1, 8, 8, 3))
    np.testing.assert_allclose(white.numpy(), 1., atol=1e-6)
    with pytest.raises(ShapeError):
        encoder(torch.ones(1, 10, 8, 3))
    with pytest.raises(ShapeError):
        encoder(torch.ones(1, 8, 8))


def test_prompt_embedding():
    '''
    empty prompts are rejected; the unconditional key is the empty string
    '''
    with pytest.raises(ValueError):
        md.PromptEmbedding.from_text('   ')
    assert md.PromptEmbedding.unconditional().is_unconditional
    assert not md.PromptEmbedding.from_text('a person running').is_unconditional
    # the text key is the whole embedding
    assert md.PromptEmbedding.from_text('walk') == md.PromptEmbedding('walk')
    assert [f.name for f in dataclasses.fields(md.PromptEmbedding)] == ['key']


@settings(deadline=None)
@given(sigmastrategy)
def test_point_mass_denoiser_recovers_the_noise(sigma):
    '''
    for z_t built from the target itself, the point-mass denoiser
    returns exactly the noise that was added
    '''
    rng = np.random.default_rng(2)
    mean = torch.tensor(rng.normal(size=(2, 4, 3, 3)))
    noise = torch.tensor(rng.normal(size=(2, 4, 3, 3)))
    model = md.analytic_gaussian_backend(mean)
    assert model.is_point_mass
    z_t = md.add_noise(mean, sigma, noise)
    eps = model.predict_noise(z_t, sigma, md.PromptEmbedding.from_text('x'), 100.)
    np.testing.assert_allclose(eps.numpy(), noise.numpy(), atol=1e-8)


def test_gaussian_denoiser_is_the_posterior_mean():
    '''
    with covariance c the prediction is sigma (z_t - sqrt(1 - sigma^2) mu) / ((1 - sigma^2) c + sigma^2),
    and guidance has no effect
    '''
    rng = np.random.default_rng(3)
    mean = torch.tensor(rng.normal(size=(4, 2, 2)))
    covariance = torch.tensor(rng.uniform(0.1, 2., size=(4, 2, 2)))
    model = md.analytic_gaussian_backend(mean, covariance)
    assert not model.is_point_mass
    z_t = torch.tensor(rng.normal(size=(4, 2, 2)))
    sigma = 0.3
    expected = sigma * (z_t - np.sqrt(1 - sigma ** 2) * mean) / ((1 - sigma ** 2) * covariance + sigma ** 2)
    prompt = md.PromptEmbedding.from_text('x')
    np.testing.assert_allclose(model.predict_noise(z_t, sigma, prompt, 1.).numpy(), expected.numpy())
    assert torch.equal(model.predict_noise(z_t, sigma, prompt, 100.), model.predict_noise(z_t, sigma, prompt, 1.))


def test_frame_shaped_mean_is_shared():
    '''
    a single-frame mean is broadcast over frames; other shapes are refused
    '''
    frame_mean = torch.ones(4, 2, 2)
    model = md.analytic_gaussian_backend(frame_mean)
    video = torch.zeros(3, 4, 2, 2)
    assert model.distance(video) == pytest.approx(np.sqrt(3 * 16))
    with pytest.raises(ShapeError):
        model.distance(torch.zeros(3, 4, 2, 3))
    with pytest.raises(ShapeError):
        md.analytic_gaussian_backend(frame_mean, torch.ones(5))
    with pytest.raises(ValueError):
        md.analytic_gaussian_backend(frame_mean, -1.)
    with pytest.raises(ValueError):
        md.analytic_gaussian_backend(frame_mean, 'diagonal')


def test_encode_is_differentiable():
    '''
    the analytic backend encodes with the differentiable pooling encoder
    '''
    rng = np.random.default_rng(4)
    model = md.analytic_gaussian_backend(torch.zeros(2, 4, 2, 2), downsample=4)
    frames = get_random_video(rng, n_frames=2, resolution=(8, 8)).frames.requires_grad_(True)
    latents = model.encode(md.Video(frames=frames))
    assert not latents.noised
    latents.latents.sum().backward()
    assert float(frames.grad.abs().min()) > 0
    assert model.latent_shape(2, (8, 8)) == (2, 4, 2, 2)


def test_predict_noise_never_tracks_gradients():
    '''
    the prediction is detached even for latents that require grad
    '''
    model = md.EchoScoreModel(2)
    z_t = torch.ones(1, 4, 2, 2, requires_grad=True)
    eps = model.predict_noise(z_t, 0.5, md.PromptEmbedding.from_text('x'), 7.)
    assert not eps.requires_grad
    assert torch.equal(eps, z_t.detach())


class _BranchModel(md.ScoreModel):
    '''
    ones for the prompt, zeros for the unconditional branch
    '''

    def __init__(self):
        super(_BranchModel, self).__init__(md.PoolingEncoder(2))

    def denoise(self, latents, sigma, prompt):
        return torch.zeros_like(latents) if prompt.is_unconditional else torch.ones_like(latents)


def test_guidance_combines_both_branches():
    '''
    predict_noise runs the unconditional branch and applies the guidance scale
    '''
    model = _BranchModel()
    z_t = torch.zeros(2, 3)
    prompt = md.PromptEmbedding.from_text('x')
    np.testing.assert_array_equal(model.predict_noise(z_t, 0.5, prompt, 7.5).numpy(), 7.5)
    np.testing.assert_array_equal(model.predict_noise(z_t, 0.5, prompt, 1.).numpy(), 1.)
    with pytest.raises(ValueError):
        model.predict_noise(z_t, 1., prompt, 1.)
