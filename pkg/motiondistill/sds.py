'''
Score distillation gradient estimators and the motion smoothness term.

The estimators return the SDS gradient at the latents,

    lambda * w(sigma) * (eps_hat - eps),

as a plain tensor. The denoiser output carries no derivative; the
gradient is injected into the caller's reverse pass with sds_surrogate.
'''
import logging
import warnings
from dataclasses import dataclass

import numpy as np
import torch

from motiondistill.diffusion_backend import add_noise
from motiondistill.errors import ConfigError, ShapeError

logger = logging.getLogger(__name__)

WEIGHTINGS = ('constant', 'sigma_squared')


@dataclass
class SdsConfig:
    '''
    lambda_sds_t            weight of the temporal (video) SDS term
    lambda_sds_img          weight of the per-frame image SDS term
    lambda_reg              weight of the consecutive-frame regulariser
    guidance_scale          classifier-free guidance scale
    sigma_range             sigma ~ Uniform(low, high), 0 < low < high < 1
    weighting               'constant' (w = 1) or 'sigma_squared' (w = sigma^2)
    samples_per_iteration   noise draws averaged per estimate
    '''
    lambda_sds_t: float = 1e-3
    lambda_sds_img: float = 1e-3
    lambda_reg: float = 1e-3
    guidance_scale: float = 100.
    sigma_range: tuple = (0.02, 0.98)
    weighting: str = 'constant'
    samples_per_iteration: int = 1

    def __post_init__(self):
        self.sigma_range = tuple(float(s) for s in self.sigma_range)
        for name in ('lambda_sds_t', 'lambda_sds_img', 'lambda_reg'):
            if not getattr(self, name) >= 0:
                raise ConfigError('%s must be nonnegative, got %r' % (name, getattr(self, name)))
        if len(self.sigma_range) != 2 or not 0 < self.sigma_range[0] < self.sigma_range[1] < 1:
            raise ConfigError('sigma_range must satisfy 0 < low < high < 1, got %r' % (self.sigma_range,))
        if self.weighting not in WEIGHTINGS:
            raise ConfigError('weighting must be one of %s, got %r' % (WEIGHTINGS, self.weighting))
        if int(self.samples_per_iteration) < 1:
            raise ConfigError('samples_per_iteration must be >= 1')


def weighting(sigma, mode='constant'):
    if mode == 'constant':
        return 1.
    if mode == 'sigma_squared':
        return sigma ** 2
    raise ValueError('unknown weighting %r' % mode)


def sample_sigma(cfg, rng):
    low, high = cfg.sigma_range
    return float(rng.uniform(low, high))


def draw_noise(shape, rng, dtype=torch.float64):
    '''
    Standard normal noise from the numpy Generator, as a torch tensor.
    '''
    return torch.from_numpy(rng.standard_normal(tuple(shape))).to(dtype)


def _residual(model, latents, sigma, noise, prompt, cfg):
    z_t = add_noise(latents, sigma, noise)
    eps_hat = model.predict_noise(z_t, sigma, prompt, cfg.guidance_scale)
    if tuple(eps_hat.shape) != tuple(latents.shape):
        raise ShapeError('noise prediction %s does not match latents %s' % (
            list(eps_hat.shape), list(latents.shape)))
    return eps_hat.to(latents.dtype) - noise


def sds_temporal_grad(model, latents, prompt, cfg, rng, sigma=None, noise=None):
    '''
    Temporal SDS gradient at the clean video latents Z, shaped like Z.

    sigma and noise are drawn from rng unless given. With more than one
    sample per iteration, further noise draws share the same sigma.
    '''
    latents = getattr(latents, 'latents', latents).detach()
    if sigma is None:
        sigma = sample_sigma(cfg, rng)
    total = torch.zeros_like(latents)
    for sample in range(cfg.samples_per_iteration):
        eps = noise if noise is not None and sample == 0 else draw_noise(latents.shape, rng, latents.dtype)
        total = total + _residual(model, latents, sigma, eps.to(latents.dtype), prompt, cfg)
    return cfg.lambda_sds_t * weighting(sigma, cfg.weighting) * total / cfg.samples_per_iteration


def sds_image_grad(model, frames, prompt, cfg, rng, sigma=None, noise=None, latents=None):
    '''
    Image SDS applied to every frame as a batch of images.

    The frames are encoded independently by the image model (or
    ``latents`` is used when the caller already encoded them). One
    (sigma, eps) draw is shared by all frames; eps has the shape of a
    single frame latent.
    '''
    if latents is None:
        latents = model.encode(frames).latents
    latents = getattr(latents, 'latents', latents).detach()
    if cfg.lambda_sds_img == 0:
        return torch.zeros_like(latents)
    if sigma is None:
        sigma = sample_sigma(cfg, rng)
    total = torch.zeros_like(latents)
    for sample in range(cfg.samples_per_iteration):
        eps = noise if noise is not None and sample == 0 else draw_noise(latents.shape[1:], rng, latents.dtype)
        eps = eps.to(latents.dtype).expand_as(latents)
        total = total + _residual(model, latents, sigma, eps, prompt, cfg)
    return cfg.lambda_sds_img * weighting(sigma, cfg.weighting) * total / cfg.samples_per_iteration


class InjectGradient(torch.autograd.Function):
    '''
    Forward returns <grad, latents>; backward hands grad to latents
    unchanged, scaled by the incoming cotangent.
    '''

    @staticmethod
    def forward(ctx, latents, grad):
        ctx.save_for_backward(grad)
        return (grad * latents).sum()

    @staticmethod
    def backward(ctx, grad_output):
        grad, = ctx.saved_tensors
        return grad * grad_output, None


def sds_surrogate(latents, grad):
    '''
    Scalar whose gradient with respect to latents is ``grad``.
    '''
    latents = getattr(latents, 'latents', latents)
    if tuple(grad.shape) != tuple(latents.shape):
        raise ShapeError('SDS gradient %s does not match latents %s' % (
            list(grad.shape), list(latents.shape)))
    return InjectGradient.apply(latents, grad.detach().to(latents.dtype))


def reg_loss(pose_sequence, lambda_reg):
    '''
    lambda_reg * sum_i ||theta_{i+1} - theta_i||^2 over consecutive frames.
    '''
    pose_sequence = torch.as_tensor(pose_sequence)
    if pose_sequence.shape[0] < 2:
        warnings.warn('reg_loss needs at least two frames, got %d' % pose_sequence.shape[0])
        return torch.zeros((), dtype=pose_sequence.dtype)
    steps = pose_sequence[1:] - pose_sequence[:-1]
    return lambda_reg * (steps ** 2).sum()


def expected_point_mass_grad(latents, mean, sigma, cfg):
    '''
    Closed form of the temporal estimator for a point-mass target:
    lambda * w(sigma) * sqrt(1 - sigma^2) / sigma * (Z - mean).
    '''
    return (cfg.lambda_sds_t * weighting(sigma, cfg.weighting)
            * np.sqrt(1. - sigma ** 2) / sigma * (latents - mean))
