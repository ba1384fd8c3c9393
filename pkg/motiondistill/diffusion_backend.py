'''
Score models: encode videos into latents, add scheduled noise and
predict that noise with classifier-free guidance.

The noise schedule is parameterised by sigma in (0, 1):

    z_t = sqrt(1 - sigma^2) z + sigma eps

Three backends ship with the package. AnalyticGaussianBackend is the
exact optimal denoiser for Gaussian data and serves as a verification
oracle, EchoScoreModel returns its input and is the loopback reference,
and external_adapter talks to a remote model over the mdsv1 protocol.
'''
import abc
import logging
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from motiondistill.errors import ShapeError

logger = logging.getLogger(__name__)

UNCONDITIONAL_KEY = ''
DEFAULT_DOWNSAMPLE = 8
LATENT_CHANNELS = 4
LUMINANCE = (0.299, 0.587, 0.114)


@dataclass
class LatentVideo:
    '''
    latents   [F', C_lat, H', W'] (or [C_lat, H', W'] for a single image)
    sigma     None for a clean latent, the noise level otherwise
    '''
    latents: torch.Tensor
    sigma: float = None

    @property
    def noised(self):
        return self.sigma is not None

    @property
    def shape(self):
        return tuple(self.latents.shape)


@dataclass(frozen=True)
class PromptEmbedding:
    '''
    The conditioning text. The empty key is reserved for the
    unconditional branch of classifier-free guidance.
    '''
    key: str

    def __post_init__(self):
        if not isinstance(self.key, str):
            raise TypeError('prompt key must be a string, got %r' % type(self.key))

    @classmethod
    def from_text(cls, text):
        if not text or not text.strip():
            raise ValueError('prompt must be a non-empty string')
        return cls(text)

    @classmethod
    def unconditional(cls):
        return cls(UNCONDITIONAL_KEY)

    @property
    def is_unconditional(self):
        return self.key == UNCONDITIONAL_KEY


def _latents(z):
    return z.latents if isinstance(z, LatentVideo) else z


def _check_sigma(sigma):
    if not 0. < sigma < 1.:
        raise ValueError('noise level sigma must lie in (0, 1), got %r' % sigma)


def add_noise(z, sigma, noise):
    '''
    Return sqrt(1 - sigma^2) z + sigma noise as a LatentVideo tagged with
    sigma. Differentiable with respect to z.
    '''
    _check_sigma(sigma)
    latents = _latents(z)
    if tuple(noise.shape) != tuple(latents.shape):
        raise ShapeError('noise shape %s does not match latent shape %s' % (
            list(noise.shape), list(latents.shape)))
    noised = np.sqrt(1. - sigma ** 2) * latents + sigma * noise.to(latents.dtype)
    return LatentVideo(noised, sigma=float(sigma))


def cfg_combine(eps_cond, eps_uncond, scale):
    '''
    Classifier-free guidance: eps_uncond + scale (eps_cond - eps_uncond),
    evaluated as (1 - scale) eps_uncond + scale eps_cond so that scales 0
    and 1 return the branches exactly.
    '''
    if tuple(eps_cond.shape) != tuple(eps_uncond.shape):
        raise ShapeError('conditional and unconditional predictions differ in shape: %s vs %s' % (
            list(eps_cond.shape), list(eps_uncond.shape)))
    return (1. - scale) * eps_uncond + scale * eps_cond


class PoolingEncoder:
    '''
    Differentiable stand-in for a video VAE encoder.

    Frames [F, H, W, 3] are average pooled by ``downsample`` and mapped to
    four channels (R, G, B, luminance) in [-1, 1], giving latents
    [F, 4, H / downsample, W / downsample].
    '''

    def __init__(self, downsample=DEFAULT_DOWNSAMPLE):
        if int(downsample) < 1:
            raise ValueError('downsample factor must be >= 1, got %r' % downsample)
        self.downsample = int(downsample)

    def latent_shape(self, n_frames, resolution):
        height, width = resolution
        if height % self.downsample or width % self.downsample:
            raise ShapeError('resolution %dx%d is not divisible by the downsample factor %d' % (
                height, width, self.downsample))
        return (n_frames, LATENT_CHANNELS, height // self.downsample, width // self.downsample)

    def __call__(self, frames):
        if frames.ndim != 4 or frames.shape[-1] != 3:
            raise ShapeError('frames must be [F, H, W, 3], got %s' % list(frames.shape))
        self.latent_shape(frames.shape[0], frames.shape[1:3])
        rgb = frames.permute(0, 3, 1, 2)
        weights = torch.as_tensor(LUMINANCE, dtype=rgb.dtype).reshape(1, 3, 1, 1)
        luminance = (rgb * weights).sum(dim=1, keepdim=True)
        pooled = F.avg_pool2d(torch.cat([rgb, luminance], dim=1), self.downsample)
        return 2. * pooled - 1.


class ScoreModel(abc.ABC):
    '''
    A latent diffusion model as seen by score distillation.

    Subclasses implement ``denoise`` for one branch of the guidance;
    ``predict_noise`` runs it without gradient tracking and combines
    the conditional and unconditional branches.
    '''
    differentiable_encoder = True

    def __init__(self, encoder):
        self.encoder = encoder

    def encode(self, video):
        '''
        The encoder E applied to a Video; differentiable when
        ``differentiable_encoder`` is set.
        '''
        return LatentVideo(self.encoder(video.frames))

    def latent_shape(self, n_frames, resolution):
        return self.encoder.latent_shape(n_frames, resolution)

    @abc.abstractmethod
    def denoise(self, latents, sigma, prompt):
        '''
        Noise prediction for one prompt branch, a tensor shaped like latents.
        '''

    def predict_noise(self, z_t, sigma, prompt, guidance_scale):
        _check_sigma(sigma)
        latents = _latents(z_t).detach()
        with torch.no_grad():
            eps_cond = self.denoise(latents, sigma, prompt)
            if guidance_scale == 1:
                eps = eps_cond
            else:
                eps_uncond = self.denoise(latents, sigma, PromptEmbedding.unconditional())
                eps = cfg_combine(eps_cond, eps_uncond, guidance_scale)
        if tuple(eps.shape) != tuple(latents.shape):
            raise ShapeError('noise prediction has shape %s for latents %s' % (
                list(eps.shape), list(latents.shape)))
        return eps


class AnalyticGaussianBackend(ScoreModel):
    '''
    Exact denoiser for data distributed as N(mean, diag(covariance)):

        eps_hat = sigma (z_t - sqrt(1 - sigma^2) mean) / ((1 - sigma^2) c + sigma^2)

    A covariance of zero is a point mass at ``mean``. The mean may have
    the shape of a video latent or of a single frame latent, in which
    case it is shared by every frame. Guidance has no effect.
    '''

    def __init__(self, mean, covariance=0., downsample=DEFAULT_DOWNSAMPLE):
        super(AnalyticGaussianBackend, self).__init__(PoolingEncoder(downsample))
        self.mean = torch.as_tensor(_latents(mean)).detach().clone()
        covariance = torch.as_tensor(covariance, dtype=self.mean.dtype).detach().clone()
        if not bool(torch.isfinite(covariance).all()) or bool((covariance < 0).any()):
            raise ValueError('covariance must be finite and positive semidefinite')
        try:
            torch.broadcast_shapes(covariance.shape, self.mean.shape)
        except RuntimeError:
            raise ShapeError('covariance of shape %s does not broadcast to mean %s' % (
                list(covariance.shape), list(self.mean.shape)))
        self.covariance = covariance

    @property
    def is_point_mass(self):
        return not bool((self.covariance != 0).any())

    def _mean_for(self, latents):
        try:
            shape = torch.broadcast_shapes(self.mean.shape, latents.shape)
        except RuntimeError:
            shape = None
        if shape != tuple(latents.shape):
            raise ShapeError('latents of shape %s do not match the target of shape %s' % (
                list(latents.shape), list(self.mean.shape)))
        return self.mean.to(latents.dtype)

    def denoise(self, latents, sigma, prompt):
        mean = self._mean_for(latents)
        scaled = (1. - sigma ** 2) * self.covariance.to(latents.dtype) + sigma ** 2
        if bool((scaled <= 0).any()):
            raise ValueError('singular scaled covariance at sigma=%r' % sigma)
        return sigma * (latents - np.sqrt(1. - sigma ** 2) * mean) / scaled

    def predict_noise(self, z_t, sigma, prompt, guidance_scale):
        return super(AnalyticGaussianBackend, self).predict_noise(z_t, sigma, prompt, 1)

    def distance(self, z):
        '''
        Euclidean distance between latents and the mean.
        '''
        latents = _latents(z)
        return float(torch.linalg.norm((latents - self._mean_for(latents)).reshape(-1)))


def analytic_gaussian_backend(mean, covariance='zero', downsample=DEFAULT_DOWNSAMPLE):
    '''
    covariance is 'zero' (a point mass), a scalar or a diagonal given as
    an array broadcastable to the mean.
    '''
    if isinstance(covariance, str):
        if covariance != 'zero':
            raise ValueError('unknown covariance spec %r' % covariance)
        covariance = 0.
    return AnalyticGaussianBackend(mean, covariance, downsample)


class EchoScoreModel(ScoreModel):
    '''
    eps_hat = z_t. The reference model of the loopback server.
    '''

    def __init__(self, downsample=DEFAULT_DOWNSAMPLE):
        super(EchoScoreModel, self).__init__(PoolingEncoder(downsample))

    def denoise(self, latents, sigma, prompt):
        return latents.clone()

    def predict_noise(self, z_t, sigma, prompt, guidance_scale):
        return super(EchoScoreModel, self).predict_noise(z_t, sigma, prompt, 1)


def external_adapter(endpoint, downsample=DEFAULT_DOWNSAMPLE, timeout=30., retries=3):
    '''
    A ScoreModel served by a remote process at ``host:port``.

    The remote encoder is not differentiable, so encode uses the local
    PoolingEncoder proxy and the remote model answers predict_noise.
    '''
    from motiondistill.protocol import ExternalScoreModel, ProtocolClient, parse_endpoint
    host, port = parse_endpoint(endpoint)
    client = ProtocolClient(host, port, timeout=timeout, retries=retries)
    return ExternalScoreModel(client, downsample=downsample)
