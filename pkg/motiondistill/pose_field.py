'''
PoseField, the implicit motion representation.

A small MLP maps the positional encoding of a frame index tau to the
pose theta_b of the optimised joints. The output is squashed into the
band mean +- 3 std of the target motion:

    theta_b(tau) = mean + 3 std * tanh(mlp(encode(tau / F)))
'''
import json
import logging
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from motiondistill.archive import read_archive, write_archive
from motiondistill.errors import ShapeError

logger = logging.getLogger(__name__)

DEFAULT_HIDDEN = 256
DEFAULT_FREQUENCIES = 6
NEUTRAL_STD = 0.5
BAND_WIDTH = 3.0


@dataclass
class PoseStats:
    '''
    Componentwise mean and standard deviation of the target motion's
    pose parameters, both of length 3 K_b.
    '''
    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64).reshape(-1)
        self.std = np.asarray(self.std, dtype=np.float64).reshape(-1)
        if self.mean.shape != self.std.shape:
            raise ShapeError('pose stats mean has %d entries, std has %d' % (
                self.mean.size, self.std.size))
        if not (np.all(np.isfinite(self.mean)) and np.all(np.isfinite(self.std))):
            raise ValueError('pose stats must be finite')
        if np.any(self.std <= 0):
            raise ValueError('pose stats std must be positive')

    def __len__(self):
        return self.mean.size


def neutral_pose_stats(n_components):
    '''
    Default stats when no file is supplied: zero mean, 0.5 rad std.
    '''
    return PoseStats(np.zeros(n_components), np.full(n_components, NEUTRAL_STD))


def load_pose_stats(path, n_components=None):
    '''
    Read a JSON file ``{"mean": [...], "std": [...]}``.
    '''
    with open(path) as stream:
        data = json.load(stream)
    try:
        stats = PoseStats(data['mean'], data['std'])
    except (KeyError, TypeError) as err:
        raise ValueError('pose stats file %s needs "mean" and "std" arrays (%s)' % (path, err))
    if n_components is not None and len(stats) != n_components:
        raise ShapeError('pose stats file %s has %d components, the body model optimises %d' % (
            path, len(stats), n_components))
    return stats


def _encode(positions, n_frequencies):
    frequencies = np.pi * 2.0 ** torch.arange(n_frequencies, dtype=positions.dtype)
    angles = positions[..., None] * frequencies
    encoding = torch.stack([torch.sin(angles), torch.cos(angles)], dim=-1)
    return encoding.reshape(positions.shape + (2 * n_frequencies,))


def positional_encode(tau, n_frames, n_frequencies, dtype=torch.float64):
    '''
    Encode frame index tau of n_frames as
    [sin(pi t), cos(pi t), sin(2 pi t), cos(2 pi t), ...] with t = tau / n_frames,
    using n_frequencies sin/cos pairs.
    '''
    if n_frequencies < 1:
        raise ValueError('need at least one frequency, got %d' % n_frequencies)
    if not 0 <= tau < n_frames:
        raise ValueError('frame index %r outside [0, %d)' % (tau, n_frames))
    position = torch.tensor(float(tau) / n_frames, dtype=dtype)
    return _encode(position, n_frequencies)


def positional_encode_frames(n_frames, n_frequencies, dtype=torch.float64):
    '''
    Encodings of all frames 0 .. n_frames - 1, shape [n_frames, 2 L].
    '''
    if n_frequencies < 1:
        raise ValueError('need at least one frequency, got %d' % n_frequencies)
    if n_frames < 1:
        raise ValueError('need at least one frame, got %d' % n_frames)
    positions = torch.arange(n_frames, dtype=dtype) / n_frames
    return _encode(positions, n_frequencies)


class PoseFieldNet(nn.Module):
    '''
    Input layer, two hidden layers and an output layer of width 3 K_b,
    with softplus activations. pose_mean and pose_std are buffers: they
    are saved with the network but never trained.
    '''

    def __init__(self, pose_mean, pose_std, hidden=DEFAULT_HIDDEN,
                 n_frequencies=DEFAULT_FREQUENCIES, dtype=torch.float64):
        super(PoseFieldNet, self).__init__()
        pose_mean = torch.as_tensor(np.asarray(pose_mean), dtype=dtype).reshape(-1)
        pose_std = torch.as_tensor(np.asarray(pose_std), dtype=dtype).reshape(-1)
        n_outputs = pose_mean.shape[0]
        if n_outputs % 3:
            raise ShapeError('PoseField outputs axis-angle triples, got %d components' % n_outputs)
        self.n_frequencies = n_frequencies
        self.hidden = hidden
        self.layers = nn.Sequential(
            nn.Linear(2 * n_frequencies, hidden, dtype=dtype),
            nn.Softplus(),
            nn.Linear(hidden, hidden, dtype=dtype),
            nn.Softplus(),
            nn.Linear(hidden, hidden, dtype=dtype),
            nn.Softplus(),
            nn.Linear(hidden, n_outputs, dtype=dtype),
        )
        self.register_buffer('pose_mean', pose_mean)
        self.register_buffer('pose_std', pose_std)

    @property
    def n_outputs(self):
        return self.pose_mean.shape[0]

    @property
    def dtype(self):
        return self.pose_mean.dtype

    def linear_layers(self):
        return [layer for layer in self.layers if isinstance(layer, nn.Linear)]

    def forward(self, encoding):
        raw = self.layers(encoding)
        # keep tanh strictly inside (-1, 1) even when it saturates
        bound = 1 - torch.finfo(raw.dtype).eps
        squashed = torch.tanh(raw).clamp(-bound, bound)
        return self.pose_mean + BAND_WIDTH * self.pose_std * squashed


def init_to_mean(stats, hidden=DEFAULT_HIDDEN, n_frequencies=DEFAULT_FREQUENCIES,
                 seed=0, dtype=torch.float64):
    '''
    Build a PoseFieldNet whose output is exactly the mean pose.

    Hidden layers get the usual uniform(-1/sqrt(fan_in), 1/sqrt(fan_in))
    initialisation drawn from a generator seeded with ``seed``; the
    output layer is zero, so tanh(0) = 0 for every frame.
    '''
    net = PoseFieldNet(stats.mean, stats.std, hidden=hidden,
                       n_frequencies=n_frequencies, dtype=dtype)
    generator = torch.Generator().manual_seed(int(seed))
    layers = net.linear_layers()
    with torch.no_grad():
        for layer in layers[:-1]:
            bound = 1. / np.sqrt(layer.in_features)
            layer.weight.uniform_(-bound, bound, generator=generator)
            layer.bias.uniform_(-bound, bound, generator=generator)
        layers[-1].weight.zero_()
        layers[-1].bias.zero_()
    return net


def posefield_forward(net, tau, n_frames):
    '''
    theta_b for frame tau, shape [3 K_b].
    '''
    return net(positional_encode(tau, n_frames, net.n_frequencies, dtype=net.dtype))


def posefield_sequence(net, n_frames):
    '''
    theta_b for every frame, shape [n_frames, 3 K_b].
    '''
    return net(positional_encode_frames(n_frames, net.n_frequencies, dtype=net.dtype))


def posefield_header(net, n_frames):
    return {
        'kind': 'posefield',
        'n_frequencies': net.n_frequencies,
        'hidden': net.hidden,
        'k_b': net.n_outputs // 3,
        'n_frames': n_frames,
        'dtype': str(net.dtype).replace('torch.', ''),
    }


def posefield_from_arrays(arrays, header, expected_k_b=None):
    '''
    Rebuild a network from archive arrays and header, checking K_b.
    '''
    if expected_k_b is not None and header['k_b'] != expected_k_b:
        raise ShapeError('checkpoint PoseField drives %d joints, expected %d' % (
            header['k_b'], expected_k_b))
    dtype = getattr(torch, header['dtype'])
    net = PoseFieldNet(arrays['pose_mean'], arrays['pose_std'], hidden=header['hidden'],
                       n_frequencies=header['n_frequencies'], dtype=dtype)
    state = {name: torch.from_numpy(np.array(arrays[name])).to(dtype)
             for name in net.state_dict()}
    net.load_state_dict(state)
    return net


def save_posefield(net, path, n_frames):
    arrays = {name: value.detach().cpu().numpy() for name, value in net.state_dict().items()}
    return write_archive(path, arrays, header=posefield_header(net, n_frames), float_dtype=None)


def load_posefield(path, expected_k_b=None):
    '''
    Load a network saved by save_posefield. It returns (net, n_frames).
    '''
    arrays, _, header = read_archive(path)
    return posefield_from_arrays(arrays, header, expected_k_b), header['n_frames']
