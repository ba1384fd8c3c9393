'''
Numerical self checks of the pipeline, run by ``motiondistill check``.

Each check returns a CheckResult with the measured error and the
tolerance it was held to. Double precision is the default; single
precision evaluates in float32 with tolerances ten times looser.
'''
import logging
import time
from dataclasses import dataclass

import numpy as np
import torch
from scipy.spatial.transform import Rotation

from motiondistill.body_model import BodyParams, Mesh, lbs, make_toy_model, neutral_params
from motiondistill.diffusion_backend import (
    PoolingEncoder, PromptEmbedding, add_noise, analytic_gaussian_backend, cfg_combine)
from motiondistill.pose_field import init_to_mean, neutral_pose_stats, posefield_forward
from motiondistill.renderer import CameraTrajectory, camera_at, rasterize_soft, render_sequence
from motiondistill.sds import SdsConfig, draw_noise, sds_surrogate, sds_temporal_grad

logger = logging.getLogger(__name__)

PRECISIONS = {
    'double': {'dtype': torch.float64, 'loosen': 1., 'step': 1e-5},
    'single': {'dtype': torch.float32, 'loosen': 10., 'step': 1e-3},
}


@dataclass
class CheckResult:
    name: str
    passed: bool
    error: float
    tolerance: float
    seconds: float = 0.


def lbs_oracle(tmpl, params):
    '''
    Brute-force skinning in numpy with 4x4 homogeneous transforms,
    composed joint by joint and blended vertex by vertex.
    '''
    shape = np.asarray(params.shape, dtype=np.float64)
    expression = np.asarray(params.expression, dtype=np.float64)
    pose = np.asarray(params.pose, dtype=np.float64)
    shaped = (tmpl.template_vertices.numpy()
              + tmpl.shape_basis.numpy() @ shape
              + tmpl.expression_basis.numpy() @ expression)
    joints = tmpl.joint_regressor.numpy() @ shaped
    rotations = Rotation.from_rotvec(pose).as_matrix()
    features = (rotations[1:] - np.eye(3)).reshape(-1)
    posed = shaped + tmpl.pose_corrective_basis.numpy() @ features

    parents = tmpl.parents.tolist()
    chain = []
    for joint, parent in enumerate(parents):
        local = np.eye(4)
        local[:3, :3] = rotations[joint]
        local[:3, 3] = joints[joint] - (joints[parent] if parent >= 0 else 0.)
        chain.append(local if parent < 0 else chain[parent] @ local)
    rest_relative = []
    for joint, transform in enumerate(chain):
        unpose = np.eye(4)
        unpose[:3, 3] = -joints[joint]
        rest_relative.append(transform @ unpose)
    rest_relative = np.array(rest_relative)

    weights = tmpl.skinning_weights.numpy()
    out = np.empty_like(posed)
    for vertex in range(posed.shape[0]):
        blended = np.tensordot(weights[vertex], rest_relative, axes=1)
        out[vertex] = (blended @ np.append(posed[vertex], 1.))[:3]
    return out


def _relative_error(numeric, analytic):
    numeric = np.asarray(numeric, dtype=np.float64).reshape(-1)
    analytic = np.asarray(analytic, dtype=np.float64).reshape(-1)
    scale = max(np.linalg.norm(analytic), 1e-300)
    return float(np.linalg.norm(numeric - analytic) / scale)


def finite_difference(function, vector, step):
    '''
    Central differences of a scalar function of a 1d tensor.
    '''
    grad = np.zeros(vector.shape[0])
    with torch.no_grad():
        for index in range(vector.shape[0]):
            shifted = vector.clone()
            shifted[index] += step
            upper = float(function(shifted))
            shifted[index] -= 2 * step
            lower = float(function(shifted))
            grad[index] = (upper - lower) / (2 * step)
    return grad


def _assign(params, flat):
    offset = 0
    for param in params:
        size = param.numel()
        param.copy_(flat[offset:offset + size].view_as(param))
        offset += size


def parameter_gradient_error(params, objective, step):
    '''
    Relative error between the reverse-mode gradient of objective() with
    respect to params and its central differences. The parameters are
    restored afterwards.
    '''
    for param in params:
        param.grad = None
    objective().backward()
    analytic = torch.cat([param.grad.reshape(-1) for param in params]).numpy()
    original = [param.detach().clone() for param in params]

    def shifted(flat):
        _assign(params, flat)
        return objective()

    numeric = finite_difference(shifted, torch.cat([value.reshape(-1) for value in original]), step)
    with torch.no_grad():
        for param, value in zip(params, original):
            param.copy_(value)
    return _relative_error(numeric, analytic)


def _random_params(tmpl, rng, dtype):
    return BodyParams(
        shape=torch.tensor(rng.normal(size=tmpl.n_shape), dtype=dtype),
        expression=torch.tensor(rng.normal(size=tmpl.n_expr), dtype=dtype),
        pose=torch.tensor(rng.normal(scale=0.5, size=(tmpl.n_joints, 3)), dtype=dtype),
    )


def check_lbs(settings, rng, draws=100):
    '''
    lbs against lbs_oracle on random parameters, plus the rest pose.
    '''
    tmpl = make_toy_model(0, 64, 21)
    dtype = settings['dtype']
    worst = 0.
    for _ in range(draws):
        params = _random_params(tmpl, rng, dtype)
        vertices = lbs(tmpl, params).vertices.numpy()
        worst = max(worst, float(np.abs(vertices - lbs_oracle(tmpl, params)).max()))
    rest = neutral_params(tmpl, dtype)
    worst = max(worst, float((lbs(tmpl, rest).vertices - tmpl.template_vertices.to(dtype)).abs().max()))
    return worst, 1e-6 * settings['loosen']


def _perturbed_net(n_joints, rng, dtype, hidden=16, n_frequencies=4):
    net = init_to_mean(neutral_pose_stats(3 * n_joints), hidden, n_frequencies,
                       seed=int(rng.integers(1 << 31)), dtype=dtype)
    last = net.linear_layers()[-1]
    with torch.no_grad():
        last.weight.copy_(torch.tensor(rng.normal(scale=0.3, size=tuple(last.weight.shape)), dtype=dtype))
        last.bias.copy_(torch.tensor(rng.normal(scale=0.3, size=tuple(last.bias.shape)), dtype=dtype))
    return net


def check_posefield(settings, rng):
    '''
    Reverse-mode gradient of a random projection of posefield_forward
    with respect to all network weights against central differences.
    '''
    dtype = settings['dtype']
    net = _perturbed_net(3, rng, dtype)
    weights = torch.tensor(rng.normal(size=net.n_outputs), dtype=dtype)

    def objective():
        return (weights * posefield_forward(net, 3, 10)).sum()

    error = parameter_gradient_error(list(net.parameters()), objective, settings['step'])
    return error, 1e-3 * settings['loosen']


def check_raster(settings, rng):
    '''
    Gradient of the horizontally ramp-weighted mean intensity with
    respect to an x translation of the mesh.
    '''
    dtype = settings['dtype']
    tmpl = make_toy_model(0, 64, 4)
    traj = CameraTrajectory(radius=2.5, fov_y=np.deg2rad(50.), resolution=(32, 32))
    cam = camera_at(traj, rng.uniform(0., 2 * np.pi))
    mesh = lbs(tmpl, neutral_params(tmpl, dtype))
    ramp = torch.linspace(0., 1., 32, dtype=dtype)[None, :, None]

    def objective(shift):
        offset = torch.cat([shift, torch.zeros(2, dtype=dtype)])
        moved = Mesh(mesh.vertices + offset, mesh.faces, mesh.per_vertex_color)
        return (rasterize_soft(moved, cam, sharpness=50.) * ramp).mean()

    shift = torch.zeros(1, dtype=dtype, requires_grad=True)
    analytic = torch.autograd.grad(objective(shift), shift)[0].numpy()
    numeric = finite_difference(objective, torch.zeros(1, dtype=dtype), 1e-3)
    return _relative_error(numeric, analytic), 5e-2 * settings['loosen']


def check_schedule(settings, rng, n_samples=100000):
    '''
    Variance preservation of add_noise and the guidance identities.
    '''
    dtype = settings['dtype']
    z = torch.tensor(rng.standard_normal(n_samples), dtype=dtype)
    noise = torch.tensor(rng.standard_normal(n_samples), dtype=dtype)
    variance = float(add_noise(z, 0.5, noise).latents.var())
    error = abs(variance - 1.)
    cond = torch.tensor(rng.normal(size=16), dtype=dtype)
    uncond = torch.tensor(rng.normal(size=16), dtype=dtype)
    if not (torch.equal(cfg_combine(cond, uncond, 1.), cond)
            and torch.equal(cfg_combine(cond, uncond, 0.), uncond)):
        error = float('inf')
    return error, 2e-2


def check_sds(settings, rng):
    '''
    Reverse-mode gradient of the SDS surrogate <stopgrad(grad), Z(alpha)>
    with respect to every PoseField weight on a small toy pipeline,
    against central differences with (sigma, eps, camera) frozen.
    '''
    dtype = settings['dtype']
    tmpl = make_toy_model(1, 32, 4, n_optimized=3)
    net = _perturbed_net(3, rng, dtype, hidden=8, n_frequencies=2)
    traj = CameraTrajectory(radius=2.5, fov_y=np.deg2rad(50.), resolution=(16, 16))
    cam = camera_at(traj, np.pi / 2)
    fixed = neutral_params(tmpl, dtype)
    n_frames = 2

    encoder = PoolingEncoder(2)
    with torch.no_grad():
        target = encoder(render_sequence(tmpl, net, fixed, cam, n_frames).frames)
    mean = target + 0.1 * draw_noise(target.shape, rng, dtype)
    model = analytic_gaussian_backend(mean, downsample=2)

    latents = model.encode(render_sequence(tmpl, net, fixed, cam, n_frames)).latents
    cfg = SdsConfig()
    grad = sds_temporal_grad(model, latents, PromptEmbedding.from_text('check'), cfg, rng,
                             sigma=0.3, noise=draw_noise(latents.shape, rng, dtype))

    def objective():
        video = render_sequence(tmpl, net, fixed, cam, n_frames)
        return sds_surrogate(model.encode(video).latents, grad)

    error = parameter_gradient_error(list(net.parameters()), objective, settings['step'])
    return error, 1e-3 * settings['loosen']


CHECKS = {
    'lbs': check_lbs,
    'posefield': check_posefield,
    'raster': check_raster,
    'schedule': check_schedule,
    'sds': check_sds,
}


def run_checks(only=None, precision='double', seed=0):
    '''
    Run the named checks (all when ``only`` is None) and return their
    CheckResults in a fixed order.
    '''
    if precision not in PRECISIONS:
        raise ValueError('precision must be one of %s, got %r' % (tuple(PRECISIONS), precision))
    names = list(CHECKS) if only is None else [only] if isinstance(only, str) else list(only)
    unknown = [name for name in names if name not in CHECKS]
    if unknown:
        raise ValueError('unknown checks: %s (choose from %s)' % (', '.join(unknown), ', '.join(CHECKS)))
    settings = PRECISIONS[precision]
    results = []
    for name in names:
        rng = np.random.default_rng(seed)
        start = time.perf_counter()
        error, tolerance = CHECKS[name](settings, rng)
        result = CheckResult(name, bool(error < tolerance), error, tolerance, time.perf_counter() - start)
        logger.info('check %s: error %.3g, tolerance %.3g, %s', name, error, tolerance,
                    'pass' if result.passed else 'FAIL')
        results.append(result)
    return results


def format_check_table(results):
    lines = ['%-10s %-6s %12s %12s %9s' % ('check', 'result', 'error', 'tolerance', 'seconds')]
    for result in results:
        lines.append('%-10s %-6s %12.3e %12.3e %9.2f' % (
            result.name, 'pass' if result.passed else 'FAIL',
            result.error, result.tolerance, result.seconds))
    return '\n'.join(lines)
