'''
Optimisation drivers: PoseField training under score distillation and
the latent-space ablation that optimises the video latent directly.

Both loops draw all randomness (camera azimuth, sigma, eps) from one
numpy Generator seeded with TrainConfig.seed, so a run is fully
determined by its config and assets.
'''
import dataclasses
import json
import logging
import os
import time
from dataclasses import dataclass, field

import numpy as np
import torch
import matplotlib.pyplot as plt
from tqdm import tqdm

from motiondistill.archive import read_archive, write_archive
from motiondistill.body_model import neutral_params
from motiondistill.diffusion_backend import AnalyticGaussianBackend, PromptEmbedding
from motiondistill.errors import ChecksumError, ConfigError, NonFiniteGradientError, ShapeError
from motiondistill.pose_field import init_to_mean, posefield_from_arrays, posefield_header
from motiondistill.renderer import CameraTrajectory, camera_at, render_sequence, sample_camera
from motiondistill.sds import (
    SdsConfig, reg_loss, sample_sigma, sds_image_grad, sds_surrogate, sds_temporal_grad)

logger = logging.getLogger(__name__)

MODES = ('posefield', 'latent_ablation')
DTYPES = {'float32': torch.float32, 'float64': torch.float64}
TRACE_COLUMNS = ('iter', 'grad_norm', 'reg_loss', 'sigma', 'elapsed_ms')
TRACE_FORMAT = ('%d', '%.17g', '%.17g', '%.17g', '%.3f')


@dataclass
class TrainConfig:
    iterations: int = 10000
    learning_rate: float = 5e-4
    betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    frames: int = 10
    sds: SdsConfig = field(default_factory=SdsConfig)
    camera: CameraTrajectory = field(default_factory=CameraTrajectory)
    seed: int = 0
    checkpoint_every: int = 1000
    prompt: str = ''
    mode: str = 'posefield'
    hidden: int = 256
    encoding_frequencies: int = 6
    sharpness: float = 50.
    bg_color: tuple = (1., 1., 1.)
    fixed_azimuth: float = None
    per_frame_camera: bool = False
    grad_clip: float = 1.
    dtype: str = 'float32'
    optimize_global_orient: bool = False
    log_every: int = 100
    snapshot_every: int = 0
    record_timing: bool = False

    def __post_init__(self):
        self.betas = tuple(float(b) for b in self.betas)
        self.bg_color = tuple(float(c) for c in self.bg_color)
        if int(self.iterations) < 1:
            raise ConfigError('iterations must be >= 1, got %r' % self.iterations)
        if not self.learning_rate > 0:
            raise ConfigError('learning_rate must be positive, got %r' % self.learning_rate)
        if len(self.betas) != 2 or not all(0 <= b < 1 for b in self.betas):
            raise ConfigError('betas must be two numbers in [0, 1), got %r' % (self.betas,))
        if int(self.frames) < 1:
            raise ConfigError('frames must be >= 1, got %r' % self.frames)
        if self.mode not in MODES:
            raise ConfigError('mode must be one of %s, got %r' % (MODES, self.mode))
        if self.dtype not in DTYPES:
            raise ConfigError('dtype must be one of %s, got %r' % (tuple(DTYPES), self.dtype))
        if self.grad_clip is not None and not self.grad_clip > 0:
            raise ConfigError('grad_clip must be positive or null, got %r' % self.grad_clip)
        if int(self.hidden) < 1 or int(self.encoding_frequencies) < 1:
            raise ConfigError('hidden and encoding_frequencies must be >= 1')
        if not self.sharpness > 0:
            raise ConfigError('sharpness must be positive, got %r' % self.sharpness)
        if len(self.bg_color) != 3 or not all(0 <= c <= 1 for c in self.bg_color):
            raise ConfigError('bg_color must be an RGB triple in [0, 1], got %r' % (self.bg_color,))
        if int(self.log_every) < 1:
            raise ConfigError('log_every must be >= 1')
        if int(self.checkpoint_every) < 0 or int(self.snapshot_every) < 0:
            raise ConfigError('checkpoint_every and snapshot_every must be >= 0')

    @property
    def guidance_scale(self):
        return self.sds.guidance_scale

    @property
    def torch_dtype(self):
        return DTYPES[self.dtype]


def _build(cls, data, name):
    if not isinstance(data, dict):
        raise ConfigError('%s must be a JSON object' % name)
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError('unknown %s keys: %s' % (name, ', '.join(unknown)))
    try:
        return cls(**data)
    except (TypeError, ValueError) as err:
        if isinstance(err, ConfigError):
            raise
        raise ConfigError('invalid %s: %s' % (name, err))


def _section(data, name):
    value = data.pop(name, None) or {}
    if not isinstance(value, dict):
        raise ConfigError('%s must be a JSON object' % name)
    return dict(value)


def config_from_dict(data):
    '''
    Build a TrainConfig from a dictionary mirroring its field names, with
    nested ``sds`` and ``camera`` objects. A top level ``guidance_scale``
    is moved into ``sds``.
    '''
    data = dict(data)
    sds = _section(data, 'sds')
    camera = _section(data, 'camera')
    if 'guidance_scale' in data:
        sds['guidance_scale'] = data.pop('guidance_scale')
    data['sds'] = _build(SdsConfig, sds, 'sds config')
    data['camera'] = _build(CameraTrajectory, camera, 'camera config')
    return _build(TrainConfig, data, 'train config')


def load_config(path=None, overrides=None):
    '''
    Resolve a TrainConfig from defaults, an optional JSON file and
    overrides, in increasing precedence. Overrides set to None are
    ignored; nested ``sds`` and ``camera`` overrides are merged key by key.
    '''
    data = {}
    if path is not None:
        try:
            with open(path) as stream:
                data = json.load(stream)
        except (IOError, ValueError) as err:
            raise ConfigError('cannot read config %s: %s' % (path, err))
        if not isinstance(data, dict):
            raise ConfigError('config %s must hold a JSON object' % path)
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        if key in ('sds', 'camera'):
            merged = dict(data.get(key) or {})
            merged.update({k: v for k, v in value.items() if v is not None})
            data[key] = merged
        else:
            data[key] = value
    return config_from_dict(data)


def config_to_dict(cfg):
    '''
    The fully resolved config as plain JSON types.
    '''
    return json.loads(json.dumps(dataclasses.asdict(cfg)))


@dataclass
class RunArtifacts:
    '''
    State and products of a run.

    trace             rows (iter, grad_norm, reg_loss, sigma, elapsed_ms)
    latent_distance   rows (iter, ||Z - mu||) for analytic backends
    final_distance    ||Z - mu|| after the last update
    '''
    config: TrainConfig
    optimizer: torch.optim.Optimizer
    rng: np.random.Generator
    net: torch.nn.Module = None
    latents: torch.Tensor = None
    iteration: int = 0
    trace: list = field(default_factory=list)
    latent_distance: list = field(default_factory=list)
    final_distance: float = None
    latent_trajectory: list = field(default_factory=list)
    checkpoints: list = field(default_factory=list)
    poses: torch.Tensor = None
    video: object = None
    clipped: int = 0

    @property
    def parameters(self):
        if self.net is not None:
            return list(self.net.parameters())
        return [self.latents]

    @property
    def loss_trace(self):
        return np.array(self.trace, dtype=np.float64).reshape(-1, len(TRACE_COLUMNS))

    @property
    def distance_trace(self):
        return np.array(self.latent_distance, dtype=np.float64).reshape(-1, 2)

    @property
    def distance_ratio(self):
        if not self.latent_distance or self.final_distance is None:
            return None
        initial = self.latent_distance[0][1]
        return self.final_distance / initial if initial > 0 else 0.


def _make_optimizer(params, cfg):
    return torch.optim.Adam(params, lr=cfg.learning_rate, betas=cfg.betas, eps=cfg.adam_eps)


def _prompt(cfg):
    try:
        return PromptEmbedding.from_text(cfg.prompt)
    except ValueError as err:
        raise ConfigError(str(err))


def joint_index_for(tmpl, cfg):
    '''
    Joints driven by the PoseField: the template's optimised joints,
    preceded by the root when the global orientation is optimised too.
    '''
    index = [int(j) for j in tmpl.optimized_joints]
    if cfg.optimize_global_orient and 0 not in index:
        index = [0] + index
    return torch.tensor(index, dtype=torch.int64)


def iteration_camera(cfg, rng):
    '''
    The camera (or per-frame list of cameras) for one iteration.
    '''
    if cfg.fixed_azimuth is not None:
        return camera_at(cfg.camera, cfg.fixed_azimuth)
    if cfg.per_frame_camera:
        return [sample_camera(cfg.camera, rng) for _ in range(cfg.frames)]
    return sample_camera(cfg.camera, rng)


def _grad_norm(params):
    grads = [p.grad.reshape(-1) for p in params if p.grad is not None]
    if not grads:
        return 0.
    return float(torch.linalg.norm(torch.cat(grads)))


def _clip(params, norm, cfg, artifacts):
    if cfg.grad_clip is not None and norm > cfg.grad_clip:
        torch.nn.utils.clip_grad_norm_(params, cfg.grad_clip)
        artifacts.clipped += 1
        logger.debug('iteration %d: clipped gradient norm %.4g to %.4g',
                     artifacts.iteration, norm, cfg.grad_clip)


def _abort(artifacts, out_dir, details):
    iteration = artifacts.iteration
    dump_path = None
    if out_dir is not None:
        dump_path = os.path.join(out_dir, 'abort_%d.json' % iteration)
        dump = dict(details, iteration=iteration, config=config_to_dict(artifacts.config))
        with open(dump_path, 'w') as stream:
            json.dump(dump, stream, indent=1, default=str)
    logger.error('non-finite gradient at iteration %d', iteration)
    raise NonFiniteGradientError(
        'non-finite gradient at iteration %d' % iteration, iteration=iteration, dump_path=dump_path)


def _elapsed_ms(cfg, start):
    return 1e3 * (time.perf_counter() - start) if cfg.record_timing else 0.


def _log_progress(artifacts, row):
    if artifacts.iteration % artifacts.config.log_every == 0:
        logger.info('iteration %d: grad norm %.4g, reg loss %.4g, sigma %.3f', *row[:4])


def _maybe_checkpoint(artifacts, out_dir):
    every = artifacts.config.checkpoint_every
    if out_dir is None or not every or artifacts.iteration % every:
        return
    path = os.path.join(out_dir, 'ckpt_%06d' % artifacts.iteration)
    save_checkpoint(artifacts, path)
    artifacts.checkpoints.append(path)


def _progress(start, stop, enabled, label):
    return tqdm(range(start, stop), desc=label, disable=None if enabled else True, leave=False)


def train_posefield(cfg, tmpl, stats, video_model, image_model=None, out_dir=None,
                    fixed_params=None, resume=None, progress=False, stop_when=None):
    '''
    Optimise a PoseField so that its rendered motion scores well under
    video_model (and image_model, if given).

    Per iteration: pick the camera, render the F frames, encode them,
    inject the temporal SDS gradient at the video latents and the image
    SDS gradient at the frame latents, add the smoothness loss, clip and
    take one Adam step on the network weights. Shape, expression and the
    non-optimised joints stay at fixed_params.

    Returns RunArtifacts. Pass the artifacts of load_checkpoint as
    ``resume`` to continue an interrupted run up to cfg.iterations.
    ``stop_when`` is called with the artifacts after every update; the
    run ends early once it returns True.
    '''
    dtype = cfg.torch_dtype
    prompt = _prompt(cfg)
    joint_index = joint_index_for(tmpl, cfg)
    if len(stats) != 3 * joint_index.shape[0]:
        raise ShapeError('pose stats have %d components for %d optimised joints' % (
            len(stats), joint_index.shape[0]))
    fixed = fixed_params if fixed_params is not None else neutral_params(tmpl, dtype)

    if resume is None:
        net = init_to_mean(stats, cfg.hidden, cfg.encoding_frequencies, cfg.seed, dtype)
        artifacts = RunArtifacts(
            config=cfg,
            optimizer=_make_optimizer(net.parameters(), cfg),
            rng=np.random.default_rng(cfg.seed),
            net=net,
        )
    else:
        artifacts = resume
        artifacts.config = cfg
        if artifacts.net is None:
            raise ConfigError('cannot resume PoseField training from a latent ablation checkpoint')
    net = artifacts.net
    params = artifacts.parameters
    analytic = isinstance(video_model, AnalyticGaussianBackend)
    render_options = dict(joint_index=joint_index, sharpness=cfg.sharpness, bg_color=cfg.bg_color)

    logger.info('training PoseField: %d iterations from %d, %d frames, %d joints, prompt %r',
                cfg.iterations, artifacts.iteration, cfg.frames, joint_index.shape[0], cfg.prompt)
    for _ in _progress(artifacts.iteration, cfg.iterations, progress, 'posefield'):
        start = time.perf_counter()
        rng = artifacts.rng
        cam = iteration_camera(cfg, rng)
        artifacts.optimizer.zero_grad()
        video = render_sequence(tmpl, net, fixed, cam, cfg.frames, **render_options)

        objective = reg_loss(video.poses, cfg.sds.lambda_reg)
        reg_value = float(objective.detach())
        sigma = float('nan')
        if cfg.sds.lambda_sds_t > 0:
            latents = video_model.encode(video).latents
            if analytic:
                artifacts.latent_distance.append((artifacts.iteration, video_model.distance(latents.detach())))
            sigma = sample_sigma(cfg.sds, rng)
            grad = sds_temporal_grad(video_model, latents, prompt, cfg.sds, rng, sigma=sigma)
            objective = objective + sds_surrogate(latents, grad)
        if image_model is not None and cfg.sds.lambda_sds_img > 0:
            frame_latents = image_model.encode(video).latents
            grad = sds_image_grad(image_model, video, prompt, cfg.sds, rng,
                                  sigma=sample_sigma(cfg.sds, rng), latents=frame_latents)
            objective = objective + sds_surrogate(frame_latents, grad)
        if objective.requires_grad:
            objective.backward()

        norm = _grad_norm(params)
        if not np.isfinite(norm):
            _abort(artifacts, out_dir, {
                'sigma': sigma,
                'reg_loss': reg_value,
                'grad_norm': norm,
                'azimuth': getattr(cam, 'azimuth', None),
                'poses': video.poses.detach().tolist(),
            })
        _clip(params, norm, cfg, artifacts)
        artifacts.optimizer.step()

        row = (artifacts.iteration, norm, reg_value, sigma, _elapsed_ms(cfg, start))
        artifacts.trace.append(row)
        _log_progress(artifacts, row)
        artifacts.iteration += 1
        _maybe_checkpoint(artifacts, out_dir)
        if stop_when is not None and stop_when(artifacts):
            logger.info('stopping criterion met at iteration %d', artifacts.iteration)
            break

    cam = iteration_camera(cfg, np.random.default_rng(cfg.seed))
    with torch.no_grad():
        artifacts.video = render_sequence(tmpl, net, fixed, cam, cfg.frames, **render_options)
    artifacts.poses = artifacts.video.poses
    if analytic:
        artifacts.final_distance = video_model.distance(video_model.encode(artifacts.video).latents)
    logger.info('finished after %d iterations, gradient clipped in %d of them',
                artifacts.iteration, artifacts.clipped)
    return artifacts


def ablate_latent(cfg, init_video, video_model, out_dir=None, resume=None, progress=False):
    '''
    Optimise the video latent Z directly with temporal SDS, starting
    from Z0 = encode(init_video). Renderer and PoseField are not in the
    loop. Every ``snapshot_every`` iterations a copy of Z is kept in
    ``latent_trajectory``.
    '''
    prompt = _prompt(cfg)
    analytic = isinstance(video_model, AnalyticGaussianBackend)
    if resume is None:
        with torch.no_grad():
            initial = video_model.encode(init_video).latents
        latents = initial.detach().to(cfg.torch_dtype).clone().requires_grad_(True)
        artifacts = RunArtifacts(
            config=cfg,
            optimizer=_make_optimizer([latents], cfg),
            rng=np.random.default_rng(cfg.seed),
            latents=latents,
        )
        artifacts.latent_trajectory.append((0, latents.detach().clone()))
    else:
        artifacts = resume
        artifacts.config = cfg
        if artifacts.latents is None:
            raise ConfigError('cannot resume a latent ablation from a PoseField checkpoint')
    latents = artifacts.latents

    logger.info('latent ablation: %d iterations from %d, latent shape %s, prompt %r',
                cfg.iterations, artifacts.iteration, list(latents.shape), cfg.prompt)
    for _ in _progress(artifacts.iteration, cfg.iterations, progress, 'ablation'):
        start = time.perf_counter()
        artifacts.optimizer.zero_grad()
        if analytic:
            artifacts.latent_distance.append((artifacts.iteration, video_model.distance(latents.detach())))
        sigma = sample_sigma(cfg.sds, artifacts.rng)
        grad = sds_temporal_grad(video_model, latents, prompt, cfg.sds, artifacts.rng, sigma=sigma)
        sds_surrogate(latents, grad).backward()

        norm = _grad_norm([latents])
        if not np.isfinite(norm):
            _abort(artifacts, out_dir, {'sigma': sigma, 'grad_norm': norm})
        _clip([latents], norm, cfg, artifacts)
        artifacts.optimizer.step()

        row = (artifacts.iteration, norm, 0., sigma, _elapsed_ms(cfg, start))
        artifacts.trace.append(row)
        _log_progress(artifacts, row)
        artifacts.iteration += 1
        if cfg.snapshot_every and artifacts.iteration % cfg.snapshot_every == 0:
            artifacts.latent_trajectory.append((artifacts.iteration, latents.detach().clone()))
        _maybe_checkpoint(artifacts, out_dir)

    if analytic:
        artifacts.final_distance = video_model.distance(latents.detach())
    logger.info('finished after %d iterations, gradient clipped in %d of them',
                artifacts.iteration, artifacts.clipped)
    return artifacts


def save_checkpoint(artifacts, path):
    '''
    Write parameters, Adam moments, the generator state and the traces
    to an archive. Arrays keep their dtype, so a reload is bit-exact.
    '''
    cfg = artifacts.config
    arrays = {
        'trace': artifacts.loss_trace,
        'latent_distance': artifacts.distance_trace,
    }
    header = {
        'kind': 'checkpoint',
        'mode': cfg.mode,
        'iteration': artifacts.iteration,
        'clipped': artifacts.clipped,
        'config': config_to_dict(cfg),
        'rng_state': artifacts.rng.bit_generator.state,
    }
    if artifacts.net is not None:
        for name, value in artifacts.net.state_dict().items():
            arrays['posefield.' + name] = value.detach().cpu().numpy()
        header['posefield'] = posefield_header(artifacts.net, cfg.frames)
    else:
        arrays['latents'] = artifacts.latents.detach().cpu().numpy()

    steps = []
    state = artifacts.optimizer.state_dict()['state']
    for index in range(len(artifacts.parameters)):
        entry = state.get(index)
        if not entry:
            steps.append(None)
            continue
        steps.append(float(entry['step']))
        arrays['adam.%d.exp_avg' % index] = entry['exp_avg'].cpu().numpy()
        arrays['adam.%d.exp_avg_sq' % index] = entry['exp_avg_sq'].cpu().numpy()
    header['adam_steps'] = steps

    write_archive(path, arrays, header=header, float_dtype=None)
    logger.info('wrote checkpoint %s at iteration %d', path, artifacts.iteration)
    return path


def load_checkpoint(path, expected_k_b=None):
    '''
    Restore RunArtifacts saved by save_checkpoint. A corrupt archive
    raises ChecksumError, a PoseField driving a different number of
    joints than expected_k_b raises ShapeError.
    '''
    arrays, _, header = read_archive(path)
    if header.get('kind') != 'checkpoint':
        raise ChecksumError('%s is not a training checkpoint' % path)
    cfg = config_from_dict(header['config'])

    net = latents = None
    if 'posefield' in header:
        prefix = 'posefield.'
        net_arrays = {name[len(prefix):]: value for name, value in arrays.items() if name.startswith(prefix)}
        net = posefield_from_arrays(net_arrays, header['posefield'], expected_k_b)
        params = list(net.parameters())
    else:
        latents = torch.from_numpy(arrays['latents'].copy()).requires_grad_(True)
        params = [latents]

    optimizer = _make_optimizer(params, cfg)
    state = {}
    for index, step in enumerate(header['adam_steps']):
        if step is None:
            continue
        state[index] = {
            'step': torch.tensor(step),
            'exp_avg': torch.from_numpy(arrays['adam.%d.exp_avg' % index].copy()),
            'exp_avg_sq': torch.from_numpy(arrays['adam.%d.exp_avg_sq' % index].copy()),
        }
    optimizer.load_state_dict({'state': state, 'param_groups': optimizer.state_dict()['param_groups']})

    rng = np.random.default_rng()
    rng.bit_generator.state = header['rng_state']
    return RunArtifacts(
        config=cfg,
        optimizer=optimizer,
        rng=rng,
        net=net,
        latents=latents,
        iteration=header['iteration'],
        trace=[tuple(row) for row in arrays['trace'].tolist()],
        latent_distance=[tuple(row) for row in arrays['latent_distance'].tolist()],
        clipped=header.get('clipped', 0),
    )


def checkpoint_roundtrip(artifacts, path):
    '''
    Save the artifacts and load them back.
    '''
    save_checkpoint(artifacts, path)
    expected_k_b = artifacts.net.n_outputs // 3 if artifacts.net is not None else None
    return load_checkpoint(path, expected_k_b)


def write_trace(path, trace):
    '''
    The loss trace as CSV with the header iter,grad_norm,reg_loss,sigma,elapsed_ms.
    '''
    np.savetxt(path, np.asarray(trace).reshape(-1, len(TRACE_COLUMNS)), fmt=TRACE_FORMAT,
               delimiter=',', header=','.join(TRACE_COLUMNS), comments='')


def write_distance_trace(path, distance_trace):
    np.savetxt(path, np.asarray(distance_trace).reshape(-1, 2), fmt=('%d', '%.17g'),
               delimiter=',', header='iter,latent_distance', comments='')


def get_loss_trace_figure(trace):
    '''
    Gradient norm and regulariser value over the iterations.
    '''
    trace = np.asarray(trace).reshape(-1, len(TRACE_COLUMNS))
    figure, (grad_axis, reg_axis) = plt.subplots(2, 1, sharex=True)
    grad_axis.plot(trace[:, 0], trace[:, 1], 'k-')
    grad_axis.set_yscale('log')
    grad_axis.set_ylabel('gradient norm')
    reg_axis.plot(trace[:, 0], trace[:, 2], 'k-')
    reg_axis.set_ylabel('regulariser')
    reg_axis.set_xlabel('iteration')
    return figure
