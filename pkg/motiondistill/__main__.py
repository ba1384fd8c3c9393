'''
motiondistill: distil human motion from video diffusion models.

Usage:
  motiondistill train [options] [--seed=<int>] [--downsample=<int>] [--verbose]
  motiondistill ablate [options] [--seed=<int>] [--downsample=<int>] [--verbose]
  motiondistill check [--only=<name>] [--precision=<p>] [--seed=<int>] [--verbose]
  motiondistill serve [--host=<host>] [--port=<port>] [--downsample=<int>] [--verbose]
  motiondistill convert <smplx_npz> <out_dir> [--n-shape=<int>] [--n-expr=<int>] [--verbose]
  motiondistill (-h | --help)
  motiondistill --version

Options:
  --config=<path>         JSON file with TrainConfig fields.
  --out=<dir>             Output directory [default: out].
  --backend=<name>        Score model: analytic or external [default: analytic].
  --endpoint=<host:port>  Address of an mdsv1 score server for --backend external.
  --image-backend=<name>  Per-frame image score model: none, analytic or external
                          [default: none].
  --image-endpoint=<host:port>
                          Address of an mdsv1 score server for --image-backend external.
  --prompt=<text>         Text prompt (required, here or in the config).
  --seed=<int>            Random seed.
  --iterations=<int>      Number of optimisation steps.
  --frames=<int>          Frames per video.
  --cfg-scale=<float>     Classifier-free guidance scale.
  --mode=<mode>           posefield or latent.
  --assets=<dir>          Body model archive; defaults to $MOTIONDISTILL_ASSETS,
                          else the built-in toy model.
  --stats=<path>          Pose statistics JSON with "mean" and "std".
  --target=<path>         poses.json the analytic backend targets; defaults to
                          an oscillating motion derived from the seed.
  --downsample=<int>      Encoder downsample factor [default: 8].
  --only=<name>           Run one check: lbs, posefield, raster, schedule, sds.
  --precision=<p>         Check precision: double or single [default: double].
  --host=<host>           Interface to listen on [default: 127.0.0.1].
  --port=<port>           Port to listen on [default: 7070].
  --n-shape=<int>         Shape components to keep [default: 10].
  --n-expr=<int>          Expression components to keep [default: 10].
  --verbose               Log debug messages.
  -h --help               Show this screen.
  --version               Show version.

Exit status: 0 success, 1 failed check, 2 configuration error,
3 asset error, 4 runtime error.
'''
import dataclasses
import hashlib
import json
import logging
import os
import sys

import matplotlib.pyplot as plt
import numpy as np
import torch
from docopt import docopt

import motiondistill as md
from motiondistill.errors import (
    ChecksumError, ConfigError, NonFiniteGradientError, ShapeError, TemplateError, TransportError)

logger = logging.getLogger('motiondistill')

ASSETS_ENV = 'MOTIONDISTILL_ASSETS'
TOY_VERTICES = 128
TOY_JOINTS = 6
ANALYTIC_AZIMUTH = np.pi / 2
MODE_FLAGS = {'posefield': 'posefield', 'latent': 'latent_ablation', 'latent_ablation': 'latent_ablation'}


def _parse(arguments, flag, kind):
    value = arguments.get(flag)
    if value is None:
        return None
    try:
        return kind(value)
    except ValueError:
        raise ConfigError('%s expects a %s, got %r' % (flag, kind.__name__, value))


def resolve_config(arguments, mode=None):
    mode_flag = arguments.get('--mode')
    if mode_flag is not None and mode_flag not in MODE_FLAGS:
        raise ConfigError('--mode must be posefield or latent, got %r' % mode_flag)
    overrides = {
        'iterations': _parse(arguments, '--iterations', int),
        'seed': _parse(arguments, '--seed', int),
        'frames': _parse(arguments, '--frames', int),
        'guidance_scale': _parse(arguments, '--cfg-scale', float),
        'prompt': arguments.get('--prompt'),
        'mode': mode or (MODE_FLAGS[mode_flag] if mode_flag else None),
    }
    cfg = md.load_config(arguments.get('--config'), overrides)
    if not cfg.prompt.strip():
        raise ConfigError('a prompt is required (--prompt or "prompt" in the config)')
    return cfg


def load_assets(arguments, cfg):
    '''
    Body template and pose statistics. Every failure is a TemplateError.
    '''
    asset_path = arguments.get('--assets') or os.environ.get(ASSETS_ENV)
    try:
        if asset_path:
            tmpl = md.load_template(asset_path)
        else:
            logger.info('no body model assets given, using the toy model')
            tmpl = md.make_toy_model(0, TOY_VERTICES, TOY_JOINTS)
        n_components = 3 * md.joint_index_for(tmpl, cfg).shape[0]
        if arguments.get('--stats'):
            stats = md.load_pose_stats(arguments['--stats'], n_components)
        else:
            stats = md.neutral_pose_stats(n_components)
    except (IOError, ChecksumError, ShapeError) as err:
        raise TemplateError('cannot load assets: %s' % err)
    except TemplateError:
        raise
    except ValueError as err:
        raise TemplateError('invalid assets: %s' % err)
    return tmpl, stats, asset_path


def target_poses(arguments, cfg, stats):
    '''
    The pose sequence the analytic backend is centred on.
    '''
    if arguments.get('--target'):
        try:
            with open(arguments['--target']) as stream:
                poses = np.asarray(json.load(stream)['frames'], dtype=np.float64)
        except (IOError, ValueError, KeyError) as err:
            raise ConfigError('cannot read target %s: %s' % (arguments['--target'], err))
        if poses.shape != (cfg.frames, len(stats)):
            raise ConfigError('target poses have shape %s, expected %s' % (
                list(poses.shape), [cfg.frames, len(stats)]))
        return poses
    rng = np.random.default_rng(cfg.seed + 1)
    phase = rng.uniform(0., 2 * np.pi, size=len(stats))
    tau = np.arange(cfg.frames)[:, None] / cfg.frames
    return stats.mean + 0.5 * stats.std * np.sin(2 * np.pi * tau + phase)


def _analytic_target(arguments, cfg, tmpl, stats, downsample):
    '''
    Encoding of the target motion seen from the fixed camera, and the
    config with that camera.
    '''
    if cfg.fixed_azimuth is None:
        logger.info('analytic backend: fixing the camera azimuth at %.3f rad', ANALYTIC_AZIMUTH)
        cfg = dataclasses.replace(cfg, fixed_azimuth=ANALYTIC_AZIMUTH)
    dtype = cfg.torch_dtype
    poses = torch.tensor(target_poses(arguments, cfg, stats), dtype=dtype)
    cam = md.camera_at(cfg.camera, cfg.fixed_azimuth)
    with torch.no_grad():
        video = md.render_poses(
            tmpl, poses, md.neutral_params(tmpl, dtype), cam, md.joint_index_for(tmpl, cfg),
            cfg.sharpness, cfg.bg_color)
        mean = md.PoolingEncoder(downsample)(video.frames)
    return mean, cfg


def _external(arguments, backend_flag, endpoint_flag, downsample):
    if not arguments.get(endpoint_flag):
        raise ConfigError('%s external needs %s host:port' % (backend_flag, endpoint_flag))
    return md.external_adapter(arguments[endpoint_flag], downsample=downsample)


def build_backend(arguments, cfg, tmpl, stats):
    '''
    The video score model, the per-frame image score model (None when
    --image-backend is none) and the config they force.

    The analytic video backend is a point mass at the encoding of the
    target motion, seen from a fixed camera; the analytic image backend
    is a point mass at the average frame of that encoding.
    '''
    downsample = _parse(arguments, '--downsample', int) or md.DEFAULT_DOWNSAMPLE
    backend = arguments.get('--backend') or 'analytic'
    image_backend = arguments.get('--image-backend') or 'none'
    if backend not in ('analytic', 'external'):
        raise ConfigError('--backend must be analytic or external, got %r' % backend)
    if image_backend not in ('none', 'analytic', 'external'):
        raise ConfigError('--image-backend must be none, analytic or external, got %r' % image_backend)

    mean = None
    if 'analytic' in (backend, image_backend):
        mean, cfg = _analytic_target(arguments, cfg, tmpl, stats, downsample)
    if backend == 'external':
        model = _external(arguments, '--backend', '--endpoint', downsample)
    else:
        model = md.analytic_gaussian_backend(mean, 'zero', downsample)

    image_model = None
    if image_backend == 'external':
        image_model = _external(arguments, '--image-backend', '--image-endpoint', downsample)
    elif image_backend == 'analytic':
        image_model = md.analytic_gaussian_backend(mean.mean(dim=0), 'zero', downsample)
    return model, image_model, cfg


def _digest(cfg, paths):
    digest = hashlib.sha256(json.dumps(md.config_to_dict(cfg), sort_keys=True).encode())
    for path in paths:
        if not path:
            continue
        if os.path.isdir(path):
            path = os.path.join(path, md.archive.MANIFEST_NAME)
        with open(path, 'rb') as stream:
            digest.update(stream.read())
    return digest.hexdigest()


def write_manifest(arguments, cfg, asset_path):
    '''
    The run manifest, written before iteration 0.
    '''
    out = arguments['--out']
    manifest = {
        'config_path': arguments.get('--config'),
        'config': md.config_to_dict(cfg),
        'assets': asset_path or 'toy',
        'stats': arguments.get('--stats'),
        'target': arguments.get('--target'),
        'backend': arguments.get('--backend'),
        'image_backend': arguments.get('--image-backend'),
        'out': out,
        'version': md.__version__,
        'input_hash': _digest(cfg, [arguments.get('--config'), asset_path,
                                    arguments.get('--stats'), arguments.get('--target')]),
    }
    with open(os.path.join(out, 'manifest.json'), 'w') as stream:
        json.dump(manifest, stream, indent=1, sort_keys=True)


def save_trace_outputs(out, artifacts):
    md.write_trace(os.path.join(out, 'loss.csv'), artifacts.loss_trace)
    figure = md.get_loss_trace_figure(artifacts.loss_trace)
    for extension in ('png', 'pdf'):
        figure.savefig(os.path.join(out, 'loss.' + extension), bbox_inches='tight')
    plt.close(figure)
    if artifacts.latent_distance:
        md.write_distance_trace(os.path.join(out, 'latent_distance.csv'), artifacts.distance_trace)


def write_summary(out, cfg, artifacts):
    trace = artifacts.loss_trace
    summary = {
        'iterations': artifacts.iteration,
        'seed': cfg.seed,
        'final_grad_norm': float(trace[-1, 1]) if len(trace) else None,
        'clipped_iterations': artifacts.clipped,
        'final_distance': artifacts.final_distance,
        'distance_ratio': artifacts.distance_ratio,
    }
    with open(os.path.join(out, 'summary.json'), 'w') as stream:
        json.dump(summary, stream, indent=1, sort_keys=True)
    return summary


def _prepare_run(arguments, mode=None):
    cfg = resolve_config(arguments, mode)
    tmpl, stats, asset_path = load_assets(arguments, cfg)
    model, image_model, cfg = build_backend(arguments, cfg, tmpl, stats)
    os.makedirs(arguments['--out'], exist_ok=True)
    write_manifest(arguments, cfg, asset_path)
    return cfg, tmpl, stats, model, image_model


def cmd_train(arguments):
    cfg, tmpl, stats, model, image_model = _prepare_run(arguments)
    if cfg.mode == 'latent_ablation':
        return _run_ablation(arguments, cfg, tmpl, stats, model, image_model)
    out = arguments['--out']
    artifacts = md.train_posefield(cfg, tmpl, stats, model, image_model=image_model,
                                   out_dir=out, progress=True)
    save_trace_outputs(out, artifacts)
    md.save_video(artifacts.video, os.path.join(out, 'frames'))
    with open(os.path.join(out, 'poses.json'), 'w') as stream:
        json.dump({
            'frames': artifacts.poses.detach().tolist(),
            'joints': md.joint_index_for(tmpl, cfg).tolist(),
        }, stream)
    write_summary(out, cfg, artifacts)
    return 0


def _run_ablation(arguments, cfg, tmpl, stats, model, image_model=None):
    out = arguments['--out']
    if image_model is not None:
        logger.warning('the latent ablation uses the video score model only, ignoring --image-backend')
    net = md.init_to_mean(stats, cfg.hidden, cfg.encoding_frequencies, cfg.seed, cfg.torch_dtype)
    cam = md.iteration_camera(cfg, np.random.default_rng(cfg.seed))
    with torch.no_grad():
        init_video = md.render_sequence(
            tmpl, net, md.neutral_params(tmpl, cfg.torch_dtype), cam, cfg.frames,
            md.joint_index_for(tmpl, cfg), cfg.sharpness, cfg.bg_color)
    artifacts = md.ablate_latent(cfg, init_video, model, out_dir=out, progress=True)
    save_trace_outputs(out, artifacts)
    snapshots = {'latents_%06d' % iteration: value.numpy()
                 for iteration, value in artifacts.latent_trajectory}
    snapshots['final'] = artifacts.latents.detach().numpy()
    md.archive.write_archive(os.path.join(out, 'latents'), snapshots,
                             header={'kind': 'latent_trajectory'}, float_dtype=None)
    write_summary(out, cfg, artifacts)
    return 0


def cmd_ablate(arguments):
    cfg, tmpl, stats, model, image_model = _prepare_run(arguments, mode='latent_ablation')
    return _run_ablation(arguments, cfg, tmpl, stats, model, image_model)


def cmd_check(arguments):
    try:
        results = md.run_checks(
            only=arguments.get('--only'),
            precision=arguments.get('--precision') or 'double',
            seed=_parse(arguments, '--seed', int) or 0,
        )
    except ValueError as err:
        raise ConfigError(str(err))
    print(md.format_check_table(results))
    return 0 if all(result.passed for result in results) else 1


def cmd_serve(arguments):
    port = _parse(arguments, '--port', int)
    model = md.EchoScoreModel(_parse(arguments, '--downsample', int) or md.DEFAULT_DOWNSAMPLE)
    server = md.ScoreModelServer((arguments['--host'], port), model)
    logger.info('serving the echo score model on %s:%d', *server.server_address)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()
    return 0


def cmd_convert(arguments):
    try:
        md.export_smplx_npz(
            arguments['<smplx_npz>'], arguments['<out_dir>'],
            n_shape=_parse(arguments, '--n-shape', int),
            n_expr=_parse(arguments, '--n-expr', int),
        )
    except (IOError, KeyError) as err:
        raise TemplateError('cannot convert %s: %s' % (arguments['<smplx_npz>'], err))
    return 0


def main(argv=None):
    '''
    The main. Returns the exit status.
    '''
    arguments = docopt(__doc__, argv=argv, version=md.__version__)
    logging.basicConfig(
        level=logging.DEBUG if arguments['--verbose'] else logging.INFO,
        format='%(asctime)s %(levelname)s %(name)s: %(message)s',
        stream=sys.stderr,
    )
    commands = {
        'train': cmd_train,
        'ablate': cmd_ablate,
        'check': cmd_check,
        'serve': cmd_serve,
        'convert': cmd_convert,
    }
    command = next(name for name in commands if arguments[name])
    try:
        return commands[command](arguments)
    except ConfigError as err:
        print('configuration error: %s' % err, file=sys.stderr)
        return 2
    except TemplateError as err:
        print('asset error: %s' % err, file=sys.stderr)
        return 3
    except (NonFiniteGradientError, TransportError, ChecksumError) as err:
        print('runtime error: %s' % err, file=sys.stderr)
        return 4


if __name__ == '__main__':
    sys.exit(main())
