'''
Tests of the training loop, the latent ablation, checkpoints and the
run configuration
'''
import json
import os
import warnings

import motiondistill as md
import numpy as np
import pytest
import torch
from matplotlib.figure import Figure

from motiondistill.errors import ChecksumError, ConfigError, NonFiniteGradientError, ShapeError
from helper_functions_for_tests import (
    get_point_mass_setup, get_random_video, get_small_config, get_toy_template)


def _target(tmpl, cfg, offset=0.3):
    '''
    a static pose sequence away from the neutral mean
    '''
    n_components = 3 * len(md.joint_index_for(tmpl, cfg))
    return np.full((cfg.frames, n_components), offset)


def _setup(**kwargs):
    cfg = get_small_config(**kwargs)
    tmpl = get_toy_template()
    stats = md.neutral_pose_stats(3 * tmpl.n_optimized)
    base = get_small_config()
    model, fixed = get_point_mass_setup(base, tmpl, _target(tmpl, base))
    return cfg, tmpl, stats, model, fixed


class _NanModel(md.ScoreModel):

    def __init__(self):
        super(_NanModel, self).__init__(md.PoolingEncoder(2))

    def denoise(self, latents, sigma, prompt):
        return torch.full_like(latents, float('nan'))


def test_zero_weights_leave_the_network_untouched():
    '''
    with every lambda at zero the parameters stay bit-identical
    '''
    cfg, tmpl, stats, model, fixed = _setup(
        sds=dict(lambda_sds_t=0., lambda_sds_img=0., lambda_reg=0.))
    initial = md.init_to_mean(stats, cfg.hidden, cfg.encoding_frequencies, cfg.seed, cfg.torch_dtype)
    artifacts = md.train_posefield(cfg, tmpl, stats, model, fixed_params=fixed)
    for before, after in zip(initial.parameters(), artifacts.parameters):
        assert torch.equal(before, after)
    np.testing.assert_array_equal(artifacts.loss_trace[:, 1], 0.)
    assert artifacts.iteration == cfg.iterations


def test_training_is_deterministic():
    '''
    the seed fixes cameras, sigma and eps, so two runs give the same trace
    '''
    cfg, tmpl, stats, model, fixed = _setup(fixed_azimuth=None)
    first = md.train_posefield(cfg, tmpl, stats, model, fixed_params=fixed)
    second = md.train_posefield(cfg, tmpl, stats, model, fixed_params=fixed)
    np.testing.assert_array_equal(first.loss_trace, second.loss_trace)
    for a, b in zip(first.parameters, second.parameters):
        assert torch.equal(a, b)
    assert first.loss_trace.shape == (cfg.iterations, 5)
    np.testing.assert_array_equal(first.loss_trace[:, 0], np.arange(cfg.iterations))
    np.testing.assert_array_equal(first.loss_trace[:, 4], 0.)

    other = md.train_posefield(get_small_config(fixed_azimuth=None, seed=1), tmpl, stats, model,
                               fixed_params=fixed)
    assert not np.array_equal(other.loss_trace[:, 3], first.loss_trace[:, 3])


def test_only_the_network_is_trained():
    '''
    fixed parameters and template survive a run unchanged
    '''
    cfg, tmpl, stats, model, fixed = _setup()
    fixed.pose[0] = torch.tensor([0.1, -0.2, 0.05], dtype=torch.float64)
    pose_before = fixed.pose.clone()
    vertices_before = tmpl.template_vertices.clone()
    artifacts = md.train_posefield(cfg, tmpl, stats, model, fixed_params=fixed)
    assert torch.equal(fixed.pose, pose_before)
    assert torch.equal(tmpl.template_vertices, vertices_before)
    assert artifacts.poses.shape == (cfg.frames, 3 * tmpl.n_optimized)
    assert artifacts.video.frames.shape == (cfg.frames, 24, 24, 3)
    assert float(artifacts.loss_trace[:, 1].max()) > 0


def test_global_orientation_joins_the_field():
    '''
    optimize_global_orient prepends the root joint
    '''
    tmpl = get_toy_template()
    assert md.joint_index_for(tmpl, get_small_config()).tolist() == [1, 2, 3]
    assert md.joint_index_for(tmpl, get_small_config(optimize_global_orient=True)).tolist() == [0, 1, 2, 3]


def test_stats_must_match_the_joints():
    '''
    pose statistics of the wrong size are a ShapeError
    '''
    cfg, tmpl, _, model, fixed = _setup()
    with pytest.raises(ShapeError):
        md.train_posefield(cfg, tmpl, md.neutral_pose_stats(6), model, fixed_params=fixed)


def test_image_sds_contributes():
    '''
    an image model adds gradient even when the video term is off
    '''
    cfg, tmpl, stats, model, fixed = _setup(sds=dict(lambda_sds_t=0., lambda_reg=0.))
    artifacts = md.train_posefield(cfg, tmpl, stats, model, image_model=md.EchoScoreModel(2),
                                   fixed_params=fixed)
    assert float(artifacts.loss_trace[:, 1].min()) > 0


def test_stopping_criterion_ends_the_run():
    '''
    stop_when is asked after every update and ends the run early
    '''
    cfg, tmpl, stats, model, fixed = _setup()
    asked = []

    def after_two(artifacts):
        asked.append(artifacts.iteration)
        return artifacts.iteration >= 2

    artifacts = md.train_posefield(cfg, tmpl, stats, model, fixed_params=fixed, stop_when=after_two)
    assert asked == [1, 2]
    assert artifacts.iteration == 2
    assert artifacts.loss_trace.shape == (2, 5)
    assert artifacts.poses.shape == (cfg.frames, 3 * tmpl.n_optimized)
    assert artifacts.final_distance is not None


def test_training_emits_no_tensor_conversion_warnings():
    '''
    the regulariser value is read without touching the autograd graph
    '''
    cfg, tmpl, stats, model, fixed = _setup(iterations=2)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter('always')
        md.train_posefield(cfg, tmpl, stats, model, fixed_params=fixed)
    assert not [w for w in caught if 'requires_grad' in str(w.message)]


def test_per_frame_cameras():
    '''
    per_frame_camera draws one camera per frame
    '''
    cfg = get_small_config(fixed_azimuth=None, per_frame_camera=True)
    cameras = md.iteration_camera(cfg, np.random.default_rng(0))
    assert len(cameras) == cfg.frames
    assert len({cam.azimuth for cam in cameras}) == cfg.frames
    fixed = md.iteration_camera(get_small_config(per_frame_camera=True), np.random.default_rng(0))
    assert fixed.azimuth == np.pi / 2


def test_checkpoint_roundtrip_is_bit_exact(tmp_path):
    '''
    weights, Adam moments, generator state and trace reload exactly
    '''
    cfg, tmpl, stats, model, fixed = _setup()
    artifacts = md.train_posefield(cfg, tmpl, stats, model, fixed_params=fixed)
    loaded = md.checkpoint_roundtrip(artifacts, str(tmp_path / 'ckpt'))
    assert loaded.iteration == artifacts.iteration
    np.testing.assert_array_equal(loaded.loss_trace, artifacts.loss_trace)
    for name, value in artifacts.net.state_dict().items():
        assert torch.equal(value, loaded.net.state_dict()[name]), name
    state, loaded_state = artifacts.optimizer.state_dict()['state'], loaded.optimizer.state_dict()['state']
    for index in state:
        assert torch.equal(state[index]['exp_avg'], loaded_state[index]['exp_avg'])
        assert torch.equal(state[index]['exp_avg_sq'], loaded_state[index]['exp_avg_sq'])
    assert loaded.rng.bit_generator.state == artifacts.rng.bit_generator.state
    assert loaded.config == cfg


def test_resume_continues_the_same_run(tmp_path):
    '''
    resuming from the checkpoint at iteration 3 reproduces the
    uninterrupted six-iteration run
    '''
    cfg, tmpl, stats, model, fixed = _setup(iterations=6, checkpoint_every=3)
    straight = md.train_posefield(cfg, tmpl, stats, model, out_dir=str(tmp_path), fixed_params=fixed)
    assert [os.path.basename(path) for path in straight.checkpoints] == ['ckpt_000003', 'ckpt_000006']

    resumed = md.load_checkpoint(str(tmp_path / 'ckpt_000003'), expected_k_b=tmpl.n_optimized)
    assert resumed.iteration == 3
    resumed = md.train_posefield(cfg, tmpl, stats, model, fixed_params=fixed, resume=resumed)
    np.testing.assert_array_equal(resumed.loss_trace, straight.loss_trace)
    for a, b in zip(resumed.parameters, straight.parameters):
        assert torch.equal(a, b)


def test_bad_checkpoints(tmp_path):
    '''
    a checkpoint for another joint count is a ShapeError, a damaged one a ChecksumError
    '''
    cfg, tmpl, stats, model, fixed = _setup(iterations=2)
    artifacts = md.train_posefield(cfg, tmpl, stats, model, fixed_params=fixed)
    path = md.save_checkpoint(artifacts, str(tmp_path / 'ckpt'))
    with pytest.raises(ShapeError):
        md.load_checkpoint(path, expected_k_b=tmpl.n_optimized + 1)

    filename = os.path.join(path, 'trace.bin')
    with open(filename, 'rb') as stream:
        raw = bytearray(stream.read())
    raw[0] ^= 0xFF
    with open(filename, 'wb') as stream:
        stream.write(raw)
    with pytest.raises(ChecksumError):
        md.load_checkpoint(path)

    other = md.archive.write_archive(str(tmp_path / 'other'), {'x': np.zeros(2)}, header={'kind': 'posefield'})
    with pytest.raises(ChecksumError):
        md.load_checkpoint(other)


def test_non_finite_gradient_aborts_with_a_dump(tmp_path):
    '''
    a NaN noise prediction stops the run and leaves a JSON dump
    '''
    cfg, tmpl, stats, _, fixed = _setup()
    with pytest.raises(NonFiniteGradientError) as info:
        md.train_posefield(cfg, tmpl, stats, _NanModel(), out_dir=str(tmp_path), fixed_params=fixed)
    assert info.value.iteration == 0
    assert os.path.basename(info.value.dump_path) == 'abort_0.json'
    with open(info.value.dump_path) as stream:
        dump = json.load(stream)
    assert dump['iteration'] == 0
    assert len(dump['poses']) == cfg.frames
    assert dump['config']['prompt'] == cfg.prompt


def test_resume_refuses_the_other_mode(tmp_path):
    '''
    ablation checkpoints cannot resume PoseField training and vice versa
    '''
    cfg, tmpl, stats, model, fixed = _setup(iterations=1)
    trained = md.train_posefield(cfg, tmpl, stats, model, fixed_params=fixed)
    video = get_random_video(np.random.default_rng(0), n_frames=cfg.frames, resolution=(24, 24))
    ablated = md.ablate_latent(cfg, video, model)
    with pytest.raises(ConfigError):
        md.train_posefield(cfg, tmpl, stats, model, resume=ablated)
    with pytest.raises(ConfigError):
        md.ablate_latent(cfg, video, model, resume=trained)


def test_ablation_fixed_point():
    '''
    starting at the point mass gives a vanishing gradient
    '''
    cfg = get_small_config(iterations=1, sds=dict(sigma_range=(0.3, 0.7)))
    video = get_random_video(np.random.default_rng(1), n_frames=cfg.frames, resolution=(24, 24))
    mean = md.PoolingEncoder(2)(video.frames)
    artifacts = md.ablate_latent(cfg, video, md.analytic_gaussian_backend(mean, downsample=2))
    assert artifacts.loss_trace[0, 1] < 1e-12
    assert artifacts.distance_trace[0, 1] == 0.


def test_ablation_snapshots():
    '''
    snapshot_every keeps copies of the latent along the run
    '''
    cfg = get_small_config(iterations=4, snapshot_every=2)
    rng = np.random.default_rng(2)
    video = get_random_video(rng, n_frames=cfg.frames, resolution=(24, 24))
    mean = md.PoolingEncoder(2)(get_random_video(rng, n_frames=cfg.frames, resolution=(24, 24)).frames)
    artifacts = md.ablate_latent(cfg, video, md.analytic_gaussian_backend(mean, downsample=2))
    assert [iteration for iteration, _ in artifacts.latent_trajectory] == [0, 2, 4]
    assert torch.equal(artifacts.latent_trajectory[-1][1], artifacts.latents.detach())
    assert artifacts.distance_trace.shape == (4, 2)
    np.testing.assert_array_equal(artifacts.loss_trace[:, 2], 0.)


@pytest.mark.slow
def test_ablation_converges_to_the_point_mass():
    '''
    optimising the latent directly drives ||Z - mu|| towards zero
    '''
    cfg = get_small_config(iterations=5000, frames=10, learning_rate=5e-4,
                           sds=dict(sigma_range=(0.3, 0.7)),
                           camera=dict(resolution=(64, 64)))
    rng = np.random.default_rng(3)
    video = get_random_video(rng, n_frames=10, resolution=(64, 64))
    initial = md.PoolingEncoder(8)(video.frames)
    assert initial.shape == (10, 4, 8, 8)
    mean = initial + 0.1 * torch.tensor(rng.normal(size=tuple(initial.shape)))
    artifacts = md.ablate_latent(cfg, video, md.analytic_gaussian_backend(mean, downsample=8))
    assert artifacts.distance_ratio < 0.01
    distances = artifacts.distance_trace[:, 1]
    assert distances[-100:].mean() < distances[:100].mean()


@pytest.mark.slow
def test_posefield_recovers_the_target_pose():
    '''
    ten frames of a static target pose seen from a fixed camera; the
    field starts 0.2 rad off in every component and ends within 0.05 rad
    '''
    cfg = get_small_config(iterations=3000, frames=10, hidden=32, learning_rate=1e-3,
                           sds=dict(lambda_reg=0., sigma_range=(0.3, 0.7)),
                           camera=dict(radius=2.5, fov_y=np.deg2rad(45.), resolution=(32, 32)))
    tmpl = get_toy_template()
    target = np.random.default_rng(4).uniform(-0.3, 0.3, size=3 * tmpl.n_optimized)
    stats = md.PoseStats(target + 0.2, np.full(target.shape, 0.5))
    model, fixed = get_point_mass_setup(cfg, tmpl, np.tile(target, (cfg.frames, 1)))

    def pose_error(net):
        with torch.no_grad():
            return float(np.abs(md.posefield_sequence(net, cfg.frames).numpy() - target).mean())

    def recovered(artifacts):
        return pose_error(artifacts.net) < 0.05

    artifacts = md.train_posefield(cfg, tmpl, stats, model, fixed_params=fixed, stop_when=recovered)
    assert artifacts.iteration <= 3000
    assert artifacts.distance_ratio < 0.5
    assert np.abs(artifacts.poses.numpy() - target).mean() < 0.05


def test_config_from_dict():
    '''
    nested dictionaries build the config; unknown keys are refused
    '''
    cfg = md.config_from_dict({'prompt': 'walk', 'guidance_scale': 7.5, 'camera': {'radius': 3.}})
    assert cfg.sds.guidance_scale == 7.5 == cfg.guidance_scale
    assert cfg.camera.radius == 3.
    for data in ({'iterationz': 3}, {'sds': {'lambda': 1.}}, {'camera': {'zoom': 2.}},
                 {'iterations': 0}, {'mode': 'other'}, {'dtype': 'float16'}, {'sds': 3}):
        with pytest.raises(ConfigError):
            md.config_from_dict(data)


def test_config_file_and_overrides(tmp_path):
    '''
    overrides beat the file, None overrides are ignored, nested keys merge
    '''
    path = tmp_path / 'config.json'
    path.write_text(json.dumps({'prompt': 'jump', 'iterations': 50, 'sds': {'lambda_reg': 0.1}}))
    cfg = md.load_config(str(path), {'iterations': 7, 'seed': None, 'sds': {'guidance_scale': 3.}})
    assert cfg.iterations == 7 and cfg.seed == 0
    assert cfg.sds.lambda_reg == 0.1 and cfg.sds.guidance_scale == 3.
    assert md.config_from_dict(md.config_to_dict(cfg)) == cfg

    path.write_text('[1, 2]')
    with pytest.raises(ConfigError):
        md.load_config(str(path))
    with pytest.raises(ConfigError):
        md.load_config(str(tmp_path / 'missing.json'))


def test_trace_outputs(tmp_path):
    '''
    the CSV carries the column header; the figure is a matplotlib Figure
    '''
    trace = [(0, 1.5, 0.25, 0.5, 0.), (1, 0.5, 0.125, 0.25, 0.)]
    path = str(tmp_path / 'loss.csv')
    md.write_trace(path, trace)
    with open(path) as stream:
        lines = stream.read().splitlines()
    assert lines[0] == 'iter,grad_norm,reg_loss,sigma,elapsed_ms'
    assert lines[1].startswith('0,1.5,0.25,0.5,')
    assert isinstance(md.get_loss_trace_figure(trace), Figure)
