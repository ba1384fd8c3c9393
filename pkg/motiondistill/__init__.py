'''
motiondistill

Synthesise human motion by score distillation: an MLP over frame
indices drives a parametric body, the posed mesh is rendered with a
soft rasterizer and a (video) diffusion model scores the result.
'''
from motiondistill import archive
from motiondistill.body_model import (
    BodyParams, BodyTemplate, Mesh, axis_angle_to_matrix, blend_template, export_smplx_npz, lbs,
    load_template, make_toy_model, neutral_params, regress_joints, save_template, validate_template)
from motiondistill.pose_field import (
    PoseFieldNet, PoseStats, init_to_mean, load_pose_stats, load_posefield, neutral_pose_stats,
    posefield_forward, posefield_sequence, positional_encode, positional_encode_frames,
    save_posefield)
from motiondistill.renderer import (
    Camera, CameraTrajectory, Video, assemble_pose, camera_at, look_at, perspective,
    rasterize_soft, render_poses, render_sequence, sample_camera, save_video, soft_coverage)
from motiondistill.diffusion_backend import (
    DEFAULT_DOWNSAMPLE, AnalyticGaussianBackend, EchoScoreModel, LatentVideo, PoolingEncoder, PromptEmbedding,
    ScoreModel, add_noise, analytic_gaussian_backend, cfg_combine, external_adapter)
from motiondistill.protocol import (
    ExternalScoreModel, ProtocolClient, ScoreModelServer, parse_endpoint, serve_in_thread)
from motiondistill.sds import (
    SdsConfig, reg_loss, sample_sigma, sds_image_grad, sds_surrogate, sds_temporal_grad, weighting)
from motiondistill.trainer import (
    RunArtifacts, TrainConfig, ablate_latent, checkpoint_roundtrip, config_from_dict,
    config_to_dict, get_loss_trace_figure, iteration_camera, joint_index_for, load_checkpoint,
    load_config, save_checkpoint, train_posefield, write_distance_trace, write_trace)
from motiondistill.checks import CheckResult, format_check_table, run_checks

__version__ = '0.1.0'
