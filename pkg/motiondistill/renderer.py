'''
Cameras on a circular trajectory and a soft rasterizer for posed meshes.

Every triangle contributes to every pixel. Its occupancy is
sigmoid(sharpness * d) with d the signed distance of the pixel centre
to the triangle boundary in normalised device coordinates (positive
inside). Colours of overlapping triangles are blended with a softmax
over occupancy-weighted inverse depth, and the aggregated coverage
1 - prod(1 - occupancy) composites the result over the background.
Shading is Lambertian with a headlight, so the light follows the camera.
'''
import json
import logging
import os
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
import matplotlib.pyplot as plt

from motiondistill.body_model import BodyParams, lbs
from motiondistill.errors import ConfigError, ShapeError
from motiondistill.pose_field import posefield_sequence

logger = logging.getLogger(__name__)

NEAR = 0.1
FAR = 100.
DEFAULT_SHARPNESS = 50.
DEPTH_TEMPERATURE = 2e-2
AMBIENT = 0.35
DIFFUSE = 0.65
WHITE = (1., 1., 1.)

_EPS = 1e-12
_MASKED_LOGIT = -1e30


@dataclass
class CameraTrajectory:
    '''
    Horizontal circle of cameras looking at ``center``.

    center       [3] look-at target, usually the mesh centroid
    radius       meters
    height       meters above the center
    fov_y        vertical field of view, radians
    resolution   (H, W) pixels
    '''
    center: tuple = (0., 0., 0.)
    radius: float = 2.5
    height: float = 0.
    fov_y: float = np.pi / 4
    resolution: tuple = (64, 64)

    def __post_init__(self):
        self.center = tuple(float(c) for c in np.asarray(self.center, dtype=np.float64).reshape(3))
        self.resolution = tuple(int(r) for r in self.resolution)
        if not self.radius > 0:
            raise ConfigError('camera radius must be positive, got %r' % self.radius)
        if not 0 < self.fov_y < np.pi:
            raise ConfigError('camera fov_y must lie in (0, pi), got %r' % self.fov_y)
        if len(self.resolution) != 2 or min(self.resolution) < 8:
            raise ConfigError('resolution must be (H, W) with H, W >= 8, got %r' % (self.resolution,))


@dataclass
class Camera:
    position: np.ndarray
    view: np.ndarray
    projection: np.ndarray
    resolution: tuple
    azimuth: float = None


@dataclass
class Video:
    '''
    frames   [F, H, W, 3] RGB in [0, 1]
    poses    [F, 3 K_b] pose sequence the frames were rendered from, if any
    '''
    frames: torch.Tensor
    poses: torch.Tensor = field(default=None)

    @property
    def n_frames(self):
        return self.frames.shape[0]


def look_at(eye, target, up=(0., 1., 0.)):
    '''
    OpenGL view matrix: the camera sits at eye and looks down its -z axis
    towards target.
    '''
    eye = np.asarray(eye, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - eye
    forward /= np.linalg.norm(forward)
    side = np.cross(forward, up)
    side /= np.linalg.norm(side)
    true_up = np.cross(side, forward)

    view = np.eye(4)
    view[0, :3] = side
    view[1, :3] = true_up
    view[2, :3] = -forward
    view[:3, 3] = -view[:3, :3] @ eye
    return view


def perspective(fov_y, aspect, near=NEAR, far=FAR):
    '''
    OpenGL projection matrix; clip w equals the depth in front of the camera.
    '''
    focal = 1. / np.tan(fov_y / 2.)
    projection = np.zeros((4, 4))
    projection[0, 0] = focal / aspect
    projection[1, 1] = focal
    projection[2, 2] = (far + near) / (near - far)
    projection[2, 3] = 2. * far * near / (near - far)
    projection[3, 2] = -1.
    return projection


def camera_at(traj, azimuth):
    '''
    The camera of the trajectory at a given azimuth in radians.
    '''
    center = np.asarray(traj.center)
    position = center + np.array([
        traj.radius * np.cos(azimuth),
        traj.height,
        traj.radius * np.sin(azimuth),
    ])
    height, width = traj.resolution
    return Camera(
        position=position,
        view=look_at(position, center),
        projection=perspective(traj.fov_y, width / height),
        resolution=traj.resolution,
        azimuth=float(azimuth),
    )


def sample_camera(traj, rng):
    '''
    Draw azimuth ~ Uniform[0, 2 pi) from the numpy Generator rng.
    '''
    return camera_at(traj, rng.uniform(0., 2. * np.pi))


def pixel_centers(resolution, dtype=torch.float64):
    '''
    NDC coordinates of the pixel centres, [H * W, 2], row 0 at the top.
    '''
    height, width = resolution
    x = (2. * torch.arange(width, dtype=dtype) + 1.) / width - 1.
    y = 1. - (2. * torch.arange(height, dtype=dtype) + 1.) / height
    grid_y, grid_x = torch.meshgrid(y, x, indexing='ij')
    return torch.stack([grid_x.reshape(-1), grid_y.reshape(-1)], dim=-1)


def _cross2(a, b):
    return a[..., 0] * b[..., 1] - a[..., 1] * b[..., 0]


def _segment_distance_sq(points, start, end):
    edge = end - start
    offset = points - start
    t = (offset * edge).sum(-1) / ((edge * edge).sum(-1) + _EPS)
    closest = t.clamp(0., 1.)[..., None] * edge
    return ((offset - closest) ** 2).sum(-1)


def _fragments(mesh, cam, sharpness):
    '''
    Per pixel and triangle: log occupancy, log(1 - occupancy), inverse
    depth and clipped barycentric weights, plus the triangle validity mask.
    '''
    vertices = mesh.vertices
    if vertices.ndim != 2 or vertices.shape[1] != 3 or vertices.shape[0] == 0:
        raise ShapeError('mesh vertices must be a non-empty [N, 3] tensor')
    if mesh.faces.numel() == 0:
        raise ShapeError('mesh has no faces')
    if not bool(torch.isfinite(vertices).all()):
        raise ValueError('mesh vertices must be finite')
    dtype = vertices.dtype

    view = torch.as_tensor(cam.view, dtype=dtype)
    projection = torch.as_tensor(cam.projection, dtype=dtype)
    homogeneous = torch.cat([vertices, torch.ones_like(vertices[:, :1])], dim=1)
    eye_space = homogeneous @ view.T
    clip = eye_space @ projection.T
    depth = clip[:, 3]
    in_front = depth > NEAR
    safe_depth = torch.where(in_front, depth, torch.ones_like(depth))
    ndc = clip[:, :2] / safe_depth[:, None]

    faces = mesh.faces
    tri = ndc[faces]
    tri_depth = safe_depth[faces]
    area = _cross2(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    valid = in_front[faces].all(dim=1) & (area.abs() > _EPS)
    safe_area = torch.where(valid, area, torch.ones_like(area))

    pixels = pixel_centers(cam.resolution, dtype)[:, None, :]
    a, b, c = tri[None, :, 0], tri[None, :, 1], tri[None, :, 2]
    bary = torch.stack([
        _cross2(b - pixels, c - pixels),
        _cross2(c - pixels, a - pixels),
        _cross2(a - pixels, b - pixels),
    ], dim=-1) / safe_area[None, :, None]
    inside = (bary >= 0).all(dim=-1)

    dist_sq = torch.minimum(torch.minimum(
        _segment_distance_sq(pixels, a, b),
        _segment_distance_sq(pixels, b, c)),
        _segment_distance_sq(pixels, c, a))
    distance = torch.sqrt(dist_sq + _EPS)
    signed = torch.where(inside, distance, -distance)

    log_occupancy = F.logsigmoid(sharpness * signed)
    log_vacancy = F.logsigmoid(-sharpness * signed)
    log_occupancy = torch.where(valid[None], log_occupancy, torch.full_like(log_occupancy, _MASKED_LOGIT))
    log_vacancy = torch.where(valid[None], log_vacancy, torch.zeros_like(log_vacancy))

    clipped = bary.clamp(0., 1.)
    clipped = clipped / (clipped.sum(-1, keepdim=True) + _EPS)
    inverse_depth = (clipped / tri_depth[None]).sum(-1)
    return {
        'eye_space': eye_space[:, :3],
        'log_occupancy': log_occupancy,
        'log_vacancy': log_vacancy,
        'inverse_depth': inverse_depth,
        'barycentric': clipped,
        'valid': valid,
    }


def soft_coverage(mesh, cam, sharpness=DEFAULT_SHARPNESS):
    '''
    Aggregated coverage 1 - prod(1 - occupancy), [H, W].
    '''
    fragments = _fragments(mesh, cam, sharpness)
    height, width = cam.resolution
    return (1. - torch.exp(fragments['log_vacancy'].sum(-1))).reshape(height, width)


def _face_shading(eye_space, faces):
    tri = eye_space[faces]
    normal = torch.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0], dim=-1)
    norm = torch.sqrt((normal * normal).sum(-1) + _EPS)
    # headlight: the light direction is the camera z axis
    return AMBIENT + DIFFUSE * (normal[:, 2] / norm).abs()


def rasterize_soft(mesh, cam, sharpness=DEFAULT_SHARPNESS, bg_color=WHITE):
    '''
    Render a Mesh with a Camera into an [H, W, 3] image in [0, 1].

    Triangles behind the near plane and zero-area triangles contribute
    nothing; a mesh entirely behind the camera yields the background.
    '''
    if not sharpness > 0:
        raise ValueError('sharpness must be positive, got %r' % sharpness)
    fragments = _fragments(mesh, cam, sharpness)
    dtype = mesh.vertices.dtype
    height, width = cam.resolution

    albedo = mesh.per_vertex_color.to(dtype)[mesh.faces]
    shading = _face_shading(fragments['eye_space'], mesh.faces)
    colors = torch.einsum('ptk,tkc->ptc', fragments['barycentric'], albedo) * shading[None, :, None]

    logits = fragments['log_occupancy'] + fragments['inverse_depth'] / DEPTH_TEMPERATURE
    logits = torch.where(fragments['valid'][None], logits, torch.full_like(logits, _MASKED_LOGIT))
    weights = torch.softmax(logits, dim=-1)
    color = torch.einsum('pt,ptc->pc', weights, colors)

    alpha = 1. - torch.exp(fragments['log_vacancy'].sum(-1, keepdim=True))
    background = torch.as_tensor(bg_color, dtype=dtype)
    image = alpha * color + (1. - alpha) * background
    return image.reshape(height, width, 3)


def assemble_pose(theta_b, fixed_params, joint_index):
    '''
    Full BodyParams with the rows joint_index of the pose replaced by theta_b.
    The other entries are taken from fixed_params, which is left untouched.
    '''
    dtype = theta_b.dtype
    joint_index = torch.as_tensor(joint_index, dtype=torch.int64)
    rows = theta_b.reshape(-1, 3)
    if rows.shape[0] != joint_index.shape[0]:
        raise ShapeError('theta_b drives %d joints, joint index names %d' % (
            rows.shape[0], joint_index.shape[0]))
    pose = fixed_params.pose.to(dtype).index_copy(0, joint_index, rows)
    return BodyParams(
        shape=fixed_params.shape.to(dtype),
        expression=fixed_params.expression.to(dtype),
        pose=pose,
    )


def render_poses(tmpl, poses, fixed_params, cam, joint_index=None,
                 sharpness=DEFAULT_SHARPNESS, bg_color=WHITE):
    '''
    Render a [F, 3 K_b] pose sequence. ``cam`` is one Camera shared by
    all frames or a list with one Camera per frame.
    '''
    if joint_index is None:
        joint_index = tmpl.optimized_joints
    cameras = cam if isinstance(cam, (list, tuple)) else [cam] * poses.shape[0]
    if len(cameras) != poses.shape[0]:
        raise ShapeError('%d cameras for %d frames' % (len(cameras), poses.shape[0]))
    frames = []
    for theta_b, frame_cam in zip(poses, cameras):
        mesh = lbs(tmpl, assemble_pose(theta_b, fixed_params, joint_index))
        frames.append(rasterize_soft(mesh, frame_cam, sharpness, bg_color))
    return Video(frames=torch.stack(frames), poses=poses)


def render_sequence(tmpl, net, fixed_params, cam, n_frames, joint_index=None,
                    sharpness=DEFAULT_SHARPNESS, bg_color=WHITE):
    '''
    Evaluate the PoseField for tau = 0 .. F-1, pose the body and render
    each frame. The Video is differentiable with respect to the network.
    '''
    poses = posefield_sequence(net, n_frames)
    return render_poses(tmpl, poses, fixed_params, cam, joint_index, sharpness, bg_color)


def save_video(video, directory, fps=10):
    '''
    Write frame_%04d.png files and an index.json into directory.
    '''
    os.makedirs(directory, exist_ok=True)
    frames = video.frames.detach().cpu().numpy()
    for index, frame in enumerate(frames):
        plt.imsave(os.path.join(directory, 'frame_%04d.png' % index), np.clip(frame, 0., 1.))
    n_frames, height, width = frames.shape[:3]
    with open(os.path.join(directory, 'index.json'), 'w') as stream:
        json.dump({'F': n_frames, 'H': height, 'W': width, 'fps': fps}, stream, indent=1)
    logger.info('saved %d frames to %s', n_frames, directory)
    return directory
