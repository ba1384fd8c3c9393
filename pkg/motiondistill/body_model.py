'''
Parametric articulated human body: shape, expression and pose blend
shapes, joint regression and linear blend skinning.

The model maps (shape, expression, pose) to a mesh as

    M(beta, theta, psi) = LBS(T_p(beta, theta, psi), J(beta), theta, W)
    T_p = T + B_S(beta) + B_E(psi) + B_P(theta)

All functions accept torch tensors and are differentiable with respect
to every entry of BodyParams. The dtype of the parameters decides the
dtype of the computation; template constants are cast to it.
'''
import logging
from dataclasses import dataclass

import numpy as np
import torch

from motiondistill.archive import read_archive, write_archive
from motiondistill.errors import ShapeError, TemplateError

logger = logging.getLogger(__name__)

# below this rotation angle the Rodrigues formula switches to its series
SMALL_ANGLE = 1e-8
N_MAJOR_BODY_JOINTS = 21
WEIGHT_SUM_TOLERANCE = 1e-6

FLOAT_FIELDS = (
    'template_vertices',
    'shape_basis',
    'expression_basis',
    'pose_corrective_basis',
    'joint_regressor',
    'skinning_weights',
    'vertex_colors',
)


def _frozen_float(value):
    if isinstance(value, torch.Tensor):
        return value.detach().to(torch.float64).clone()
    return torch.tensor(np.asarray(value, dtype=np.float64))


def _frozen_index(value):
    if isinstance(value, torch.Tensor):
        return value.detach().to(torch.int64).clone()
    return torch.tensor(np.asarray(value, dtype=np.int64))


@dataclass(frozen=True, eq=False)
class BodyTemplate:
    '''
    All constants of the body model.

    template_vertices        [N, 3] rest pose, meters
    shape_basis              [N, 3, n_shape]
    expression_basis         [N, 3, n_expr]
    pose_corrective_basis    [N, 3, 9K]
    joint_regressor          [K+1, N]
    skinning_weights         [N, K+1], rows sum to one
    parents                  [K+1], parents[0] == -1, parents[k] < k
    faces                    [n_faces, 3]
    optimized_joints         indices of the joints whose pose is optimised
    vertex_colors            [N, 3] albedo in [0, 1]

    Arrays are stored as float64 / int64 torch tensors and copied on
    construction; the instance is treated as immutable.
    '''
    template_vertices: torch.Tensor
    shape_basis: torch.Tensor
    expression_basis: torch.Tensor
    pose_corrective_basis: torch.Tensor
    joint_regressor: torch.Tensor
    skinning_weights: torch.Tensor
    parents: torch.Tensor
    faces: torch.Tensor
    optimized_joints: torch.Tensor = None
    vertex_colors: torch.Tensor = None

    def __post_init__(self):
        if self.vertex_colors is None:
            n_vertices = np.shape(self.template_vertices)[0]
            object.__setattr__(self, 'vertex_colors', np.full((n_vertices, 3), 0.7))
        for name in FLOAT_FIELDS:
            object.__setattr__(self, name, _frozen_float(getattr(self, name)))
        object.__setattr__(self, 'parents', _frozen_index(self.parents).reshape(-1))
        object.__setattr__(self, 'faces', _frozen_index(self.faces).reshape(-1, 3))
        if self.optimized_joints is None:
            n_joints = self.parents.shape[0]
            default = np.arange(1, 1 + min(N_MAJOR_BODY_JOINTS, n_joints - 1))
            object.__setattr__(self, 'optimized_joints', default)
        object.__setattr__(self, 'optimized_joints', _frozen_index(self.optimized_joints).reshape(-1))
        validate_template(self)
        object.__setattr__(self, '_parent_list', self.parents.tolist())

    @property
    def n_vertices(self):
        return self.template_vertices.shape[0]

    @property
    def n_joints(self):
        '''Number of joints including the root, K + 1.'''
        return self.parents.shape[0]

    @property
    def n_shape(self):
        return self.shape_basis.shape[2]

    @property
    def n_expr(self):
        return self.expression_basis.shape[2]

    @property
    def n_optimized(self):
        return self.optimized_joints.shape[0]


@dataclass
class BodyParams:
    '''
    shape         [n_shape] beta
    expression    [n_expr] psi
    pose          [K+1, 3] per-joint axis-angle, radians; row 0 is
                  the global orientation
    '''
    shape: torch.Tensor
    expression: torch.Tensor
    pose: torch.Tensor

    @property
    def dtype(self):
        return self.pose.dtype


@dataclass
class Mesh:
    vertices: torch.Tensor
    faces: torch.Tensor
    per_vertex_color: torch.Tensor


def validate_template(tmpl):
    '''
    Check every BodyTemplate invariant, raising TemplateError on the first
    violation.
    '''
    vertices = tmpl.template_vertices
    if vertices.ndim != 2 or vertices.shape[1] != 3:
        raise TemplateError('template_vertices must be [N, 3], got %s' % list(vertices.shape))
    n_vertices = vertices.shape[0]
    n_joints = tmpl.parents.shape[0]
    if n_joints < 1:
        raise TemplateError('the kinematic tree needs at least one joint')

    expected = {
        'shape_basis': (n_vertices, 3, None),
        'expression_basis': (n_vertices, 3, None),
        'pose_corrective_basis': (n_vertices, 3, 9 * (n_joints - 1)),
        'joint_regressor': (n_joints, n_vertices),
        'skinning_weights': (n_vertices, n_joints),
        'vertex_colors': (n_vertices, 3),
    }
    for name, shape in expected.items():
        actual = tuple(getattr(tmpl, name).shape)
        if len(actual) != len(shape) or any(
                want is not None and want != got for want, got in zip(shape, actual)):
            raise TemplateError('%s has shape %s, expected %s' % (name, list(actual), list(shape)))

    for name in FLOAT_FIELDS:
        if not bool(torch.isfinite(getattr(tmpl, name)).all()):
            raise TemplateError('%s contains non-finite values' % name)

    weights = tmpl.skinning_weights
    if bool((weights < 0).any()):
        raise TemplateError('skinning weights must be nonnegative')
    row_error = (weights.sum(dim=1) - 1).abs().max().item() if n_vertices else 0.
    if row_error > WEIGHT_SUM_TOLERANCE:
        raise TemplateError('skinning weight rows must sum to one (max error %.3g)' % row_error)

    parents = tmpl.parents.tolist()
    if parents[0] != -1:
        raise TemplateError('joint 0 must be the root (parent -1)')
    for joint, parent in enumerate(parents[1:], start=1):
        if not 0 <= parent < joint:
            raise TemplateError('joint %d has parent %d; parents must precede children' % (joint, parent))

    faces = tmpl.faces
    if faces.numel() and (int(faces.min()) < 0 or int(faces.max()) >= n_vertices):
        raise TemplateError('face indices must lie in [0, %d)' % n_vertices)

    optimized = tmpl.optimized_joints.tolist()
    if len(set(optimized)) != len(optimized) or any(not 0 <= j < n_joints for j in optimized):
        raise TemplateError('optimized_joints must be distinct joint indices below %d' % n_joints)

    colors = tmpl.vertex_colors
    if n_vertices and (float(colors.min()) < 0 or float(colors.max()) > 1):
        raise TemplateError('vertex colors must lie in [0, 1]')


def neutral_params(tmpl, dtype=torch.float64):
    '''
    Zero shape, zero expression, rest pose.
    '''
    return BodyParams(
        shape=torch.zeros(tmpl.n_shape, dtype=dtype),
        expression=torch.zeros(tmpl.n_expr, dtype=dtype),
        pose=torch.zeros((tmpl.n_joints, 3), dtype=dtype),
    )


def _skew(vectors):
    x, y, z = vectors.unbind(-1)
    zero = torch.zeros_like(x)
    return torch.stack(
        [zero, -z, y, z, zero, -x, -y, x, zero], dim=-1
        ).reshape(vectors.shape[:-1] + (3, 3))


def axis_angle_to_matrix(aa):
    '''
    Rodrigues formula for axis-angle vectors of shape [..., 3].

    R = I + sin(t)/t K + (1 - cos(t))/t^2 K^2 with K the cross product
    matrix of aa and t = |aa|. Below t = SMALL_ANGLE the coefficients
    are replaced by their Taylor series, so the map and its gradient
    are well defined at the zero vector.
    '''
    if not isinstance(aa, torch.Tensor):
        aa = torch.tensor(np.asarray(aa, dtype=np.float64))
    elif not torch.is_floating_point(aa):
        aa = aa.to(torch.float64)
    if aa.shape[-1:] != (3,):
        raise ShapeError('axis-angle vectors must have a trailing dimension of 3, got %s' % list(aa.shape))
    if not bool(torch.isfinite(aa).all()):
        raise ValueError('axis-angle vector must be finite')

    angle_sq = (aa * aa).sum(dim=-1)[..., None, None]
    small = angle_sq < SMALL_ANGLE ** 2
    safe_sq = torch.where(small, torch.ones_like(angle_sq), angle_sq)
    angle = torch.sqrt(safe_sq)
    sin_term = torch.where(small, 1 - angle_sq / 6, torch.sin(angle) / angle)
    cos_term = torch.where(small, 0.5 - angle_sq / 24, (1 - torch.cos(angle)) / safe_sq)

    cross = _skew(aa)
    eye = torch.eye(3, dtype=aa.dtype, device=aa.device).expand(cross.shape)
    return eye + sin_term * cross + cos_term * (cross @ cross)


def _check_params(tmpl, params):
    if tuple(params.shape.shape) != (tmpl.n_shape,):
        raise ShapeError('shape has %s entries, template has %d shape components' % (
            list(params.shape.shape), tmpl.n_shape))
    if tuple(params.expression.shape) != (tmpl.n_expr,):
        raise ShapeError('expression has %s entries, template has %d expression components' % (
            list(params.expression.shape), tmpl.n_expr))
    if tuple(params.pose.shape) != (tmpl.n_joints, 3):
        raise ShapeError('pose must be [%d, 3], got %s' % (tmpl.n_joints, list(params.pose.shape)))


def shaped_vertices(tmpl, params):
    '''
    T + B_S(beta) + B_E(psi): the template before pose correctives.
    '''
    dtype = params.dtype
    return (
        tmpl.template_vertices.to(dtype)
        + torch.einsum('nkl,l->nk', tmpl.shape_basis.to(dtype), params.shape.to(dtype))
        + torch.einsum('nkl,l->nk', tmpl.expression_basis.to(dtype), params.expression.to(dtype))
    )


def pose_blend(tmpl, rotations):
    '''
    B_P: contract the pose corrective basis with the flattened
    (R_k - I) of the K non-root joints. Zero at the rest pose.
    '''
    eye = torch.eye(3, dtype=rotations.dtype, device=rotations.device)
    features = (rotations[1:] - eye).reshape(-1)
    return torch.einsum('nkp,p->nk', tmpl.pose_corrective_basis.to(rotations.dtype), features)


def blend_template(tmpl, params):
    '''
    T_p = T + B_S(beta) + B_E(psi) + B_P(theta), the [N, 3] blended template.
    '''
    _check_params(tmpl, params)
    rotations = axis_angle_to_matrix(params.pose)
    return shaped_vertices(tmpl, params) + pose_blend(tmpl, rotations)


def regress_joints(tmpl, vertices):
    '''
    Joint locations J @ vertices, [K+1, 3].
    '''
    if tuple(vertices.shape) != (tmpl.n_vertices, 3):
        raise ShapeError('vertices must be [%d, 3], got %s' % (tmpl.n_vertices, list(vertices.shape)))
    return tmpl.joint_regressor.to(vertices.dtype) @ vertices


def skinning_transforms(parents, rotations, joints):
    '''
    Compose local rotations along the kinematic tree.

    It returns the world rotation of every joint and the translation of
    its rest-relative transform, i.e. A_k(x) = x + (R_k - I) x + t_k.
    Translations are accumulated as joint displacements, which are
    exactly zero at the rest pose.
    '''
    eye = torch.eye(3, dtype=rotations.dtype, device=rotations.device)
    world = [rotations[0]]
    displacement = [torch.zeros(3, dtype=rotations.dtype, device=rotations.device)]
    for joint in range(1, len(parents)):
        parent = parents[joint]
        bone = joints[joint] - joints[parent]
        displacement.append(displacement[parent] + (world[parent] - eye) @ bone)
        world.append(world[parent] @ rotations[joint])
    world = torch.stack(world)
    displacement = torch.stack(displacement)
    translation = displacement - ((world - eye) @ joints.unsqueeze(-1)).squeeze(-1)
    return world, translation


def lbs(tmpl, params):
    '''
    Evaluate the body model and return the posed Mesh.

    Joints are regressed from the shaped template (shape and expression,
    no pose correctives); the root rotates about its own rest location.
    '''
    _check_params(tmpl, params)
    dtype = params.dtype
    shaped = shaped_vertices(tmpl, params)
    joints = regress_joints(tmpl, shaped)
    rotations = axis_angle_to_matrix(params.pose)
    posed = shaped + pose_blend(tmpl, rotations)

    world, translation = skinning_transforms(tmpl._parent_list, rotations, joints)
    eye = torch.eye(3, dtype=dtype, device=world.device)
    weights = tmpl.skinning_weights.to(dtype)
    blended = (weights @ (world - eye).reshape(-1, 9)).reshape(-1, 3, 3)
    vertices = posed + (blended @ posed.unsqueeze(-1)).squeeze(-1) + weights @ translation
    return Mesh(
        vertices=vertices,
        faces=tmpl.faces,
        per_vertex_color=tmpl.vertex_colors.to(dtype),
    )


def make_toy_model(seed, n_vertices, n_joints, n_shape=4, n_expr=2, n_optimized=None):
    '''
    A small deterministic stand-in for the licensed body model.

    The skeleton is a chain of n_joints joints (root included) whose
    bones alternate between diagonal directions, so every rotation axis
    of every joint moves the silhouette or the texture visibly from any
    camera on the horizontal ring. The surface is a helical tube of
    n_vertices vertices around the bones with six vertices per turn.
    Skinning weights and the joint regressor are Gaussian in the
    arc length along the chain and are renormalised to rows of sum one.
    '''
    if n_vertices < 4:
        raise ValueError('the toy model needs at least 4 vertices, got %d' % n_vertices)
    if n_joints < 1:
        raise ValueError('the toy model needs at least 1 joint, got %d' % n_joints)
    rng = np.random.default_rng(seed)

    height = 1.6
    segment = height / n_joints
    directions = np.array([
        [0.4 * (-1) ** k, 1.0, 0.4 * (-1) ** (k // 2)]
        for k in range(n_joints)
        ])
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    path = np.zeros((n_joints + 1, 3))
    path[0] = (0., -0.5 * height, 0.)
    for k in range(n_joints):
        path[k + 1] = path[k] + segment * directions[k]

    arclength = np.linspace(0., height, n_vertices)
    bone = np.minimum((arclength / segment).astype(int), n_joints - 1)
    along = arclength - bone * segment
    axis_points = path[bone] + along[:, None] * directions[bone]

    turn = min(6, n_vertices - 1)
    phi = 2 * np.pi * np.arange(n_vertices) / turn
    radius_x = 0.12 + 0.03 * np.sin(3 * np.pi * arclength / height)
    radius_z = 0.06
    ring = np.stack([radius_x * np.cos(phi), np.zeros(n_vertices), radius_z * np.sin(phi)], axis=1)
    vertices = axis_points + ring + rng.normal(scale=0.005, size=(n_vertices, 3))

    faces = []
    for i in range(n_vertices - turn):
        faces.append((i, i + 1, i + turn))
        if i + turn + 1 < n_vertices:
            faces.append((i + 1, i + turn + 1, i + turn))

    width = 0.5 * segment
    joint_position = np.arange(n_joints) * segment
    dist_sq = (joint_position[:, None] - arclength[None, :]) ** 2
    regressor = np.exp(-(dist_sq - dist_sq.min(axis=1, keepdims=True)) / (2 * width ** 2))
    regressor /= regressor.sum(axis=1, keepdims=True)

    bone_centre = (np.arange(n_joints) + 0.5) * segment
    dist_sq = (arclength[:, None] - bone_centre[None, :]) ** 2
    weights = np.exp(-(dist_sq - dist_sq.min(axis=1, keepdims=True)) / (2 * width ** 2))
    weights /= weights.sum(axis=1, keepdims=True)

    shape_basis = rng.normal(scale=0.01, size=(n_vertices, 3, n_shape))
    expression_basis = rng.normal(scale=0.01, size=(n_vertices, 3, n_expr))
    pose_corrective_basis = rng.normal(scale=0.005, size=(n_vertices, 3, 9 * (n_joints - 1)))

    colors = np.stack([
        0.5 + 0.4 * np.cos(phi),
        0.5 + 0.4 * np.sin(phi),
        0.2 + 0.6 * arclength / height,
        ], axis=1)

    if n_optimized is None:
        n_optimized = min(N_MAJOR_BODY_JOINTS, n_joints - 1)
    if not 0 <= n_optimized <= n_joints - 1:
        raise ValueError('cannot optimise %d joints of a %d joint chain' % (n_optimized, n_joints))

    return BodyTemplate(
        template_vertices=vertices,
        shape_basis=shape_basis,
        expression_basis=expression_basis,
        pose_corrective_basis=pose_corrective_basis,
        joint_regressor=regressor,
        skinning_weights=weights,
        parents=np.arange(n_joints) - 1,
        faces=np.array(faces, dtype=np.int64).reshape(-1, 3),
        optimized_joints=np.arange(1, 1 + n_optimized),
        vertex_colors=colors,
    )


def save_template(tmpl, path):
    '''
    Write the template to an asset archive (float32 arrays).
    '''
    arrays = {name: getattr(tmpl, name).numpy() for name in FLOAT_FIELDS}
    inline = {
        'parents': tmpl.parents.numpy(),
        'faces': tmpl.faces.numpy(),
        'optimized_joints': tmpl.optimized_joints.numpy(),
    }
    header = {
        'kind': 'body_template',
        'n_vertices': tmpl.n_vertices,
        'n_joints': tmpl.n_joints,
    }
    return write_archive(path, arrays, inline=inline, header=header)


def load_template(path):
    '''
    Load an asset archive and validate it. Missing arrays or violated
    invariants raise TemplateError.
    '''
    arrays, inline, header = read_archive(path)
    required = [name for name in FLOAT_FIELDS if name != 'vertex_colors']
    missing = [name for name in required if name not in arrays]
    missing += [name for name in ('parents', 'faces', 'optimized_joints') if name not in inline]
    if missing:
        raise TemplateError('asset %s lacks %s' % (path, ', '.join(missing)))
    tmpl = BodyTemplate(
        parents=inline['parents'],
        faces=inline['faces'].reshape(-1, 3),
        optimized_joints=inline['optimized_joints'],
        **arrays
        )
    logger.info('loaded body template %s: %d vertices, %d joints, %d optimised',
                path, tmpl.n_vertices, tmpl.n_joints, tmpl.n_optimized)
    return tmpl


def export_smplx_npz(npz_path, out_dir, n_shape=10, n_expr=10):
    '''
    Convert a licensed SMPL-X ``.npz`` model file into an asset archive.

    Expected keys: v_template, shapedirs, posedirs, J_regressor, weights,
    kintree_table, f. Shape components come first in shapedirs; the
    expression components start at column 300 for the 400-column
    release and at column 10 for the 20-column one. The 21 body joints
    following the pelvis are named as the optimised set.
    '''
    data = np.load(npz_path, allow_pickle=True)
    shapedirs = np.asarray(data['shapedirs'], dtype=np.float64)
    expr_start = 300 if shapedirs.shape[2] >= 400 else 10
    posedirs = np.asarray(data['posedirs'], dtype=np.float64)
    n_vertices = data['v_template'].shape[0]
    if posedirs.ndim == 2:
        # some releases store posedirs as [9K, N*3]
        posedirs = posedirs.reshape(-1, n_vertices, 3).transpose(1, 2, 0)
    parents = np.asarray(data['kintree_table'][0], dtype=np.int64)
    parents[0] = -1
    n_joints = parents.shape[0]
    weights = np.asarray(data['weights'], dtype=np.float64)

    tmpl = BodyTemplate(
        template_vertices=data['v_template'],
        shape_basis=shapedirs[:, :, :n_shape],
        expression_basis=shapedirs[:, :, expr_start:expr_start + n_expr],
        pose_corrective_basis=posedirs,
        joint_regressor=np.asarray(data['J_regressor'], dtype=np.float64),
        skinning_weights=weights / weights.sum(axis=1, keepdims=True),
        parents=parents,
        faces=np.asarray(data['f'], dtype=np.int64),
        optimized_joints=np.arange(1, 1 + min(N_MAJOR_BODY_JOINTS, n_joints - 1)),
    )
    return save_template(tmpl, out_dir)
