import numpy as np
import pytest
import torch

from hybrid_avatar.geometry import (AvatarParams, FrameParams, NumericalDegeneracyError, ParametricModel,
                                    canonical_vertices, invert_transforms, joints, pose_mesh, rodrigues,
                                    shaped_template, vertex_transforms)
from hybrid_avatar.toy import capsule_model

from conftest import make_frame, zero_avatar


def _zeros(model):
    return (torch.zeros(model.n_shape, dtype=torch.float64), torch.zeros(model.n_joints, 3, dtype=torch.float64),
            torch.zeros(model.n_expr, dtype=torch.float64), torch.zeros(model.n_verts, 3, dtype=torch.float64))


def one_joint_model(weights=None):
    verts = np.array([[1.0, 0, 0], [0, 1.0, 0], [0, 0, 1.0]])
    n = len(verts)
    return ParametricModel(
        template_vertices=verts, faces=[[0, 1, 2]], shape_dirs=np.zeros((n, 3, 1)),
        pose_dirs=np.zeros((n, 3, 0)), expr_dirs=np.zeros((n, 3, 1)),
        skin_weights=np.ones((1, n)) if weights is None else weights,
        joint_regressor=np.zeros((1, n)), parents=[-1], region_labels=np.zeros(n, dtype=int),
        canonical_pose=np.zeros((1, 3)))


def test_model_invariants(model):
    model.validate()
    assert np.allclose(model.skin_weights.sum(0), 1.0)
    assert model.parents[0] == -1
    assert 500 <= model.n_verts <= 700 and model.n_joints == 4


def test_bad_weights_rejected():
    w = np.full((1, 3), 0.5)
    with pytest.raises(ValueError):
        one_joint_model(w)


def test_zero_params_give_template(model):
    b, t, p, o = _zeros(model)
    out = shaped_template(model, b, t, p, o)
    assert torch.equal(out, torch.as_tensor(model.template_vertices))
    posed = pose_mesh(model, zero_avatar(model), make_frame(model))
    assert torch.equal(posed.vertices, torch.as_tensor(model.template_vertices))


def test_first_shape_basis(model):
    b, t, p, o = _zeros(model)
    b[0] = 1.0
    out = shaped_template(model, b, t, p, o)
    expect = model.template_vertices + model.shape_dirs[:, :, 0]
    np.testing.assert_allclose(out.numpy(), expect, atol=1e-15)


def test_blend_shapes_match_dense_sum(model, rng):
    beta = rng.normal(0, 0.5, model.n_shape)
    theta = rng.normal(0, 0.2, (model.n_joints, 3))
    psi = rng.normal(0, 0.5, model.n_expr)
    offs = rng.normal(0, 0.01, (model.n_verts, 3))
    out = shaped_template(model, *(torch.as_tensor(a) for a in (beta, theta, psi, offs))).numpy()

    def rot(aa):
        ang = np.linalg.norm(aa)
        k = aa / ang
        K = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
        return np.eye(3) + np.sin(ang) * K + (1 - np.cos(ang)) * K @ K

    feat = np.concatenate([(rot(theta[j]) - np.eye(3)).ravel() for j in range(1, model.n_joints)])
    expect = model.template_vertices + offs
    for i in range(model.n_verts):
        for c in range(3):
            expect[i, c] += sum(model.shape_dirs[i, c, j] * beta[j] for j in range(model.n_shape))
            expect[i, c] += sum(model.pose_dirs[i, c, j] * feat[j] for j in range(len(feat)))
            expect[i, c] += sum(model.expr_dirs[i, c, j] * psi[j] for j in range(model.n_expr))
    np.testing.assert_allclose(out, expect, atol=1e-12)


def test_shape_linearity(model, rng):
    b1, b2 = torch.as_tensor(rng.normal(size=2)), torch.as_tensor(rng.normal(size=2))
    _, t, p, o = _zeros(model)
    T = torch.as_tensor(model.template_vertices)
    term = lambda b: shaped_template(model, b, t, p, o) - T  # noqa: E731
    np.testing.assert_allclose((term(2 * b1 - 3 * b2)).numpy(), (2 * term(b1) - 3 * term(b2)).numpy(), atol=1e-14)


def test_dimension_mismatch(model):
    b, t, p, o = _zeros(model)
    with pytest.raises(ValueError):
        shaped_template(model, torch.zeros(5, dtype=torch.float64), t, p, o)
    with pytest.raises(ValueError):
        vertex_transforms(model, b, torch.zeros(2, 3, dtype=torch.float64), p, o)


def test_joints_dense_product(model, rng):
    beta = torch.as_tensor(rng.normal(size=model.n_shape))
    J = joints(model, beta).numpy()
    shaped = model.template_vertices + np.einsum("vcs,s->vc", model.shape_dirs, beta.numpy())
    np.testing.assert_allclose(J, model.joint_regressor @ shaped, atol=1e-14)
    np.testing.assert_allclose(joints(model, torch.zeros(2, dtype=torch.float64)).numpy(),
                               model.joint_regressor @ model.template_vertices, atol=1e-15)


def test_one_hot_regressor_picks_vertex():
    m = one_joint_model()
    m.joint_regressor[0, 2] = 1.0
    beta = torch.tensor([0.7], dtype=torch.float64)
    m.shape_dirs[:, :, 0] = 0.1
    J = joints(m, beta)
    np.testing.assert_allclose(J[0].numpy(), m.template_vertices[2] + 0.07, atol=1e-15)


def test_quarter_turn_about_z():
    m = one_joint_model()
    av = AvatarParams.zeros(m, torch.float64)
    theta = torch.tensor([[0.0, 0.0, np.pi / 2]], dtype=torch.float64)
    posed = pose_mesh(m, av, FrameParams(theta, torch.zeros(1, dtype=torch.float64), make_frame(m).camera))
    np.testing.assert_allclose(posed.vertices[0].numpy(), [0.0, 1.0, 0.0], atol=1e-15)


def test_blend_is_average_of_joint_transforms():
    verts = np.array([[1.0, 0, 0], [0, 1.0, 0], [0, 0, 1.0]])
    m = ParametricModel(
        template_vertices=verts, faces=[[0, 1, 2]], shape_dirs=np.zeros((3, 3, 1)), pose_dirs=np.zeros((3, 3, 9)),
        expr_dirs=np.zeros((3, 3, 1)), skin_weights=np.full((2, 3), 0.5), joint_regressor=np.eye(2, 3),
        parents=[-1, 0], region_labels=np.zeros(3, dtype=int), canonical_pose=np.zeros((2, 3)))
    b = torch.zeros(1, dtype=torch.float64)
    th = torch.tensor([[0.0, 0.0, 0.3], [0.2, -0.1, 0.0]], dtype=torch.float64)
    M = vertex_transforms(m, b, th, b, torch.zeros(3, 3, dtype=torch.float64))
    from hybrid_avatar.geometry import joint_transforms
    G = joint_transforms(m, th, joints(m, b))
    np.testing.assert_allclose(M[0].numpy(), (0.5 * (G[0] + G[1])).numpy(), atol=1e-15)


def test_rigid_root_rotation_is_isometry(model, rng):
    theta = torch.zeros(model.n_joints, 3, dtype=torch.float64)
    theta[0] = torch.as_tensor(rng.normal(0, 1.0, 3))
    v = pose_mesh(model, zero_avatar(model), make_frame(model, theta=theta)).vertices.numpy()
    t = model.template_vertices
    idx = rng.choice(len(t), 200, replace=False)
    d0 = np.linalg.norm(t[idx, None] - t[None, idx], axis=-1)
    d1 = np.linalg.norm(v[idx, None] - v[None, idx], axis=-1)
    assert np.abs(d0 - d1).max() < 1e-6


def test_global_transform_commutes(model, rng):
    """A root rotation applied on top of a pose rigidly moves every vertex."""
    theta = torch.as_tensor(rng.normal(0, 0.3, (model.n_joints, 3)))
    R_aa = torch.as_tensor(rng.normal(0, 0.8, 3))
    theta2 = theta.clone()
    R = rodrigues(R_aa)
    R0 = rodrigues(theta[0])
    # compose the root rotation: R @ R0
    from scipy.spatial.transform import Rotation
    theta2[0] = torch.as_tensor(Rotation.from_matrix((R @ R0).numpy()).as_rotvec())
    av = zero_avatar(model)
    v1 = pose_mesh(model, av, make_frame(model, theta=theta)).vertices
    v2 = pose_mesh(model, av, make_frame(model, theta=theta2)).vertices
    # the root joint sits at J_0, so the rotation pivots there
    J0 = joints(model, av.beta)[0]
    np.testing.assert_allclose(((v1 - J0) @ R.T + J0).numpy(), v2.numpy(), atol=1e-9)


def test_pose_mesh_matches_transforms(model, rng):
    av = zero_avatar(model)
    av.beta = torch.as_tensor(rng.normal(size=2))
    av.offsets = torch.as_tensor(rng.normal(0, 0.01, (model.n_verts, 3)))
    fr = make_frame(model, theta=rng.normal(0, 0.4, (model.n_joints, 3)), psi=[0.5])
    posed = pose_mesh(model, av, fr)
    M = vertex_transforms(model, av.beta, fr.theta, fr.psi, av.offsets)
    t = np.concatenate([model.template_vertices, np.ones((model.n_verts, 1))], 1)
    expect = np.einsum("vab,vb->va", M.numpy(), t)[:, :3]
    np.testing.assert_allclose(posed.vertices.numpy(), expect, atol=1e-14)
    eye = posed.transforms @ posed.inverse_transforms
    np.testing.assert_allclose(eye.numpy(), np.broadcast_to(np.eye(4), eye.shape), atol=1e-12)


def test_singular_transform_raises():
    M = torch.eye(4, dtype=torch.float64).repeat(2, 1, 1)
    M[1, 2, 2] = 0.0
    with pytest.raises(NumericalDegeneracyError):
        invert_transforms(M)


def test_rodrigues_small_angle():
    aa = torch.tensor([1e-10, -2e-10, 0.0], dtype=torch.float64, requires_grad=True)
    R = rodrigues(aa)
    assert torch.isfinite(R).all()
    R.sum().backward()
    assert torch.isfinite(aa.grad).all()
    np.testing.assert_allclose(rodrigues(torch.zeros(3, dtype=torch.float64)).numpy(), np.eye(3))


def test_pose_mesh_gradients(model, rng):
    """Central differences on a sample of coordinates of every input group."""
    av = zero_avatar(model)
    beta = torch.as_tensor(rng.normal(size=2), dtype=torch.float64).requires_grad_()
    theta = torch.as_tensor(rng.normal(0, 0.3, (4, 3))).requires_grad_()
    psi = torch.as_tensor([0.3], dtype=torch.float64).requires_grad_()
    offs = torch.as_tensor(rng.normal(0, 0.01, (model.n_verts, 3))).requires_grad_()
    up = torch.as_tensor(rng.normal(size=(model.n_verts, 3)))

    def f():
        a = AvatarParams(beta, offs, av.albedo)
        return (pose_mesh(model, a, make_frame(model, theta=theta, psi=psi)).vertices * up).sum()

    grads = torch.autograd.grad(f(), [beta, theta, psi, offs])
    h = 1e-4
    for t, g in zip((beta, theta, psi, offs), grads):
        flat = t.data.view(-1)
        idx = rng.choice(flat.numel(), min(5, flat.numel()), replace=False)
        a, n = [], []
        for i in idx:
            orig = float(flat[i])
            flat[i] = orig + h
            fp = float(f().detach())
            flat[i] = orig - h
            fm = float(f().detach())
            flat[i] = orig
            a.append(float(g.reshape(-1)[i]))
            n.append((fp - fm) / (2 * h))
        a, n = np.array(a), np.array(n)
        assert np.linalg.norm(a - n) <= 1e-3 * max(np.linalg.norm(a), np.linalg.norm(n), 1e-9)


def test_canonical_pose_is_a_pose(model):
    v = canonical_vertices(model).numpy()
    arms = model.skin_weights[2] > 0.99
    # arms hang below the shoulder line in the canonical pose
    assert v[arms, 1].mean() < model.template_vertices[arms, 1].mean() - 0.05


def test_capsule_model_is_valid():
    m = capsule_model()
    m.validate()
    assert m.n_joints >= 1
