import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.spatial.transform import Rotation

from facefit.mesh import MeshError, TriMesh, UVMap, uv_sample
from facefit.model import (ModelCorrections, TemplateFaceModel, apply_pose, assemble_albedo,
                           assemble_shape, coeffs_from_logits, compute_attention_masks,
                           corrected_blendshapes, euler_to_matrix, matrix_to_euler,
                           rotation_angle_between, texel_centers)

from conftest import tiny_rig


def random_corrections(template, rng, res=8):
    k = template.n_blendshapes
    return ModelCorrections(rng.normal(0, 1, (res, res, 3)), rng.normal(0, 1, (k, res, res, 3)),
                            rng.normal(0, .1, (res, res, 3)), rng.normal(0, .1, (k, res, res, 3)),
                            rng.uniform(0, 1, (res, res, 3)))


def bilinear(img, uv):
    """Independent per-point bilinear lookup (clamp to edge)."""
    h, w, _ = img.shape
    out = []
    for u, v in uv:
        x = np.clip(u * w - 0.5, 0, w - 1)
        y = np.clip(v * h - 0.5, 0, h - 1)
        x0, y0 = int(np.floor(x)), int(np.floor(y))
        x1, y1 = min(x0 + 1, w - 1), min(y0 + 1, h - 1)
        fx, fy = x - x0, y - y0
        out.append((1 - fx) * (1 - fy) * img[y0, x0] + fx * (1 - fy) * img[y0, x1]
                   + (1 - fx) * fy * img[y1, x0] + fx * fy * img[y1, x1])
    return np.array(out)


# -- masks -------------------------------------------------------------------

def rig_with_displacements(disp, resolution=16):
    """Grid rig whose single blendshape moves vertex j by disp[j] along z."""
    n = int(np.sqrt(len(disp)))
    c = (np.arange(n) * (resolution // n) + 0.5 + 1) / resolution  # on texel centers
    uu, vv = np.meshgrid(c, c)
    uv = np.stack([uu.ravel(), vv.ravel()], 1)
    verts = np.c_[uv * 100.0, np.zeros(len(uv))]
    tris = []
    for r in range(n - 1):
        for col in range(n - 1):
            i = r * n + col
            tris += [(i, i + 1, i + n), (i + 1, i + n + 1, i + n)]
    mesh = TriMesh(verts, np.array(tris), uv, np.arange(4))
    bs = verts.copy()
    bs[:, 2] += disp
    return TemplateFaceModel(mesh, bs[None], UVMap(np.full((resolution, resolution, 3), .5)),
                             np.zeros((resolution, resolution), int),
                             UVMap(np.ones((resolution, resolution))), 1,
                             {"resolution": resolution, "blur_sigma": 1.0, "threshold": 1e-3})


def texel_of(uv, res):
    return int(uv[1] * res - 0.5), int(uv[0] * res - 0.5)


def test_identical_blendshape_gives_zero_mask():
    t = rig_with_displacements(np.zeros(16))
    m = compute_attention_masks(t)
    assert np.all(m.masks == 0) and np.all(m.pre_blur == 0)


def test_max_vertex_is_one_and_subthreshold_is_zero():
    disp = np.zeros(16)
    disp[5] = 3.0       # the peak
    disp[10] = 0.0005   # below threshold
    disp[6] = 1.5
    t = rig_with_displacements(disp)
    m = compute_attention_masks(t)
    r, c = texel_of(t.uv[5], 16)
    assert m.pre_blur[0, r, c] == 1.0
    assert m.vertex_weights[0, 10] == 0.0
    r, c = texel_of(t.uv[10], 16)
    assert m.pre_blur[0, r, c] == 0.0
    assert m.vertex_weights[0, 6] == pytest.approx(0.5)
    assert m.masks.min() >= 0.0 and m.masks.max() <= 1.0


def test_mask_blur_and_determinism(toy):
    a = compute_attention_masks(toy)
    b = compute_attention_masks(toy)
    assert np.array_equal(a.masks, b.masks)
    assert a.masks.shape == (toy.n_blendshapes, 64, 64)
    c = compute_attention_masks(toy, blur_sigma=0.0)
    assert np.array_equal(c.masks, np.clip(c.pre_blur, 0, 1))
    with pytest.raises(ValueError):
        compute_attention_masks(toy, resolution=4)


# -- coefficients --------------------------------------------------------------

def test_logit_zero_is_half():
    assert coeffs_from_logits(torch.zeros(3)).w.numpy() == pytest.approx([0.5] * 3)


def test_saturated_logits():
    c = coeffs_from_logits(torch.full((56,), -20.0, dtype=torch.float64))
    assert float(c.w.max()) < 1e-8
    assert float(c.w0) == pytest.approx(1.0, abs=1e-6)
    assert abs(float(c.w0) - 1.0) <= 56 * 2.1e-9


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-30, 30), min_size=1, max_size=60))
def test_w0_identity(logits):
    c = coeffs_from_logits(np.array(logits))
    w = c.w.numpy()
    assert np.all((w >= 0) & (w <= 1))
    assert float(c.w0) == pytest.approx(1.0 - w.sum(), abs=1e-12)


# -- shape assembly ---------------------------------------------------------------

def test_neutral_shape_is_s0():
    t = tiny_rig()
    corr = ModelCorrections.zeros(t, 8)
    masks = compute_attention_masks(t)
    s = assemble_shape(t, corr, masks, np.zeros(4))
    assert np.array_equal(s.numpy(), t.s0.vertices)


def test_endpoint_shape_is_blendshape():
    t = tiny_rig()
    masks = compute_attention_masks(t)
    for k in range(4):
        w = np.eye(4)[k]
        s = assemble_shape(t, ModelCorrections.zeros(t, 8), masks, w)
        np.testing.assert_array_equal(s.numpy(), t.blendshapes[k])


def shape_oracle(t, corr, masks, w):
    w = np.asarray(w)
    s = (1 - w.sum()) * t.s0.vertices + bilinear(corr.d_shape_0.numpy(), t.uv)
    for i in range(t.n_blendshapes):
        masked = masks.masks[i][..., None] * corr.d_shape[i].numpy()
        s = s + w[i] * (t.blendshapes[i] + bilinear(masked, t.uv))
    return s


def albedo_oracle(t, corr, masks, w):
    r = corr.r0_trainable.numpy() + corr.d_albedo_0.numpy()
    for i in range(t.n_blendshapes):
        r = r + w[i] * masks.masks[i][..., None] * corr.d_albedo[i].numpy()
    return r


def test_shape_matches_oracle(rng):
    t = tiny_rig(seed=3)
    masks = compute_attention_masks(t)
    corr = random_corrections(t, rng)
    c = coeffs_from_logits(rng.normal(size=4))
    got = assemble_shape(t, corr, masks, c).numpy()
    np.testing.assert_allclose(got, shape_oracle(t, corr, masks, c.w.numpy()), atol=1e-6)


def test_batched_shape(rng):
    t = tiny_rig(seed=3)
    masks = compute_attention_masks(t)
    corr = random_corrections(t, rng)
    w = rng.uniform(0, 1, (3, 4))
    got = assemble_shape(t, corr, masks, w).numpy()
    for b in range(3):
        np.testing.assert_allclose(got[b], shape_oracle(t, corr, masks, w[b]), atol=1e-9)


def test_shape_dimension_mismatch(rng):
    t = tiny_rig()
    masks = compute_attention_masks(t)
    with pytest.raises(MeshError):
        assemble_shape(t, ModelCorrections.zeros(t, 8), masks, np.zeros(5))
    other = tiny_rig(n_blendshapes=3)
    with pytest.raises(MeshError):
        assemble_shape(t, ModelCorrections.zeros(other, 8), masks, np.zeros(4))


def test_masked_support_leaves_vertex_unmoved(rng):
    t = tiny_rig(seed=5)
    masks = compute_attention_masks(t)
    masks.masks[1][:] = 0.0  # mask 1 empty everywhere
    corr = ModelCorrections.zeros(t, 8)
    corr.d_shape = torch.as_tensor(rng.normal(0, 5, (4, 8, 8, 3)))
    base = corrected_blendshapes(t, ModelCorrections.zeros(t, 8), masks)
    moved = corrected_blendshapes(t, corr, masks)
    assert torch.equal(base[1], moved[1])
    masks.masks[1][:] = compute_attention_masks(t).masks[1]


def test_shape_jvp_matches_finite_differences(rng):
    t = tiny_rig(seed=2)
    masks = compute_attention_masks(t)
    corr = random_corrections(t, rng)
    logits = torch.as_tensor(rng.normal(size=4), dtype=torch.float64)
    direction = torch.as_tensor(rng.normal(size=(8, 8, 3)))

    def f(d0):
        c = ModelCorrections(d0, corr.d_shape, corr.d_albedo_0, corr.d_albedo, corr.r0_trainable)
        return assemble_shape(t, c, masks, coeffs_from_logits(logits))

    base = corr.d_shape_0.clone()
    _, jvp = torch.autograd.functional.jvp(f, base, direction)
    h = 1e-3
    fd = (f(base + h * direction) - f(base - h * direction)) / (2 * h)
    np.testing.assert_allclose(jvp.numpy(), fd.numpy(), rtol=1e-4, atol=1e-9)

    def g(lg):
        return assemble_shape(t, corr, masks, coeffs_from_logits(lg))

    v = torch.as_tensor(rng.normal(size=4))
    _, jvp = torch.autograd.functional.jvp(g, logits, v)
    fd = (g(logits + h * v) - g(logits - h * v)) / (2 * h)
    np.testing.assert_allclose(jvp.numpy(), fd.numpy(), rtol=1e-4, atol=1e-6)


# -- albedo ---------------------------------------------------------------------

def test_albedo_zero_corrections_is_r0():
    t = tiny_rig()
    masks = compute_attention_masks(t)
    r = assemble_albedo(t, ModelCorrections.zeros(t, 8), masks, np.full(4, 0.3))
    np.testing.assert_array_equal(r.numpy(), t.r0.data)


def test_albedo_constant_offset():
    t = tiny_rig()
    masks = compute_attention_masks(t)
    corr = ModelCorrections.zeros(t, 8)
    corr.d_albedo_0 = torch.full((8, 8, 3), 0.1, dtype=torch.float64)
    r = assemble_albedo(t, corr, masks, np.full(4, 0.7))
    np.testing.assert_allclose(r.numpy(), t.r0.data + 0.1, atol=1e-15)


def test_albedo_matches_oracle_unclamped(rng):
    t = tiny_rig(seed=4)
    masks = compute_attention_masks(t)
    corr = random_corrections(t, rng)
    corr.d_albedo_0 = corr.d_albedo_0 + 2.0  # push out of [0, 1]: stored unclamped
    w = rng.uniform(0, 1, 4)
    got = assemble_albedo(t, corr, masks, w).numpy()
    np.testing.assert_allclose(got, albedo_oracle(t, corr, masks, w), atol=1e-6)
    assert got.max() > 1.0


def test_albedo_is_affine(rng):
    t = tiny_rig(seed=4)
    masks = compute_attention_masks(t)
    a, b = random_corrections(t, rng), random_corrections(t, rng)
    w = rng.uniform(0, 1, 4)
    mix = ModelCorrections(*[0.3 * x + 0.7 * y for x, y in zip(a.tensors(), b.tensors())])
    lhs = assemble_albedo(t, mix, masks, w)
    rhs = 0.3 * assemble_albedo(t, a, masks, w) + 0.7 * assemble_albedo(t, b, masks, w)
    np.testing.assert_allclose(lhs.numpy(), rhs.numpy(), atol=1e-12)


# -- pose -----------------------------------------------------------------------

def test_zero_pose_is_identity(rng):
    v = rng.normal(size=(10, 3))
    np.testing.assert_array_equal(apply_pose(v, np.zeros(3), np.zeros(3)).numpy(), v)


def test_half_turn_yaw():
    out = apply_pose(np.array([[1.0, 0, 0]]), np.array([0, np.pi, 0]), np.zeros(3)).numpy()
    np.testing.assert_allclose(out, [[-1, 0, 0]], atol=1e-9)


def test_pose_matches_rotation_oracle(rng):
    e = rng.uniform(-np.pi, np.pi, 3)
    t = rng.normal(size=3)
    v = rng.normal(size=(20, 3))
    rot = Rotation.from_euler("ZYX", e[::-1]).as_matrix()  # intrinsic z-y-x == Rz Ry Rx
    np.testing.assert_allclose(apply_pose(v, e, t).numpy(), v @ rot.T + t, atol=1e-9)
    np.testing.assert_allclose(euler_to_matrix(e).numpy(), rot, atol=1e-12)


def test_euler_round_trip_and_angle(rng):
    e = rng.uniform(-1, 1, 3)
    np.testing.assert_allclose(matrix_to_euler(euler_to_matrix(e).numpy()), e, atol=1e-12)
    e2 = e.copy()
    rot = euler_to_matrix(e).numpy() @ Rotation.from_rotvec([0, 0, 0.1]).as_matrix()
    e2 = matrix_to_euler(rot)
    assert rotation_angle_between(e, e2) == pytest.approx(0.1, abs=1e-9)


def test_corrections_validation(toy):
    with pytest.raises(MeshError):
        ModelCorrections(np.zeros((4, 4, 3)), np.zeros((2, 5, 5, 3)), np.zeros((4, 4, 3)),
                         np.zeros((2, 4, 4, 3)), np.zeros((4, 4, 3)))
    z = ModelCorrections.zeros(toy, 32)
    assert z.resolution == 32 and z.n_blendshapes == toy.n_blendshapes
    c = z.clone()
    c.d_shape_0 += 1
    assert float(z.d_shape_0.abs().max()) == 0.0


def test_template_validation(toy):
    with pytest.raises(MeshError):
        TemplateFaceModel(toy.s0, toy.blendshapes[:, :10], toy.r0, toy.parse_labels,
                          toy.validity, toy.n_classes)
    with pytest.raises(MeshError):
        TemplateFaceModel(toy.s0, toy.blendshapes, UVMap(toy.r0.data * 2), toy.parse_labels,
                          toy.validity, toy.n_classes)
    with pytest.raises(MeshError):
        TemplateFaceModel(toy.s0, toy.blendshapes, toy.r0, toy.parse_labels + 10,
                          toy.validity, toy.n_classes)


def test_r0_resample(toy):
    assert toy.r0_at(64).shape == (64, 64, 3)
    half = toy.r0_at(32)
    np.testing.assert_allclose(half, uv_sample(toy.r0.data, texel_centers(32)).numpy()
                               .reshape(32, 32, 3))
