import numpy as np
import pytest
import torch

from facefit.fitter import (DEFAULT_LR_SCALE, FitConfig, FitError, FrameObservation, Problem,
                            TrackingParams, _param_tensors, finetune_model, fit, fit_joint,
                            reconstruct, retarget, track)
from facefit.model import (ModelCorrections, coeffs_from_logits, corrected_blendshapes,
                           identity_offset, rotation_angle_between)
from facefit.shading import Camera
from facefit.toy import random_corrections, synth_scene

CAM = Camera().resized(112, 112)
UNIT_LR = {k: 1.0 for k in DEFAULT_LR_SCALE}


@pytest.fixture(scope="module")
def scene(toy, toy_masks):
    frames, gt = synth_scene(toy, toy_masks, seed=3, n_frames=2, cam=CAM, quantize=False)
    return frames, gt


def cfg(**kw):
    kw.setdefault("warmup_steps", 0)
    return FitConfig(**kw)


def max_move(a, b):
    return max(np.abs(getattr(a, k) - getattr(b, k)).max()
               for k in ("logits", "euler", "translation", "gamma"))


def test_config_validation():
    with pytest.raises(ValueError):
        FitConfig(stage1_steps=-1)
    with pytest.raises(ValueError):
        FitConfig(lr1=0)
    with pytest.raises(ValueError):
        FitConfig(lr_decay=0)
    c = FitConfig(lr_scale={"logits": 3.0})
    assert c.lr_scale["logits"] == 3.0 and c.lr_scale["euler"] == DEFAULT_LR_SCALE["euler"]


def test_params_json_round_trip(scene):
    p = scene[1][0]
    q = TrackingParams.from_json(p.to_json())
    assert all(np.array_equal(getattr(p, k), getattr(q, k))
               for k in ("logits", "euler", "translation", "gamma"))
    with pytest.raises(ValueError):
        TrackingParams.from_json('{"logits": [0]}')


def test_fixed_point_at_ground_truth(toy, toy_masks, scene):
    frames, gt = scene
    res = fit_joint(frames, toy, toy_masks, cfg(stage1_steps=8, lr_scale=UNIT_LR), CAM, init=gt)
    assert len(res.trace) == 8
    for p, g in zip(res.params, gt):
        assert max_move(p, g) < 1e-3
    assert max(float(t.abs().max()) for t in res.corrections.tensors()[:4]) < 1e-3
    # the parse term has a kink at the truth, so any step raises it slightly
    assert res.trace[-1].total == pytest.approx(res.trace[0].total, rel=2e-2)


def test_ground_truth_is_stable_under_default_rates(toy, toy_masks, scene):
    frames, gt = scene
    res = fit_joint(frames, toy, toy_masks, cfg(stage1_steps=30), CAM, init=gt)
    # early Adam steps move each euler angle by up to its full rate (~0.11 deg)
    for p, g in zip(res.params, gt):
        assert np.rad2deg(rotation_angle_between(p.euler, g.euler)) < 0.5
        assert np.abs(p.translation - g.translation).max() < 2.0
        assert np.abs(p.w - g.w).mean() < 0.01


def test_fit_is_deterministic(toy, toy_masks, scene):
    frames, _ = scene
    c = cfg(stage1_steps=4, warmup_steps=5, seed=11)
    a = fit_joint(frames, toy, toy_masks, c, CAM)
    b = fit_joint(frames, toy, toy_masks, c, CAM)
    assert [t.to_dict() for t in a.trace] == [t.to_dict() for t in b.trace]
    for p, q in zip(a.params, b.params):
        assert max_move(p, q) == 0.0
    assert all(torch.equal(x, y) for x, y in zip(a.corrections.tensors(), b.corrections.tensors()))


def test_finetune_freezes_tracking(toy, toy_masks, scene):
    frames, gt = scene
    c = cfg(stage1_steps=2, stage2_steps=3)
    s1 = fit_joint(frames, toy, toy_masks, c, CAM, init=gt)
    s2 = finetune_model(frames, toy, toy_masks, s1, c, CAM)
    for p, q in zip(s1.params, s2.params):
        assert max_move(p, q) == 0.0
    assert len(s2.trace) == 5
    assert all("reg" not in t.terms for t in s2.trace[2:])
    assert not all(torch.equal(x, y) for x, y in zip(s1.corrections.tensors(),
                                                     s2.corrections.tensors()))


def test_finetune_zero_steps_is_identity(toy, toy_masks, scene):
    frames, gt = scene
    s1 = fit_joint(frames, toy, toy_masks, cfg(stage1_steps=2), CAM, init=gt)
    s2 = finetune_model(frames, toy, toy_masks, s1, cfg(stage2_steps=0), CAM)
    assert all(torch.equal(x, y) for x, y in zip(s1.corrections.tensors(),
                                                 s2.corrections.tensors()))
    assert s2.trace == s1.trace


def test_fit_needs_two_frames(toy, toy_masks, scene):
    with pytest.raises(FitError, match="at least 2 frames"):
        fit(scene[0][:1], toy, toy_masks, cfg(stage1_steps=1), CAM)
    with pytest.raises(FitError):
        fit_joint([], toy, toy_masks, cfg(), CAM)
    with pytest.raises(FitError):
        fit_joint(scene[0], toy, toy_masks, cfg(), CAM, init=scene[1][:1])


def test_mask_starvation_is_reported(toy, toy_masks, scene):
    frames, gt = scene
    off = [TrackingParams(g.logits, g.euler, g.translation + [5000.0, 0, 0], g.gamma) for g in gt]
    with pytest.raises(FitError, match="does not overlap"):
        fit_joint(frames, toy, toy_masks, cfg(stage1_steps=1), CAM, init=off)


def test_frame_size_mismatch(toy, toy_masks, scene):
    with pytest.raises(FitError, match="frame 0"):
        fit_joint(scene[0], toy, toy_masks, cfg(stage1_steps=1), Camera(), init=scene[1])


def test_shared_corrections_gradient_is_sum_over_frames(toy, toy_masks, scene, rng):
    frames, gt = scene
    corr = ModelCorrections.zeros(toy, toy_masks.resolution)
    corr.d_shape = torch.as_tensor(rng.normal(0, 0.5, corr.d_shape.shape))
    corr.d_albedo_0 = torch.as_tensor(rng.normal(0, 0.01, corr.d_albedo_0.shape))

    def grads(idx):
        c = corr.clone()
        for t in c.tensors():
            t.requires_grad_(True)
        prob = Problem([frames[i] for i in idx], toy, toy_masks, CAM, FitConfig().weights)
        b = prob.objective(c, [_param_tensors(gt[i], False) for i in idx], stage2=True,
                           model_terms=False)
        return torch.autograd.grad(b.total, c.tensors(), allow_unused=True)

    both, first, second = grads([0, 1]), grads([0]), grads([1])
    for g, a, b in zip(both, first, second):
        if g is None:
            continue
        np.testing.assert_allclose(g.numpy(), (a + b).numpy(), rtol=1e-9, atol=1e-12)


def test_track_fixed_point(toy, toy_masks, scene):
    frames, gt = scene
    c = cfg(track_steps=9, lr1=1e-5, lr_scale=UNIT_LR)
    params, traces = track(frames[:1], toy, toy_masks, None, c, CAM, init=gt[:1])
    assert max_move(params[0], gt[0]) < 1e-4
    assert len(traces[0]) == 9 and "sd" not in traces[0][0].terms


def test_track_frames_are_independent(toy, toy_masks, scene):
    frames, gt = scene
    c = cfg(track_steps=5)
    init = [TrackingParams(g.logits + 0.5, g.euler + 0.02, g.translation + 1.0, g.gamma)
            for g in gt]
    joint, _ = track(frames, toy, toy_masks, None, c, CAM, init=init)
    for i in range(2):
        alone, _ = track(frames[i:i + 1], toy, toy_masks, None, c, CAM, init=init[i:i + 1])
        assert max_move(joint[i], alone[0]) == 0.0


def test_track_recovers_perturbed_pose(toy, toy_masks):
    frames, gt = synth_scene(toy, toy_masks, seed=21, n_frames=1)
    rng = np.random.default_rng(5)
    g = gt[0]
    start = TrackingParams(g.logits + rng.uniform(-1, 1, len(g.logits)),
                           g.euler + np.deg2rad(rng.uniform(-5, 5, 3)),
                           g.translation + rng.uniform(-5, 5, 3), g.gamma)
    params, _ = track(frames, toy, toy_masks, None, FitConfig(track_steps=300), Camera(),
                      init=[start])
    p = params[0]
    assert np.rad2deg(rotation_angle_between(p.euler, g.euler)) < 2.0
    assert np.abs(p.translation - g.translation).max() < 2.0


# -- retargeting ---------------------------------------------------------------

def test_retarget_identity(toy, toy_masks, scene):
    _, gt = scene
    corr = random_corrections(toy, toy_masks, seed=2)
    shapes, images = retarget(gt, toy, corr, toy_masks, CAM, transfer_pose=True,
                              transfer_lighting=True)
    for p, s, img in zip(gt, shapes, images):
        r = reconstruct(toy, corr, toy_masks, p, CAM)
        assert np.abs(s - r["shape"]).max() < 1e-6
        assert np.array_equal(img, r["image"])


def test_retarget_zero_expression_is_neutral(toy, toy_masks):
    corr = random_corrections(toy, toy_masks, seed=4)
    corr.d_shape_0 = corr.d_shape_0 + 0.5
    k = toy.n_blendshapes
    neutral = TrackingParams(np.full(k, -40.0), np.zeros(3), np.array([0, 0, 600.0]),
                             np.zeros(27))
    shapes, _ = retarget([neutral] * 2, toy, corr, toy_masks, CAM)
    expect = toy.s0.vertices + identity_offset(toy, corr).numpy()
    for s in shapes:
        assert np.abs(s - expect).max() < 1e-6


def test_retarget_pulse_follows_corrected_blendshape(toy, toy_masks):
    corr = random_corrections(toy, toy_masks, seed=4)
    k = toy.n_blendshapes
    j = 5
    seq = []
    for logit in (-40.0, 0.0, 40.0):
        lg = np.full(k, -40.0)
        lg[j] = logit
        seq.append(TrackingParams(lg, np.zeros(3), np.array([0, 0, 600.0]), np.zeros(27)))
    shapes, _ = retarget(seq, toy, corr, toy_masks, CAM)
    delta = (corrected_blendshapes(toy, corr, toy_masks)[j].numpy() - toy.s0.vertices)
    np.testing.assert_allclose(shapes[2] - shapes[0], delta, atol=1e-6)
    np.testing.assert_allclose(shapes[1] - shapes[0], 0.5 * delta, atol=1e-6)


def test_retarget_count_mismatch(toy, toy_masks, scene):
    bad = [TrackingParams(np.zeros(3), np.zeros(3), np.array([0, 0, 600.0]), np.zeros(27))]
    with pytest.raises(FitError, match="coefficients"):
        retarget(bad, toy, None, toy_masks, CAM)


def test_frame_observation_validation():
    with pytest.raises(ValueError):
        FrameObservation(np.zeros((4, 4, 3)), np.zeros((68, 3)), np.zeros((5, 4), int))
