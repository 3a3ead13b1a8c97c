import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from facefit.estimator import PersonalizedFaceFitter, check_frames, check_template
from facefit.fitter import FrameObservation
from facefit.shading import Camera
from facefit.toy import make_toy_head, synth_scene
from facefit.model import compute_attention_masks

CAM = Camera().resized(96, 96)


@pytest.fixture(scope="module")
def small():
    t = make_toy_head(n_grid=12, n_blendshapes=4)
    frames, gt = synth_scene(t, compute_attention_masks(t), seed=2, n_frames=2, n_active=2,
                             cam=CAM)
    return t, frames, gt


def test_params_and_clone(small):
    est = PersonalizedFaceFitter(template=small[0], camera=CAM, stage1_steps=3)
    p = est.get_params()
    assert p["stage1_steps"] == 3 and p["lr1"] == 1e-4 and p["lr2"] == 1e-5
    c = clone(est)
    assert c.get_params()["stage1_steps"] == 3
    assert np.array_equal(c.template.s0.vertices, est.template.s0.vertices)
    est.set_params(stage2_steps=0)
    assert est.stage2_steps == 0


def test_not_fitted(small):
    est = PersonalizedFaceFitter(template=small[0], camera=CAM)
    with pytest.raises(NotFittedError):
        est.transform(small[1])


def test_fit_transform_predict_score(small):
    t, frames, _ = small
    est = PersonalizedFaceFitter(template=t, camera=CAM, stage1_steps=3, stage2_steps=2,
                                 track_steps=2, warmup_steps=3)
    params = est.fit_transform(frames)
    assert len(params) == 2 and est.n_frames_ == 2 and len(est.trace_) == 5
    tracked = est.transform(frames[:1])
    assert len(tracked) == 1
    imgs = est.predict(frames)
    assert imgs[0].shape == (96, 96, 3)
    assert est.score(frames) <= 0


def test_check_frames_errors(small):
    _, frames, _ = small
    f = frames[0]
    assert len(check_frames(f)) == 1
    assert isinstance(check_frames([(f.image, f.landmarks, f.parse)])[0], FrameObservation)
    with pytest.raises(ValueError, match="at least 2"):
        check_frames([f], min_frames=2)
    with pytest.raises(ValueError, match="frame 0"):
        check_frames([(f.image * 2, f.landmarks, f.parse)])
    nan = f.image.copy()
    nan[0, 0, 0] = np.nan
    with pytest.raises(ValueError, match="NaN"):
        check_frames([(nan, f.landmarks, f.parse)])
    with pytest.raises(ValueError, match="camera"):
        check_frames([f], camera=Camera())
    with pytest.raises(ValueError, match="landmarks"):
        check_frames([f], n_landmarks=10)
    with pytest.raises(ValueError):
        check_frames(5)
    with pytest.raises(ValueError):
        check_template("not a template")
