import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.spatial.transform import Rotation

from clutterseg.fixtures import plant_displacement
from clutterseg.scene_update import (DISPLACED, STATIC, UNMATCHED, AlignmentProblem, ChangeReport, InstanceChange,
                               RigidTransform, SceneState, StageWeights, UpdateParams, analyze_post_frame,
                               apply_update, chamfer_loss, detect_displaced, fd_gradient, match_post_masks,
                               optimize_transform, photometric_loss, reg_z_loss, rotation_error_deg, total_loss)

from conftest import instance_of_object
from oracles import chamfer_brute


# ---------------------------------------------------------------- losses

def test_chamfer_examples():
    P = np.array([[3.0, 4.0], [10.0, 2.0]])
    assert chamfer_loss(P, P) == pytest.approx(0.0, abs=1e-9)
    assert chamfer_loss([[0.0, 0.0]], [[3.0, 4.0]]) == pytest.approx(10.0, abs=1e-6)
    with pytest.raises(ValueError, match="degenerate contour"):
        chamfer_loss(np.zeros((0, 2)), P)


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 10_000))
def test_chamfer_against_brute_force(seed):
    rng = np.random.default_rng(seed)
    C = rng.integers(0, 40, size=(rng.integers(1, 21), 2)).astype(float)
    P = rng.uniform(0, 40, size=(rng.integers(1, 21), 2))
    # the C -> P term is exact; the P -> C term is a bilinear distance-field sample
    assert abs(chamfer_loss(P, C) - chamfer_brute(P, C)) <= 0.5


def test_chamfer_integer_points_exact():
    rng = np.random.default_rng(5)
    for _ in range(50):
        C = rng.integers(0, 30, size=(rng.integers(1, 21), 2)).astype(float)
        P = rng.integers(0, 30, size=(rng.integers(1, 21), 2)).astype(float)
        assert abs(chamfer_loss(P, C) - chamfer_brute(P, C)) < 0.05


def test_total_loss_examples():
    assert total_loss((1.0, 2.0, 3.0), StageWeights(50.0, 0.5, 10.0)) == pytest.approx(81.0)
    assert total_loss((1.0, 2.0, 3.0), StageWeights(10.0, 2.0, 1.0)) == pytest.approx(17.0)
    assert total_loss((0.0, 0.0, 0.0), StageWeights(10.0, 2.0, 1.0)) == 0.0
    with pytest.raises(ValueError):
        StageWeights(-1.0, 0.0, 0.0)


def test_reg_z_examples():
    assert reg_z_loss([0.1, -0.2, 0.0]) == 0.0
    assert reg_z_loss([0.0, 0.0, 0.05]) == pytest.approx(0.0025)
    assert reg_z_loss([0.0, 0.0, 0.005], unit=0.001) == pytest.approx(25.0)
    assert reg_z_loss([0, 0, 0.03]) == reg_z_loss([0, 0, -0.03])
    # per-point displacements of a pure lift reduce to the translation form
    assert reg_z_loss([0, 0, 0.02], dz=np.full(7, 0.02)) == pytest.approx(reg_z_loss([0, 0, 0.02]))


def test_photometric_examples():
    img = np.ones((10, 10, 3))
    mask = np.zeros((10, 10), bool)
    mask[2:8, 2:8] = True
    uv = np.array([[3.0, 3.0], [5.0, 6.0]])
    assert photometric_loss(np.ones((2, 3)), uv, img, mask) == (0.0, 2)
    assert photometric_loss(np.full((2, 3), 0.5), uv, img, mask)[0] == pytest.approx(1.5)
    assert photometric_loss(np.full((1, 3), 0.5), [[0.0, 0.0]], img, mask) == (0.0, 0)
    assert photometric_loss(np.full((2, 3), 0.5), uv, img, mask, support=np.array([False, False])) == (0.0, 0)


# ---------------------------------------------------------------- transforms

@settings(max_examples=300, deadline=None)
@given(st.lists(st.floats(-1.5, 1.5), min_size=3, max_size=3), st.lists(st.floats(-1, 1), min_size=3, max_size=3))
def test_transform_round_trip(rv, t):
    T = RigidTransform(tuple(rv), tuple(t))
    T2 = RigidTransform.from_matrix(T.matrix, T.t)
    assert np.allclose(T2.as_matrix4(), T.as_matrix4(), atol=1e-6)
    X = np.random.default_rng(0).standard_normal((5, 3))
    assert np.allclose(T.inverse().apply(T.apply(X)), X, atol=1e-9)
    assert np.allclose(T.compose(T.inverse()).as_matrix4(), np.eye(4), atol=1e-9)


def test_compose_order_and_about():
    A = RigidTransform((0.0, 0.0, math.pi / 2), (0.0, 0.0, 0.0))
    B = RigidTransform((0.0, 0.0, 0.0), (1.0, 0.0, 0.0))
    x = np.array([[1.0, 0.0, 0.0]])
    assert np.allclose(A.compose(B).apply(x), A.apply(B.apply(x)))
    assert np.allclose(A.compose(B).apply(x), [[0.0, 2.0, 0.0]])
    c = np.array([0.3, 0.1, 0.0])
    T = RigidTransform.about((0, 0, math.pi), (0.0, 0.0, 0.0), c)
    assert np.allclose(T.apply(c[None]), c[None])
    assert rotation_error_deg(Rotation.from_euler("z", 3, degrees=True).as_matrix(), np.eye(3)) == pytest.approx(3.0)


# ---------------------------------------------------------------- state on a fixture

@pytest.fixture(scope="module")
def state(small_result):
    return SceneState.from_segmentation(small_result)


@pytest.fixture(scope="module")
def moved(small_scene, small_result):
    """A planted +8 cm / -5 cm move of one object seen from view 0."""
    bundle, gt = small_scene
    mapping = instance_of_object(small_result, bundle, gt)
    for obj in range(len(gt.objects)):
        for view in range(len(bundle.frames)):
            try:
                post, pgt = plant_displacement(gt, obj, 0.08, -0.05, 0.0, view=view)
            except ValueError:
                continue
            return obj, mapping[obj], post, pgt
    pytest.fail("no collision-free placement")


def _post_mask(post, pgt, obj):
    mids = [m for m, r in pgt.mask_info[0].items() if r["kind"] == "object" and r["objects"] == [obj]]
    return np.asarray(post.masks[mids[0]], bool)


def test_replay_frame_all_static(small_scene, state):
    bundle, _ = small_scene
    for frame in bundle.frames[:2]:
        report = analyze_post_frame(state, frame)
        assert report.by_status(STATIC) == sorted(state.instances)
        out = apply_update(state, report)
        assert np.array_equal(out.positions, state.positions)
        assert np.array_equal(out.supervoxels, state.supervoxels)


def test_match_replay_own_masks(small_scene, small_result, state):
    bundle, gt = small_scene
    mapping = instance_of_object(small_result, bundle, gt)
    frame, info = bundle.frames[0], gt.mask_info[0]
    matched = match_post_masks(frame, state)
    for obj, iid in mapping.items():
        rec = info.get(matched.get(iid))
        if rec is not None:
            assert obj in rec["objects"]
    assert len(set(matched.values())) == len(matched)


def test_removed_object_unmatched(small_scene, small_result, state):
    bundle, gt = small_scene
    mapping = instance_of_object(small_result, bundle, gt)
    post, _ = plant_displacement(gt, 0, remove=True, view=0)
    report = analyze_post_frame(state, post)
    assert mapping[0] in report.by_status(UNMATCHED)
    for iid in mapping.values():
        if iid != mapping[0]:
            assert iid not in report.displaced


def test_detect_displaced_monotone_in_tau(state, moved):
    obj, iid, post, pgt = moved
    pts = state.instance_points(iid)
    mask = _post_mask(post, pgt, obj)
    _, iou = detect_displaced(pts, mask, post)
    flags = [detect_displaced(pts, mask, post, tau)[0] == DISPLACED for tau in np.linspace(0.05, 0.95, 19)]
    assert flags == sorted(flags)
    assert detect_displaced(pts, None, post) == (UNMATCHED, 0.0)
    assert iou < 0.75


def test_descent_direction(state, moved):
    obj, iid, post, pgt = moved
    pts = state.instances[iid].points
    prob = AlignmentProblem(state.positions[pts], state.colors[pts], state.normals[pts], post,
                            _post_mask(post, pgt, obj), z_unit=0.001)
    w = UpdateParams().coarse
    rng = np.random.default_rng(0)
    good = 0
    for _ in range(20):
        theta = np.concatenate([rng.normal(0, 0.01, 3), rng.normal(0, 0.03, 3)])
        sel = prob.contour_selection(theta)
        f = lambda th: prob.loss(th, w, sel)  # noqa: E731
        g = fd_gradient(f, theta)
        step = 1e-3 * g / np.linalg.norm(g)
        good += f(theta - step) < f(theta)
    assert good == 20


def test_pure_translation_recovered(state, moved):
    obj, iid, post, pgt = moved
    pts = state.instances[iid].points
    res = optimize_transform(state.positions[pts], state.colors[pts], state.normals[pts], post,
                             _post_mask(post, pgt, obj))
    assert res.status == "ok"
    assert res.loss <= res.init_loss
    R, t = np.array(pgt.transform["R"]), np.array(pgt.transform["t"])
    o = pgt.objects[obj]
    c = np.array([o.center[0], o.center[1], o.height / 2])
    assert np.linalg.norm(res.transform.apply(c[None])[0] - (R @ c + t)) < 0.010
    assert rotation_error_deg(res.transform.matrix, R) < 2.0


def _identity_runs(small_scene, small_result, state):
    bundle, gt = small_scene
    obj_of = {v: k for k, v in instance_of_object(small_result, bundle, gt).items()}
    runs = []
    for fi, frame in enumerate(bundle.frames):
        for iid in sorted(state.instances):
            obj = gt.objects[obj_of[iid]]
            mids = [m for m, r in gt.mask_info[fi].items() if r["kind"] == "object" and r["objects"] == [obj.id]]
            if not mids:
                continue
            pts = state.instances[iid].points
            res = optimize_transform(state.positions[pts], state.colors[pts], state.normals[pts], frame,
                                     frame.masks[mids[0]])
            c = np.array([obj.center[0], obj.center[1], obj.height / 2])
            runs.append((obj.shape, np.linalg.norm(res.transform.apply(c[None])[0] - c),
                         math.degrees(res.transform.angle)))
    return runs


@pytest.fixture(scope="module")
def identity_runs(small_scene, small_result, state):
    return _identity_runs(small_scene, small_result, state)


def test_identity_false_positive_translation(identity_runs):
    assert len(identity_runs) >= 8
    assert max(t for _, t, _ in identity_runs) < 0.005


@pytest.mark.xfail(strict=True, reason="5 mm voxel contours leave a 1-3 degree yaw floor on boxes")
def test_identity_false_positive_rotation(identity_runs):
    # rotation about the axis of a uniformly colored cylinder or sphere is unobservable
    assert max(r for shape, _, r in identity_runs if shape == "box") < 1.0


def test_degenerate_mask_fails(state, small_scene):
    bundle, _ = small_scene
    pts = next(iter(state.instances.values())).points
    res = optimize_transform(state.positions[pts], state.colors[pts], state.normals[pts], bundle.frames[0],
                             np.zeros(bundle.frames[0].depth.shape, bool))
    assert res.status == "optimization failed"
    assert res.transform == RigidTransform.identity()


def test_apply_update_isolation_and_composition(state, moved):
    obj, iid, post, _ = moved
    T1 = RigidTransform((0.0, 0.0, 0.2), (0.03, -0.01, 0.0))
    T2 = RigidTransform((0.0, 0.0, -0.1), (0.0, 0.02, 0.0))
    rep = lambda T: ChangeReport([InstanceChange(iid, DISPLACED, 0, 0.1, T)])  # noqa: E731
    once = apply_update(state, rep(T1))
    pts = state.instances[iid].points
    others = np.setdiff1d(np.arange(len(state.positions)), pts)
    assert np.array_equal(once.positions[others], state.positions[others])
    assert np.array_equal(once.supervoxels[others], state.supervoxels[others])
    assert np.allclose(once.positions[pts], T1.apply(state.positions[pts]))
    assert not set(once.supervoxels[pts]) & set(state.supervoxels[others])
    twice = apply_update(once, rep(T2))
    direct = apply_update(state, rep(T2.compose(T1)))
    assert np.allclose(twice.positions, direct.positions, atol=1e-12)
    assert np.array_equal(once.labels, state.labels)


def test_change_report_round_trip():
    rep = ChangeReport([InstanceChange(0, STATIC, 3, 0.9),
                        InstanceChange(1, DISPLACED, 4, 0.2, RigidTransform((0, 0, 0.1), (0.01, 0, 0)),
                                       1.5, 0.8, "ok", True),
                        InstanceChange(2, UNMATCHED)])
    back = ChangeReport.from_dict(rep.to_dict())
    assert back.to_dict() == rep.to_dict()
    assert back.displaced == [1]
    assert "status displaced" in rep.to_text()
    with pytest.raises(ValueError, match="requires a transform"):
        InstanceChange(5, DISPLACED)


def test_update_params_validation():
    with pytest.raises(ValueError):
        UpdateParams(tau_iou=1.0)
    with pytest.raises(ValueError):
        UpdateParams(coarse_step=0.0)
