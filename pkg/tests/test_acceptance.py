"""Acceptance criteria A1-A11 on deterministic synthetic fixtures.

Each test appends one PASS/FAIL line to the acceptance summary before it
asserts, so the summary is complete even when a criterion fails.
"""

import math
import time
from types import SimpleNamespace

import numpy as np
import pytest

from clutterseg.config import PipelineConfig, load_config
from clutterseg.evaluation import (GroundTruthInstance, Prediction, ground_truth_from_bundle, instance_ap,
                                   predictions_from_instances, semantic_iou, voxelize)
from clutterseg.fixtures import FixtureSpec, generate_scene, plant_displacement
from clutterseg.geometry import pair_distance
from clutterseg.cross_view_grouping import construct_leaf_graph, group_by_similarity, semantic_similarity, spatial_similarity
from clutterseg.pipeline import segment_scene, substitution_histogram
from clutterseg.semantics import identify_target
from clutterseg.scene_update import (DISPLACED, SceneState, StageWeights, analyze_post_frame, chamfer_loss,
                               rotation_error_deg, total_loss)

from conftest import ACCEPTANCE, gt_record, instance_of_object
from oracles import ap_oracle, exhaustive_grouping, occupancy_dicts, weighted_jaccard

SEEDS = range(10)
CFG = PipelineConfig()


def record(name, ok, detail):
    line = f"{name} {'PASS' if ok else 'FAIL'}: {detail}"
    ACCEPTANCE.append(line)
    print(line)
    return ok


def _timed_segment(bundle, **kw):
    t0 = time.perf_counter()
    res = segment_scene(bundle, CFG, threads=1, **kw)
    return res, time.perf_counter() - t0


def _ap(res, gts):
    return instance_ap(predictions_from_instances(res.instances, res.cloud.positions, CFG.eval_voxel_m), gts)


# ---------------------------------------------------------------- shared sweeps

@pytest.fixture(scope="module")
def clean_runs():
    out = []
    for seed in SEEDS:
        bundle, gt = generate_scene(FixtureSpec(seed=seed, n_objects=10, n_views=8, sigma=0.02))
        gts = ground_truth_from_bundle(bundle, gt_record(gt), CFG)
        res, dt = _timed_segment(bundle)
        out.append(dict(seed=seed, n=len(res.instances), ap=_ap(res, gts), seconds=dt, stats=res.stats))
    return out


@pytest.fixture(scope="module")
def noisy_runs():
    """Noisy fixtures at 4/6/8 views; 8 views also without substitution."""
    out = {}
    for views in (4, 6, 8):
        for seed in SEEDS:
            spec = FixtureSpec(seed=seed, n_views=views, p_split=0.3, p_merge=0.2, sigma=0.05)
            bundle, gt = generate_scene(spec)
            gts = ground_truth_from_bundle(bundle, gt_record(gt), CFG)
            res, dt = _timed_segment(bundle)
            out[views, seed, True] = dict(ap=_ap(res, gts), seconds=dt, stats=res.stats)
            if views == 8:
                res, dt = _timed_segment(bundle, substitution=False)
                out[views, seed, False] = dict(ap=_ap(res, gts), seconds=dt, stats=res.stats)
    return out


def _plant_trial(trial):
    """One planted box displacement: object, distance <= 15 cm, yaw <= 30 deg, a random view."""
    rng = np.random.default_rng(1000 + trial)
    spec = FixtureSpec(seed=trial, shapes=("box",), n_objects=10, layout_radius=0.22)
    bundle, gt = generate_scene(spec)
    for _ in range(200):
        obj = int(rng.integers(spec.n_objects))
        d = rng.uniform(0.03, 0.15)
        a = rng.uniform(0, 2 * math.pi)
        yaw = math.radians(rng.uniform(-30.0, 30.0))
        view = int(rng.integers(spec.n_views))
        try:
            post, pgt = plant_displacement(gt, obj, d * math.cos(a), d * math.sin(a), yaw, view=view)
            break
        except ValueError:
            continue
    else:
        raise RuntimeError(f"trial {trial}: no valid placement")
    return bundle, gt, obj, post, pgt


@pytest.fixture(scope="module")
def displacement_trials():
    out = []
    for trial in range(50):
        bundle, gt, obj, post, pgt = _plant_trial(trial)
        res = segment_scene(bundle, CFG, threads=1)
        state = SceneState.from_segmentation(res)
        planted = instance_of_object(res, bundle, gt).get(obj)
        t0 = time.perf_counter()
        report = analyze_post_frame(state, post)
        dt = time.perf_counter() - t0
        R, t = np.array(pgt.transform["R"]), np.array(pgt.transform["t"])
        o = gt.objects[obj]
        center = np.array([o.center[0], o.center[1], o.height / 2])
        change = next(c for c in report.changes if c.instance_id == planted)
        rot_err = tr_err = math.inf
        iou, opt_s = 0.0, 0.0
        if change.status == DISPLACED:
            rot_err = rotation_error_deg(change.transform.matrix, R)
            tr_err = float(np.linalg.norm(change.transform.apply(center[None])[0] - (R @ center + t)))
            iou, opt_s = change.final_iou, change.seconds
        out.append(dict(trial=trial, planted=planted, displaced=report.displaced, n_static=len(state.instances) - 1,
                        rot=rot_err, tr=tr_err, iou=iou, seconds=dt, opt_seconds=opt_s))
    return out


@pytest.fixture(scope="module")
def semantic_runs():
    out = []
    for seed in SEEDS:
        bundle, gt = generate_scene(FixtureSpec(seed=seed, n_objects=5, sigma=0.05))
        gts = ground_truth_from_bundle(bundle, gt_record(gt), CFG)
        res = segment_scene(bundle, CFG, threads=1)
        mapping = instance_of_object(res, bundle, gt)
        by_cat = {}
        for g in gts:
            by_cat[g.category] = by_cat.get(g.category, frozenset()) | g.voxels
        predicted, correct = {}, 0
        for obj in gt.objects:
            target = identify_target(gt.prototypes[obj.category], res.instances).target
            correct += target == mapping.get(obj.id)
            inst = next(i for i in res.instances if i.id == target)
            predicted[obj.category] = voxelize(res.cloud.positions[inst.points], CFG.eval_voxel_m)
        out.append(dict(seed=seed, correct=correct, n=len(gt.objects), report=semantic_iou(predicted, by_cat),
                        stats=res.stats))
    return out


# ---------------------------------------------------------------- A1-A11

def test_A1_formula_conformance():
    t0 = time.perf_counter()
    n = np.array([0.0, 0.0, 1.0])
    x = np.array([0.1, 0.2, 0.3])
    eps = CFG.eps
    w = np.array([0.5, 0.5])
    checks = [
        abs(pair_distance(x, n, x, n, 0.5, 1.0)) <= 1e-9,
        abs(pair_distance(x, n, x + [0.02, 0, 0], n, 0.5, 1.0) - 0.01) <= 1e-9,
        abs(pair_distance(x, n, x, np.array([1.0, 0.0, 0.0]), 0.5, 1.0) - 1.0) <= 1e-9,
        # o_i = o_j gives U / (U + eps); disjoint supports give 0
        abs(spatial_similarity([0.3, 0.7], [0.3, 0.7], w, eps) - 0.5 / (0.5 + eps)) <= 1e-9,
        spatial_similarity([1.0, 0.0], [0.0, 1.0], w, eps) == 0.0,
        # 0.25 / 0.75 with the stabilizer in the denominator
        abs(spatial_similarity([1.0, 0.0], [0.5, 0.5], w, eps) - 0.25 / (0.75 + eps)) <= 1e-9,
        abs(spatial_similarity([1.0, 0.0], [0.5, 0.5], w, 0.0) - 1 / 3) <= 1e-9,
        abs(semantic_similarity([0.6, 0.8], [0.6, 0.8]) - 1.0) <= 1e-9,
        abs(semantic_similarity([1.0, 0.0], [0.0, 1.0])) <= 1e-9,
        abs(semantic_similarity([0.6, 0.8], [0.8, 0.6]) - 0.96) <= 1e-9,
        abs(chamfer_loss([[3.0, 4.0], [7.0, 1.0]], [[3.0, 4.0], [7.0, 1.0]])) <= 1e-2,
        abs(chamfer_loss([[0.0, 0.0]], [[3.0, 4.0]]) - 10.0) <= 1e-2,
        abs(total_loss((0.0, 0.0, 0.0), StageWeights(50.0, 0.5, 10.0))) <= 1e-9,
        abs(total_loss((1.0, 2.0, 3.0), StageWeights(50.0, 0.5, 10.0)) - 81.0) <= 1e-9,
        abs(total_loss((1.0, 2.0, 3.0), StageWeights(10.0, 2.0, 1.0)) - 17.0) <= 1e-9,
    ]
    dt = time.perf_counter() - t0
    ok = all(checks) and dt < 1.0
    record("A1", ok, f"{sum(checks)}/{len(checks)} examples within tolerance in {dt:.3f} s")
    assert ok


def test_A2_default_config():
    cfg = load_config()
    got = dict(voxel_size_m=cfg.voxel_size_m, min_occupancy=cfg.min_occupancy, alpha=cfg.alpha, beta=cfg.beta,
               tau_merge=cfg.tau_merge, tau_spat=cfg.tau_spat, tau_sem=cfg.tau_sem, tau_iou=cfg.tau_iou,
               stage1=(cfg.coarse_chamfer, cfg.coarse_photo, cfg.coarse_reg_z),
               stage2=(cfg.fine_chamfer, cfg.fine_photo, cfg.fine_reg_z))
    want = dict(voxel_size_m=0.005, min_occupancy=3, alpha=0.5, beta=1.0, tau_merge=0.01, tau_spat=0.5,
                tau_sem=0.65, tau_iou=0.75, stage1=(50.0, 0.5, 10.0), stage2=(10.0, 2.0, 1.0))
    bad = [k for k in want if got[k] != want[k]]
    record("A2", not bad, "all defaults match" if not bad else f"mismatched: {bad}")
    assert not bad


@pytest.mark.slow
def test_A3_clean_grouping(clean_runs):
    counts = [r["n"] for r in clean_runs]
    ap25 = [r["ap"].ap25 for r in clean_runs]
    slowest = max(r["seconds"] for r in clean_runs)
    ok = all(c == 10 for c in counts) and min(ap25) >= 0.99 and slowest < 30.0
    record("A3", ok, f"instances {counts}, min AP25 {min(ap25):.4f}, slowest scene {slowest:.2f} s")
    assert ok


@pytest.mark.slow
def test_A4_noise_robustness(noisy_runs):
    t0 = time.perf_counter()
    with_sub = [noisy_runs[8, s, True]["ap"] for s in SEEDS]
    without = [noisy_runs[8, s, False]["ap"] for s in SEEDS]
    ap25 = np.mean([a.ap25 for a in with_sub])
    ap50 = np.mean([a.ap50 for a in with_sub])
    ab50 = np.mean([a.ap50 for a in without])
    total = sum(noisy_runs[8, s, k]["seconds"] for s in SEEDS for k in (True, False))
    ok = ap25 >= 0.90 and ap50 >= 0.70 and ab50 < ap50 and total < 300
    record("A4", ok, f"AP25 {ap25:.4f}, AP50 {ap50:.4f}, AP50 without substitution {ab50:.4f}, "
                     f"mAP {np.mean([a.map for a in with_sub]):.4f} vs {np.mean([a.map for a in without]):.4f}, "
                     f"segmentation {total:.1f} s")
    assert ok, time.perf_counter() - t0


@pytest.mark.slow
def test_A5_view_sparsity(noisy_runs):
    mean_ap = {v: float(np.mean([noisy_runs[v, s, True]["ap"].ap25 for s in SEEDS])) for v in (4, 6, 8)}
    secs = {v: sum(noisy_runs[v, s, True]["seconds"] for s in SEEDS) for v in (4, 6, 8)}
    ok = mean_ap[4] <= mean_ap[6] <= mean_ap[8] and secs[4] < secs[8]
    record("A5", ok, "AP25 " + " / ".join(f"{v}v {mean_ap[v]:.4f}" for v in (4, 6, 8)) +
           ", runtime " + " / ".join(f"{v}v {secs[v]:.1f} s" for v in (4, 6, 8)))
    assert ok


def _grouping_case(seed):
    rng = np.random.default_rng(seed)
    spec = FixtureSpec(seed=seed, n_objects=int(rng.integers(2, 4)), n_views=int(rng.integers(3, 5)), sigma=0.05,
                       p_split=0.3, width=320, height=240)
    bundle, _ = generate_scene(spec)
    return segment_scene(bundle, CFG, substitution=False)


@pytest.mark.slow
def test_A6_grouping_oracle():
    cases, agree, seed, leaves_seen = 0, 0, 0, []
    while cases < 20:
        res = _grouping_case(seed)
        seed += 1
        leaves = [(f.frame, m) for f in res.forests for m in f.leaves]
        if len(leaves) > 12:
            continue
        cases += 1
        leaves_seen.append(len(leaves))
        t = res.table
        atoms = [t.atom(f, m) for f, m in leaves]
        occ = occupancy_dicts(t)
        w = res.supervoxels.weights
        s_spat = [[weighted_jaccard(occ[a], occ[b], w, CFG.eps) for b in atoms] for a in atoms]
        s_sem = [[float(np.dot(t.embeddings[a], t.embeddings[b])) for b in atoms] for a in atoms]
        want = exhaustive_grouping(atoms, [int(t.frames[a]) for a in atoms], s_spat, s_sem, CFG.tau_spat, CFG.tau_sem)
        g = construct_leaf_graph(res.forests, t, CFG.tau_spat, CFG.tau_sem)
        group_by_similarity(g)
        agree += {frozenset(s) for s in g.sets.values()} == want
    ok = agree == cases
    record("A6", ok, f"{agree}/{cases} cases equal the exhaustive optimum (leaves {min(leaves_seen)}-{max(leaves_seen)})")
    assert ok


@pytest.mark.slow
def test_A7_se3_recovery(displacement_trials):
    good = [r for r in displacement_trials if r["rot"] < 5.0 and r["tr"] < 0.010]
    aligned = [r for r in good if r["iou"] > 0.75]
    per_instance = max(r["opt_seconds"] for r in displacement_trials)
    analyze = max(r["seconds"] for r in displacement_trials)
    ok = len(aligned) >= 0.9 * len(displacement_trials) and per_instance < 2.0
    tr = [r["tr"] for r in displacement_trials if math.isfinite(r["tr"])]
    rot = [r["rot"] for r in displacement_trials if math.isfinite(r["rot"])]
    record("A7", ok, f"{len(aligned)}/{len(displacement_trials)} within 5 deg / 10 mm with IoU > 0.75 "
                     f"(median {np.median(rot):.2f} deg / {1000 * np.median(tr):.1f} mm), "
                     f"slowest optimization {per_instance:.2f} s per instance ({analyze:.2f} s for the whole post frame)")
    assert ok


@pytest.mark.slow
def test_A8_change_detection(displacement_trials):
    trials = displacement_trials[:20]
    exact = [r for r in trials if r["planted"] is not None and r["displaced"] == [r["planted"]]]
    fp = sum(len(set(r["displaced"]) - {r["planted"]}) for r in trials)
    ok = len(exact) == len(trials) and min(r["n_static"] for r in trials) >= 9
    record("A8", ok, f"{len(exact)}/{len(trials)} seeds flag exactly the planted instance, {fp} false positives")
    assert ok


def test_A9_ap_oracle():
    worst, n = 0.0, 0
    for case in range(50):
        rng = np.random.default_rng(case)
        n_gt, n_pred = int(rng.integers(1, 6)), int(rng.integers(0, 6))

        def cells():
            k = int(rng.integers(1, 9))
            return frozenset((int(v), 0, 0) for v in rng.choice(16, size=k, replace=False))

        gts = [cells() for _ in range(n_gt)]
        preds = [(i, float(rng.integers(1, 5)) / 4, cells()) for i in range(n_pred)]
        G = [GroundTruthInstance(k, 0, g) for k, g in enumerate(gts)]
        P = [Prediction(i, c, v) for i, c, v in preds]
        for interp in ("101", "all"):
            rep = instance_ap(P, G, interpolation=interp)
            for thr, val in rep.by_threshold.items():
                worst = max(worst, abs(val - ap_oracle(preds, gts, thr, interp)))
                n += 1
    ok = worst <= 1e-9
    record("A9", ok, f"50 cases, {n} threshold/interpolation values, max deviation {worst:.2e}")
    assert ok


@pytest.mark.slow
def test_A10_semantic_grounding(semantic_runs):
    correct = sum(r["correct"] for r in semantic_runs)
    total = sum(r["n"] for r in semantic_runs)
    means = [r["report"].mean for r in semantic_runs]
    sweep = float(np.mean(means))
    ok = correct == total and sweep >= 0.95
    record("A10", ok, f"{correct}/{total} queries ranked the planted instance first; "
                      f"semantic IoU sweep mean {sweep:.4f} (per-seed min {min(means):.4f})")
    assert ok


@pytest.mark.slow
def test_A11_substitution_bound(clean_runs, noisy_runs, semantic_runs):
    stats = [r["stats"] for r in clean_runs] + [r["stats"] for r in noisy_runs.values()] + \
            [r["stats"] for r in semantic_runs]
    over = [s for s in stats if s["substitution"]["iterations"] > s["substitution"]["bound"]]
    hist = substitution_histogram([SimpleNamespace(stats=s) for s in stats])
    ok = not over
    record("A11", ok, f"{len(stats)} scenes within the depth bound: {not over}; "
                      f"substitution-iteration histogram {hist}; property tests live in the module suites")
    assert ok
