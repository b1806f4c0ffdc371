"""Acceptance criteria, one test per criterion.

Each test records a one-line PASS/FAIL verdict that is printed in the
terminal summary.
"""

import functools
import gc
import json
import math
import time

import numpy as np

import conftest
import reference as ref
from conftest import perturbed, random_blobs
from plu_forge.cli import main
from plu_forge.fidelity import FeatureStats, delta_fid, fid, fid_between
from plu_forge.losses import (FocalParams, LossComponents, LossWeights, binary_cross_entropy,
                              count_bce, decomposition_iou_loss, focal_loss, seg_cross_entropy,
                              smooth_l1, total_sassl_loss, total_sl_loss)
from plu_forge.manifest import Manifest, save_manifest
from plu_forge.masks import BoundingBox, InstanceMask, overlap_pairs, severe_overlap_flags
from plu_forge.matching import hungarian_match
from plu_forge.metrics import aji, evaluate, severe_subset
from plu_forge.orchestrator import Sample, SSLConfig, TrainingSchedule, run_round
from plu_forge.pseudo_labels import (BOX_THRESHOLD, PIXEL_THRESHOLD, ProbabilityMaskSet, Proposal,
                                     apply_plu, assign_judgment_label, build_judgment_training_set,
                                     threshold_pseudo_labels)
from plu_forge.simulator import (OracleSegmentor, ReferenceStudent, SimConfig, generate_scene,
                                 procedural_generator)
from plu_forge.synthesis import (AugmentationPolicy, augment_instances, layered_mask_decomposition,
                                 render_contour_image, sample_instance_transform, synthesize,
                                 transform_mask)
from plu_forge.weights import WeightVector, ema_update


def criterion(n, title):
    def wrap(fn):
        @functools.wraps(fn)
        def run(*args, **kwargs):
            try:
                detail = fn(*args, **kwargs)
            except BaseException as exc:
                msg = " ".join(str(exc).split())[:160]
                conftest.ACCEPTANCE[n] = f"C{n:<2} FAIL  {title}: {type(exc).__name__}: {msg}"
                raise
            conftest.ACCEPTANCE[n] = f"C{n:<2} PASS  {title}" + (f" ({detail})" if detail else "")
        return run
    return wrap


def close(a, b, rel=1e-12):
    return math.isclose(a, b, rel_tol=rel, abs_tol=0.0)


# -- 1 -----------------------------------------------------------------------

@criterion(1, "loss formulas vs brute force, 1,000 cases each, rel 1e-12, < 5 s")
def test_c1_loss_formulas():
    rng = np.random.default_rng(101)
    t0 = time.perf_counter()
    worst = 0.0

    def check(got, want):
        nonlocal worst
        if want != 0:
            worst = max(worst, abs(got - want) / abs(want))
        assert close(got, want), (got, want)

    for _ in range(1000):
        p = float(rng.choice([rng.random(), 0.0, 1.0, 1e-9])) if rng.random() < 0.1 else float(rng.random())
        a, g = float(rng.uniform(0.05, 0.95)), float(rng.uniform(0, 4))
        check(focal_loss(p, FocalParams(a, g)), ref.focal(p, a, g))

        t, v = rng.normal(0, 2, 4), rng.normal(0, 2, 4)
        check(smooth_l1(t, v), ref.smooth_l1(t, v))

        shape = tuple(rng.integers(1, 9, 2))
        target = rng.random(shape) < 0.5
        probs = rng.random(shape)
        probs[rng.random(shape) < 0.05] = rng.choice([0.0, 1.0])
        check(seg_cross_entropy(target, probs), ref.seg_ce(target, probs))

        m = int(rng.integers(1, 12))
        y = rng.integers(0, 2, m).astype(float)
        pp = rng.random(m)
        check(binary_cross_entropy(y, pp), ref.bce(y, pp))

        K = int(rng.integers(1, 8))
        k = int(rng.integers(0, K + 1))
        e = rng.random(K)
        check(count_bce(k, e), ref.count_bce(k, e))

        preds = random_blobs(rng, (8, 8), int(rng.integers(1, 5)))
        gts = random_blobs(rng, (8, 8), int(rng.integers(1, 5)))
        check(decomposition_iou_loss(preds, gts), ref.decomposition_loss(preds, gts))

        comps = rng.uniform(0, 3, 6)
        w = rng.uniform(0, 2, 4)
        c = LossComponents(*comps)
        check(total_sl_loss(c, LossWeights(*w)), ref.total_sl(comps, *w[:3]))
        streams = rng.uniform(0, 5, 3)
        check(total_sassl_loss(*streams, LossWeights(lambda_ssl=w[3])), ref.total_sassl(*streams, w[3]))
    elapsed = time.perf_counter() - t0
    assert elapsed < 5.0, f"{elapsed:.2f} s"
    return f"max rel err {worst:.1e}, {elapsed:.2f} s"


# -- 2 -----------------------------------------------------------------------

@criterion(2, "Hungarian = exhaustive minimum (500), permutation invariance (200), < 30 s")
def test_c2_hungarian_and_invariance():
    rng = np.random.default_rng(202)
    t0 = time.perf_counter()
    for i in range(500):
        n = 1 + i % 7
        cost = rng.random((n, n))
        if i % 5 == 0:
            cost = np.round(cost * 3) / 3  # many ties
        got = hungarian_match(cost)
        want = ref.best_assignment(cost)
        assert len(got.pairs) == n
        assert sorted(r for r, _ in got.pairs) == list(range(n))
        assert sorted(c for _, c in got.pairs) == list(range(n))
        assert math.isclose(got.total_cost, want, rel_tol=1e-12, abs_tol=1e-12)
        assert math.isclose(sum(cost[r, c] for r, c in got.pairs), want, rel_tol=1e-12, abs_tol=1e-12)
    for _ in range(200):
        preds = random_blobs(rng, (10, 10), int(rng.integers(1, 6)))
        gts = random_blobs(rng, (10, 10), int(rng.integers(1, 6)))
        base = decomposition_iou_loss(preds, gts)
        shuffled = decomposition_iou_loss([preds[j] for j in rng.permutation(len(preds))],
                                          [gts[j] for j in rng.permutation(len(gts))])
        assert math.isclose(base, shuffled, rel_tol=1e-12, abs_tol=1e-15)
    elapsed = time.perf_counter() - t0
    assert elapsed < 30.0, f"{elapsed:.2f} s"
    return f"{elapsed:.2f} s"


# -- 3 -----------------------------------------------------------------------

@criterion(3, "pseudo-label thresholding = per-pixel oracle on 500 grids, defaults 0.7 / 0.5")
def test_c3_thresholding():
    assert (BOX_THRESHOLD, PIXEL_THRESHOLD) == (0.7, 0.5)
    rng = np.random.default_rng(303)
    boundary = 0
    for _ in range(500):
        h, w = (int(x) for x in rng.integers(1, 12, 2))
        n = int(rng.integers(0, 5))
        grids, scores = [], []
        for _ in range(n):
            g = rng.random((h, w))
            hit = rng.random((h, w)) < 0.2
            g[hit] = 0.5  # exactly on the pixel threshold
            boundary += int(hit.sum())
            grids.append(g)
            scores.append(float(rng.choice([0.7, rng.random(), 0.69999999, 1.0])))
        raw = ProbabilityMaskSet(w, h, [Proposal(BoundingBox(0, 0, w, h), s, g) for s, g in zip(scores, grids)])
        got = [m.bitmap for m in threshold_pseudo_labels(raw).masks]
        want = ref.threshold(grids, scores)
        assert len(got) == len(want)
        assert all(np.array_equal(a, b) for a, b in zip(got, want))
    return f"{boundary} pixels at P = 0.5"


# -- 4 -----------------------------------------------------------------------

def _severe_scenes(n):
    cfg = SimConfig(overlap_bias=0.9)
    out, seed = [], 0
    while len(out) < n:
        sim = generate_scene(cfg, seed)
        seed += 1
        flags = sim.scene.severe_overlap_flags
        if flags and sum(flags) / len(flags) >= 0.3:
            out.append(sim.scene)
    return out


@criterion(4, "PLU end to end: AJI improves on every corrupted scene, exact GT at jitter 0, < 2 min")
def test_c4_plu_end_to_end():
    t0 = time.perf_counter()
    scenes = _severe_scenes(100)
    registry = {str(i): s for i, s in enumerate(scenes)}
    corrupted = 0
    for q in (0.5, 1.0):
        oracle = OracleSegmentor(registry, q=q, seed=4)
        for key, gt in registry.items():
            raw, ctx = oracle.predict(None, key)
            pseudo = threshold_pseudo_labels(raw)
            fixed = apply_plu(pseudo, lambda m: oracle.judge(m, ctx), lambda m: oracle.decompose(m, ctx))
            assert sorted(m.runs for m in fixed.masks) == sorted(m.runs for m in gt.instances)
            if ctx.n_merged_emitted:
                corrupted += 1
                assert aji(fixed.to_scene(), gt) > aji(pseudo.to_scene(), gt)
    elapsed = time.perf_counter() - t0
    assert corrupted > 0
    assert elapsed < 120.0, f"{elapsed:.1f} s"
    return f"{corrupted} corrupted scenes over q in {{0.5, 1.0}}, {elapsed:.1f} s"


# -- 5 -----------------------------------------------------------------------

@criterion(5, "judgment labels agree with construction labels on 100 seeds")
def test_c5_judgment_labels():
    cfg = SimConfig(overlap_bias=0.9)
    n = 0
    for seed in range(100):
        gt = generate_scene(cfg, seed).scene
        samples = build_judgment_training_set(gt)
        merged = [s.mask for s in samples if s.label == 0]
        for s in samples:
            assert assign_judgment_label(s.mask, gt.instances, merged) == s.label
            n += 1
    return f"{n} samples"


# -- 6 -----------------------------------------------------------------------

def _stats(mu, cov):
    return FeatureStats(np.atleast_1d(np.asarray(mu, float)), np.atleast_2d(np.asarray(cov, float)), 10)


@criterion(6, "FID closed forms and delta-FID table values")
def test_c6_fid():
    rng = np.random.default_rng(606)
    for _ in range(100):
        d = int(rng.integers(1, 25))
        a = rng.normal(size=(d, d + 3))
        s = _stats(rng.normal(size=d), a @ a.T / (d + 3))
        assert fid(s, s) <= 1e-9
    assert abs(fid(_stats(0.0, 1.0), _stats(1.0, 1.0)) - 1.0) <= 1e-9
    worst = 0.0
    for _ in range(100):
        d = int(rng.integers(1, 16))
        ma, mb = rng.normal(size=d), rng.normal(size=d)
        da, db = rng.uniform(0.01, 5, d), rng.uniform(0.01, 5, d)
        err = abs(fid(_stats(ma, np.diag(da)), _stats(mb, np.diag(db))) - ref.fid_diagonal(ma, da, mb, db))
        worst = max(worst, err)
        assert err <= 1e-8
    assert abs(delta_fid(115.4, 105.8) - 9.0737) <= 1e-3
    assert abs(delta_fid(175.7, 159.4) - 10.2258) <= 1e-3
    return f"diagonal max abs err {worst:.1e}"


# -- 7 -----------------------------------------------------------------------

@criterion(7, "metrics vs reference on 200 scenes within 1e-9, invariance, perfect = 1, severe slice")
def test_c7_metrics(tmp_path, capsys):
    rng = np.random.default_rng(707)
    cfg = SimConfig(overlap_bias=0.8)
    sims = [generate_scene(cfg, 7000 + s) for s in range(200)]
    for sim in sims:
        gt = sim.scene
        pred = perturbed(sim, rng)
        P = [m.bitmap for m in pred.instances]
        G = [m.bitmap for m in gt.instances]
        rep = evaluate(pred, gt)
        assert abs(rep.f1 - ref.f1(P, G)) <= 1e-9
        assert abs(rep.dice - ref.dice(P, G)) <= 1e-9
        assert abs(rep.aji - ref.aji(P, G)) <= 1e-9
        assert abs(rep.map - ref.mean_ap(P, G, pred.scores)) <= 1e-9
        other = evaluate(pred.subset(list(rng.permutation(len(pred)))), gt.subset(list(rng.permutation(len(gt)))))
        for k in ("map", "f1", "dice", "aji"):
            assert abs(getattr(other, k) - getattr(rep, k)) <= 1e-12
        perfect = evaluate(gt.subset(list(rng.permutation(len(gt)))), gt)
        assert (perfect.map, perfect.f1, perfect.dice, perfect.aji) == (1.0, 1.0, 1.0, 1.0)
        _, g = severe_subset(pred, gt)
        assert len(g) == sum(severe_overlap_flags(gt))

    # the CLI slice reports the flagged count
    scenes = [s.scene.replace(image_path=f"img{i}.png") for i, s in enumerate(sims[:20])]
    path = tmp_path / "gt.json"
    save_manifest(path, Manifest.from_scenes(scenes))
    assert main(["eval", "--pred", str(path), "--gt", str(path), "--subset", "severe-overlap"]) == 0
    doc = json.loads(capsys.readouterr().out)
    assert doc["n_gt_instances"] == sum(sum(severe_overlap_flags(s)) for s in scenes)
    return "200 scenes"


# -- 8 -----------------------------------------------------------------------

def _best_times(fns, inputs):
    """Best wall time of each function, calls alternating so both see the same load."""
    best = [math.inf] * len(fns)
    was_enabled = gc.isenabled()
    gc.disable()
    try:
        for xs in inputs:
            for k, (fn, x) in enumerate(zip(fns, xs)):
                t = time.perf_counter()
                fn(x)
                best[k] = min(best[k], time.perf_counter() - t)
    finally:
        if was_enabled:
            gc.enable()
    return best


@criterion(8, "contour pathway: 1 raster vs >= 2 layers, faster on every overlapping scene")
def test_c8_contour_efficiency():
    cfg = SimConfig(overlap_bias=0.9)
    scenes, seed = [], 0
    while len(scenes) < 50:
        s = generate_scene(cfg, seed).scene
        seed += 1
        if overlap_pairs(s.instances):
            scenes.append(s)
    ratios = []
    for s in scenes:
        contour = render_contour_image(s, s.categories)
        assert contour.pixels.ndim == 2  # a single raster
        assert len(layered_mask_decomposition(s, s.categories)) >= 2

        # fresh masks for every call so neither side reuses decoded bitmaps
        def fresh():
            return s.replace(instances=[InstanceMask(m.width, m.height, m.runs, m.instance_id)
                                        for m in s.instances])

        t_c, t_l = _best_times([lambda x: render_contour_image(x, s.categories),
                                lambda x: layered_mask_decomposition(x, s.categories)],
                               [(fresh(), fresh()) for _ in range(25)])
        ratios.append(t_c / t_l)
    slower = sum(r > 1 for r in ratios)
    assert slower == 0, f"{slower} scenes slower, worst ratio {max(ratios):.2f}"
    return f"time ratio median {np.median(ratios):.2f}, worst {max(ratios):.2f}"


# -- 9 -----------------------------------------------------------------------

@criterion(9, "train-loop logs byte-identical over 20 rounds, EMA contraction, lambda = 0")
def test_c9_orchestrator(tmp_path):
    cfg = tmp_path / "loop.json"
    cfg.write_text(json.dumps({"labeled_seeds": "0..5", "unlabeled_seeds": "100..103", "rounds": 20,
                               "backend": {"q": 0.5}}))
    logs = []
    for name in ("a.jsonl", "b.jsonl"):
        out = tmp_path / name
        assert main(["train-loop", "--config", str(cfg), "--seed", "9", "--out", str(out)]) == 0
        logs.append(out.read_bytes())
    assert logs[0] == logs[1] and len(logs[0].splitlines()) == 20

    rng = np.random.default_rng(909)
    for _ in range(1000):
        d = int(rng.integers(1, 64))
        t, s = WeightVector(rng.normal(size=d)), WeightVector(rng.normal(size=d))
        m = float(rng.random())
        out = ema_update(t, s, m).values
        assert np.allclose(np.abs(out - s.values), m * np.abs(t.values - s.values), rtol=1e-12, atol=1e-12)

    for _ in range(1000):
        real, pseudo, synth = rng.uniform(0, 10, 3)
        assert total_sassl_loss(real, pseudo, synth, LossWeights(lambda_ssl=0.0)) == real
    sims = [generate_scene(SimConfig(overlap_bias=0.9), s) for s in range(6)]
    lab = [Sample(f"l{i}", s.image, s.scene) for i, s in enumerate(sims[:4])]
    unl = [Sample(f"u{i}", s.image) for i, s in enumerate(sims[4:])]
    teacher = OracleSegmentor({f"u{i}": s.scene for i, s in enumerate(sims[4:])}, q=1.0)
    sched = SSLConfig(schedule=TrainingSchedule(lambda_ssl=0.0))
    rep = run_round(0, teacher, ReferenceStudent(0), procedural_generator(), lab, unl, sched, seed=3)
    assert rep.total == rep.stream_totals["real"]
    return f"{len(logs[0])} byte logs"


# -- 10 ----------------------------------------------------------------------

def _synth_set(scenes, gen, policy, seed):
    out = []
    for k, s in enumerate(scenes):
        if policy is not None:
            s = augment_instances(s, policy, np.random.default_rng([seed, k]))
        out.append(synthesize(render_contour_image(s, s.categories), gen, seed=k))
    return out


@criterion(10, "scale-only area ratios, reproducible SRT, FID(SRT) > FID(S) on >= 80% of 50 pairs")
def test_c10_augmentation_policy():
    rng = np.random.default_rng(1010)
    s_only = AugmentationPolicy.from_code("S")
    lo, hi = 0.81 * 0.9, 1.21 * 1.1
    ratios, rel = [], []
    seed = 0
    while len(ratios) < 500:
        scene = generate_scene(SimConfig(), seed).scene
        seed += 1
        for m in scene.instances:
            scale, _, _ = sample_instance_transform(s_only, rng)
            moved = transform_mask(m.bitmap, scale)
            ratios.append(moved.sum() / m.area)
            rel.append(ratios[-1] / scale**2)
    ratios = np.array(ratios[:500])
    assert np.all((ratios >= lo) & (ratios <= hi)), (ratios.min(), ratios.max())
    # nearest-neighbour rounding scatters single instances but is unbiased on average
    assert abs(np.mean(rel[:500]) - 1) <= 0.02

    srt = AugmentationPolicy.from_code("SRT")
    scene = generate_scene(SimConfig(), 77).scene
    a = augment_instances(scene, srt, np.random.default_rng(5))
    b = augment_instances(scene, srt, np.random.default_rng(5))
    assert a == b

    gen = procedural_generator()
    cfg = SimConfig()
    wins = 0
    for pair in range(50):
        scenes = [generate_scene(cfg, pair * 1000 + i).scene for i in range(40)]
        free = _synth_set(scenes, gen, None, 0)
        f_s = fid_between(_synth_set(scenes, gen, s_only, pair), free)
        f_srt = fid_between(_synth_set(scenes, gen, srt, pair), free)
        wins += f_srt > f_s
    assert wins >= 40, f"{wins}/50"
    return f"area ratios in [{ratios.min():.3f}, {ratios.max():.3f}], SRT > S on {wins}/50"
