"""
Command-line entry point.

Exit codes: 0 success, 1 invalid input (one ``ERR:<code>:`` line on
stderr), 2 pipeline failure. Every randomized subcommand requires ``--seed``.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import fields
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import __version__
from .fidelity import DeskFeatureExtractor, delta_fid, extract_features, fid, fit_stats
from .losses import (FocalParams, LossComponents, LossWeights, binary_cross_entropy, count_bce,
                     decomposition_iou_loss, focal_loss, seg_cross_entropy, smooth_l1,
                     total_sassl_loss, total_sl_loss)
from .manifest import (FormatError, Manifest, ManifestEntry, atomic_write, load_manifest,
                       read_fvec, read_gray, save_manifest, write_contours, write_gray)
from .masks import Scene, bbox_of, to_coco_rle
from .metrics import MetricReport, evaluate, severe_subset
from .orchestrator import Sample, SSLConfig, TrainingSchedule, TrainLoop
from .pseudo_labels import (MAX_INSTANCES, Provenance, PseudoLabelSet, apply_plu,
                            build_decomposition_target, build_judgment_training_set,
                            threshold_pseudo_labels)
from .simulator import (OracleSegmentor, ReferenceStudent, SimConfig, generate_scene, key_seed,
                        procedural_generator)
from .synthesis import (AugmentationPolicy, augment_instances, categorize,
                        fit_category_thresholds, measure_appearances, render_contour_image,
                        synthesize)

logger = logging.getLogger("plu_forge")


class CLIError(Exception):
    def __init__(self, code: str, message: str, exit_code: int = 1):
        super().__init__(message)
        self.code = code
        self.exit_code = exit_code


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CLIError("usage", message)


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    raise TypeError(f"not serializable: {type(o).__name__}")


def _round(obj):
    if isinstance(obj, float):
        return float(f"{obj:.9g}")
    if isinstance(obj, dict):
        return {k: _round(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_round(v) for v in obj]
    if isinstance(obj, np.generic):
        return _round(obj.item())
    return obj


def _dump(obj, indent: Optional[int] = 1) -> str:
    return json.dumps(_round(obj), indent=indent, default=_json_default)


def _emit(text: str, out: Optional[str]) -> None:
    if out:
        atomic_write(out, (text + "\n").encode("utf-8"))
    else:
        print(text)


def _read_json(path) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except OSError as exc:
        raise CLIError("io", f"cannot read {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise CLIError("config", f"{path} is not valid JSON: {exc}") from exc


def _dataclass_from(cls, data: dict, what: str):
    names = {f.name for f in fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise CLIError("config", f"unknown {what} keys: {sorted(unknown)}")
    kwargs = {k: tuple(v) if isinstance(v, list) else v for k, v in data.items()}
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise CLIError("config", f"invalid {what}: {exc}") from exc


def _parse_seeds(text: str) -> list[int]:
    try:
        if ".." in text:
            a, b = text.split("..", 1)
            a, b = int(a), int(b)
            if b < a:
                raise ValueError
            return list(range(a, b + 1))
        return [int(text)]
    except ValueError:
        raise CLIError("usage", f"--seeds expects 'a..b', got {text!r}") from None


def _load_images(manifest: Manifest) -> list[np.ndarray]:
    return [read_gray(manifest.resolve(s)) for s in manifest.scenes]


def _registry(manifest: Manifest) -> dict:
    return {s.image_path: s for s in manifest.scenes}


def _thresholds(arg: Optional[str], manifest: Manifest, images) -> tuple[float, float]:
    if arg:
        try:
            t, f = (float(x) for x in arg.split(","))
        except ValueError:
            raise CLIError("usage", f"--thresholds expects 't_T,t_F', got {arg!r}") from None
        return t, f
    return fit_category_thresholds(list(zip(images, manifest.scenes)))


def _with_categories(manifest: Manifest, thr_arg: Optional[str]) -> list[Scene]:
    """Scenes with categories, measuring appearance where annotations lack them."""
    scenes = manifest.scenes
    if all(s.categories is not None or not s.instances for s in scenes):
        return [s if s.categories is not None else s.replace(categories=()) for s in scenes]
    images = _load_images(manifest)
    thr = _thresholds(thr_arg, manifest, images)
    out = []
    for img, s in zip(images, scenes):
        if s.categories is None:
            s = s.replace(categories=tuple(categorize(measure_appearances(img, s), thr)))
        out.append(s)
    return out


# -- subcommands ----------------------------------------------------------------

def cmd_simulate(args) -> None:
    cfg = _dataclass_from(SimConfig, _read_json(args.config) if args.config else {}, "simulator config")
    if args.seeds is None and args.seed is None:
        raise CLIError("usage", "simulate needs --seed or --seeds")
    seeds = _parse_seeds(args.seeds) if args.seeds else [args.seed]
    out = Path(args.out)
    scenes = []
    for seed in seeds:
        rel = f"images/scene_{seed:05d}.png"
        sim = generate_scene(cfg, seed, rel)
        write_gray(out / rel, sim.image)
        scenes.append(sim.scene)
    save_manifest(out / "manifest.json", Manifest.from_scenes(scenes))


def cmd_pseudo_gen(args) -> None:
    gt = load_manifest(args.gt)
    teacher = OracleSegmentor(_registry(gt), q=args.q, jitter=args.jitter, seed=args.seed)
    entries = []
    for s, img in zip(gt.scenes, _load_images(gt)):
        raw, _ = teacher.predict(img, s.image_path)
        pseudo = threshold_pseudo_labels(raw, args.theta_box, args.theta_p)
        scene = pseudo.to_scene(s.image_path)
        entries.append(ManifestEntry(scene, pseudo.provenance, ()))
    _save_beside(args.out, gt, entries)


def _save_beside(out: str, source: Manifest, entries: Sequence[ManifestEntry]) -> None:
    """Save with image paths rewritten relative to the output manifest."""
    out_dir = Path(out).resolve().parent
    fixed = []
    for e in entries:
        rel = Path(os.path.relpath(source.resolve(e.scene).resolve(), out_dir)).as_posix()
        fixed.append(ManifestEntry(e.scene.replace(image_path=rel), e.provenance, e.correction_log))
    save_manifest(out, Manifest(tuple(fixed)))


def cmd_plu_targets(args) -> None:
    gt = load_manifest(args.gt, check_files=False)
    images = []
    for s in gt.scenes:
        samples = build_judgment_training_set(s)
        recs = []
        for smp in samples:
            rec = {"instance_id": smp.mask.instance_id, "label": smp.label,
                   "rle": list(smp.mask.runs),
                   "component_ids": [m.instance_id for m in smp.component_masks]}
            if smp.label == 0:
                try:
                    t = build_decomposition_target(smp, args.K)
                except ValueError as exc:
                    raise CLIError("cluster-size", str(exc)) from exc
                rec["target"] = {"k": t.k,
                                 "slot_ids": [m.instance_id if m is not None else None for m in t.slots],
                                 "existence": [int(e) for e in t.existence]}
            recs.append(rec)
        images.append({"path": s.image_path, "samples": recs})
    _emit(_dump({"K": args.K, "images": images}), args.out)


def cmd_plu_apply(args) -> None:
    pseudo = load_manifest(args.pseudo, check_files=False)
    gt = load_manifest(args.registry, check_files=False)
    reg = {gt.resolve(s).resolve(): s for s in gt.scenes}
    teacher = OracleSegmentor(reg, K=args.K)
    entries = []
    for e in pseudo.entries:
        s = e.scene
        truth = reg.get(pseudo.resolve(s).resolve())
        if truth is None:
            raise CLIError("registry", f"image {s.image_path!r} not in the oracle registry")
        ctx = teacher.context_for(truth)
        prov = e.provenance or tuple(Provenance(i, 1.0 if s.scores is None else s.scores[i])
                                     for i in range(len(s)))
        pls = PseudoLabelSet(s.width, s.height, s.instances, prov, e.correction_log or ())
        fixed = apply_plu(pls, lambda m: teacher.judge(m, ctx), lambda m: teacher.decompose(m, ctx),
                          args.judge_threshold, args.exist_threshold)
        scene = fixed.to_scene(s.image_path)
        entries.append(ManifestEntry(scene, fixed.provenance, fixed.correction_log))
    _save_beside(args.out, pseudo, entries)


def cmd_contours(args) -> None:
    m = load_manifest(args.manifest, check_files=False)
    out = Path(args.out)
    for s in _with_categories(m, args.thresholds):
        img = render_contour_image(s, s.categories or (), args.stroke_width)
        write_contours(out / f"{Path(s.image_path).stem}_contours.png", img)


def cmd_augment(args) -> None:
    m = load_manifest(args.manifest, check_files=False)
    try:
        policy = AugmentationPolicy.from_code(args.policy, seed=args.seed)
    except ValueError as exc:
        raise CLIError("usage", str(exc)) from exc
    entries = []
    for s in m.scenes:
        rng = np.random.default_rng([args.seed, key_seed(s.image_path)])
        entries.append(ManifestEntry(augment_instances(s, policy, rng)))
    _save_beside(args.out, m, entries)


def cmd_synth(args) -> None:
    m = load_manifest(args.manifest, check_files=False)
    out = Path(args.out)
    gen = procedural_generator()
    synth = []
    for s in _with_categories(m, args.thresholds):
        contours = render_contour_image(s, s.categories or (), args.stroke_width)
        img = synthesize(contours, gen, seed=key_seed(s.image_path) ^ args.seed)
        rel = f"images/{Path(s.image_path).stem}_synth.png"
        write_gray(out / rel, img)
        synth.append(s.replace(image_path=rel))
    save_manifest(out / "manifest.json", Manifest.from_scenes(synth))


def _features(path: str) -> np.ndarray:
    p = Path(path)
    if p.is_dir():
        files = sorted(f for f in p.iterdir() if f.suffix.lower() == ".png")
        if len(files) < 2:
            raise CLIError("input", f"{p} holds {len(files)} PNG images, need at least 2")
        ext = DeskFeatureExtractor()
        return np.array([extract_features(read_gray(f), ext) for f in files])
    if p.is_file():
        return read_fvec(p)
    raise CLIError("io", f"{p} is neither a directory nor a feature dump")


def _baseline(value: str) -> float:
    try:
        return float(value)
    except ValueError:
        pass
    text = Path(value).read_text(encoding="utf-8").strip()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError:
        raise CLIError("baseline", f"cannot parse baseline {value!r}") from None
    return float(doc["fid"] if isinstance(doc, dict) else doc)


def cmd_fid(args) -> None:
    fa, fb = _features(args.a), _features(args.b)
    if fa.shape[1] != fb.shape[1]:
        raise CLIError("input", f"feature dims differ: {fa.shape[1]} vs {fb.shape[1]}")
    try:
        value = fid(fit_stats(fa), fit_stats(fb))
    except ValueError as exc:
        raise CLIError("input", str(exc)) from exc
    report = {"fid": value}
    if args.baseline is not None:
        report["baseline"] = _baseline(args.baseline)
        report["delta_fid_percent"] = delta_fid(value, report["baseline"])
    _emit(_dump(report, indent=None), args.out)


def cmd_eval(args) -> None:
    pred = load_manifest(args.pred, check_files=False)
    gt = load_manifest(args.gt, check_files=False)
    by_path = {pred.resolve(s).resolve(): s for s in pred.scenes}
    reports = []
    n_gt = n_pred = 0
    for g in gt.scenes:
        p = by_path.get(gt.resolve(g).resolve())
        if p is None:
            raise CLIError("manifest", f"no prediction for image {g.image_path!r}")
        if args.subset == "severe-overlap":
            p, g = severe_subset(p, g)
        n_gt += len(g)
        n_pred += len(p)
        reports.append(evaluate(p, g, iou_thr=args.iou))
    if not reports:
        raise CLIError("manifest", "ground-truth manifest has no images")
    mean = lambda xs: float(np.mean(xs))
    keys = reports[0].ap_table.keys()
    agg = MetricReport(mean([r.map for r in reports]), mean([r.f1 for r in reports]),
                       mean([r.dice for r in reports]), mean([r.aji for r in reports]),
                       {k: mean([r.ap_table[k] for r in reports]) for k in keys})
    doc = agg.as_dict()
    doc["n_images"] = len(reports)
    doc["n_gt_instances"] = n_gt
    doc["n_pred_instances"] = n_pred
    doc["subset"] = args.subset or "all"
    _emit(_dump(doc), args.out)


def _case_components(case: dict) -> LossComponents:
    focal = FocalParams(**case.get("focal_params", {}))
    vals = {}
    if "cls" in case:
        vals["cls"] = float(np.mean([focal_loss(p, focal) for p in case["cls"]["p_t"]]))
    if "reg" in case:
        vals["reg"] = smooth_l1(case["reg"]["t"], case["reg"]["v"])
    if "seg" in case:
        vals["seg"] = seg_cross_entropy(np.asarray(case["seg"]["target"]), np.asarray(case["seg"]["probs"]))
    if "o_cls" in case:
        vals["o_cls"] = binary_cross_entropy(case["o_cls"]["y"], case["o_cls"]["p"])
    if "i_count" in case:
        vals["i_count"] = count_bce(case["i_count"]["k"], case["i_count"]["probs"],
                                    bool(case["i_count"].get("printed_form", False)))
    if "i_iou" in case:
        preds = [np.asarray(b, dtype=bool) for b in case["i_iou"]["pred"]]
        gts = [np.asarray(b, dtype=bool) for b in case["i_iou"]["gt"]]
        vals["i_iou"] = decomposition_iou_loss(preds, gts)
    return LossComponents(**vals)


def cmd_loss_eval(args) -> None:
    doc = _read_json(args.cases)
    cases = doc["cases"] if isinstance(doc, dict) and "cases" in doc else doc
    if not isinstance(cases, list):
        raise CLIError("config", "case file must hold a list of cases")
    out = []
    for i, case in enumerate(cases):
        try:
            w = LossWeights(**case.get("weights", {}))
            rec = {"name": case.get("name", str(i))}
            if "streams" in case:
                totals = {}
                for name in ("real", "pseudo", "synthetic"):
                    comp = _case_components(case["streams"].get(name, {}))
                    rec[name] = comp.as_dict()
                    totals[name] = total_sl_loss(comp, w)
                rec["stream_totals"] = totals
                rec["total_sassl"] = total_sassl_loss(totals["real"], totals["pseudo"], totals["synthetic"], w)
            else:
                comp = _case_components(case)
                rec["components"] = comp.as_dict()
                rec["total_sl"] = total_sl_loss(comp, w)
        except (KeyError, TypeError, ValueError) as exc:
            raise CLIError("case", f"case {i}: {exc}") from exc
        out.append(rec)
    _emit(_dump(out), args.out)


def _sim_pool(cfg: SimConfig, seeds: Sequence[int], prefix: str) -> list[Sample]:
    out = []
    for seed in seeds:
        key = f"{prefix}-{seed}"
        sim = generate_scene(cfg, seed, key)
        out.append(Sample(key, sim.image, sim.scene))
    return out


def build_train_loop(config: dict, seed: int) -> tuple[TrainLoop, int]:
    known = {"simulator", "labeled_seeds", "unlabeled_seeds", "rounds", "schedule", "policy",
             "loss_weights", "backend", "category_thresholds", "stroke_width", "cache_pseudo_labels"}
    unknown = set(config) - known
    if unknown:
        raise CLIError("config", f"unknown train-loop keys: {sorted(unknown)}")
    sim_cfg = _dataclass_from(SimConfig, config.get("simulator", {}), "simulator config")
    sched = _dataclass_from(TrainingSchedule, config.get("schedule", {}), "schedule")
    weights = _dataclass_from(LossWeights, config.get("loss_weights", {}), "loss weights")
    try:
        policy = AugmentationPolicy.from_code(config.get("policy", "S"), seed=seed)
        lab_seeds = _parse_seeds(str(config.get("labeled_seeds", "0..3")))
        unl_seeds = _parse_seeds(str(config.get("unlabeled_seeds", "100..101")))
    except ValueError as exc:
        raise CLIError("config", str(exc)) from exc
    backend = dict(config.get("backend", {}))
    if backend.pop("teacher", "oracle") != "oracle" or backend.pop("student", "reference") != "reference":
        raise CLIError("config", "only the 'oracle' teacher and 'reference' student backends are bundled")
    if backend.pop("generator", "procedural") != "procedural":
        raise CLIError("config", "only the 'procedural' generator backend is bundled")
    labeled = _sim_pool(sim_cfg, lab_seeds, "labeled")
    unlabeled = _sim_pool(sim_cfg, unl_seeds, "unlabeled")
    teacher = OracleSegmentor({s.key: s.scene for s in unlabeled}, q=float(backend.pop("q", 0.0)),
                              jitter=int(backend.pop("jitter", 0)), seed=seed)
    if backend:
        raise CLIError("config", f"unknown backend keys: {sorted(backend)}")
    student = ReferenceStudent(seed)
    teacher.set_weights(student.weights())
    thr = config.get("category_thresholds")
    cfg = SSLConfig(schedule=sched, loss_weights=weights, policy=policy,
                    category_thresholds=tuple(thr) if thr else None,
                    stroke_width=int(config.get("stroke_width", 2)),
                    cache_pseudo_labels=bool(config.get("cache_pseudo_labels", False)))
    loop = TrainLoop(teacher, student, procedural_generator(), labeled, unlabeled, cfg, seed)
    return loop, int(config.get("rounds", 20))


def cmd_train_loop(args) -> None:
    config = _read_json(args.config)
    loop, rounds = build_train_loop(config, args.seed)
    if args.rounds is not None:
        rounds = args.rounds
    out = Path(args.out) if args.out else None
    if out:
        out.parent.mkdir(parents=True, exist_ok=True)
    sink = open(out, "a", encoding="utf-8") if out else sys.stdout
    try:
        for report in loop.rounds(rounds):
            sink.write(json.dumps(_round(report.to_dict()), sort_keys=False) + "\n")
            sink.flush()
    finally:
        if out:
            sink.close()


def cmd_export_coco(args) -> None:
    m = load_manifest(args.manifest, check_files=False)
    images, anns = [], []
    for img_id, s in enumerate(m.scenes, start=1):
        images.append({"id": img_id, "file_name": s.image_path, "width": s.width, "height": s.height})
        for i, mask in enumerate(s.instances):
            b = bbox_of(mask)
            rec = {"id": len(anns) + 1, "image_id": img_id,
                   "category_id": int(s.categories[i]) if s.categories is not None else 1,
                   "segmentation": to_coco_rle(mask), "area": mask.area,
                   "bbox": [b.x, b.y, b.w, b.h], "iscrowd": 0,
                   "source_instance_id": mask.instance_id}
            if s.scores is not None:
                rec["score"] = float(s.scores[i])
            anns.append(rec)
    cats = [{"id": c, "name": f"organoid-{c}"} for c in range(1, 5)]
    _emit(_dump({"images": images, "annotations": anns, "categories": cats}, indent=None), args.out)


# -- parser ---------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="plu-forge", description="Pseudo-label unmixing and contour synthesis toolkit")
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    s = sub.add_parser("simulate", help="render simulator scenes and a ground-truth manifest")
    s.add_argument("--config")
    s.add_argument("--seed", type=int)
    s.add_argument("--seeds")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("pseudo-gen", help="oracle teacher predictions, thresholded")
    s.add_argument("--gt", required=True)
    s.add_argument("--q", type=float, default=0.0)
    s.add_argument("--jitter", type=int, default=0)
    s.add_argument("--theta-box", type=float, default=0.7)
    s.add_argument("--theta-p", type=float, default=0.5)
    s.add_argument("--seed", type=int, required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_pseudo_gen)

    s = sub.add_parser("plu-targets", help="judgment samples and decomposition targets")
    s.add_argument("--gt", required=True)
    s.add_argument("--K", type=int, default=MAX_INSTANCES)
    s.add_argument("--out")
    s.set_defaults(func=cmd_plu_targets)

    s = sub.add_parser("plu-apply", help="unmix pseudo-labels with the oracle backends")
    s.add_argument("--pseudo", required=True)
    s.add_argument("--registry", required=True)
    s.add_argument("--K", type=int, default=MAX_INSTANCES)
    s.add_argument("--judge-threshold", type=float, default=0.5)
    s.add_argument("--exist-threshold", type=float, default=0.5)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_plu_apply)

    s = sub.add_parser("contours", help="categorized contour images")
    s.add_argument("--manifest", required=True)
    s.add_argument("--thresholds")
    s.add_argument("--stroke-width", type=int, default=2)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_contours)

    s = sub.add_parser("augment", help="instance-level augmentation of a manifest")
    s.add_argument("--manifest", required=True)
    s.add_argument("--policy", required=True)
    s.add_argument("--seed", type=int, required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_augment)

    s = sub.add_parser("synth", help="synthesize images from manifest contours")
    s.add_argument("--manifest", required=True)
    s.add_argument("--thresholds")
    s.add_argument("--stroke-width", type=int, default=2)
    s.add_argument("--seed", type=int, required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("fid", help="FID between two image directories or feature dumps")
    s.add_argument("a")
    s.add_argument("b")
    s.add_argument("--baseline")
    s.add_argument("--out")
    s.set_defaults(func=cmd_fid)

    s = sub.add_parser("eval", help="segmentation metrics of predictions against ground truth")
    s.add_argument("--pred", required=True)
    s.add_argument("--gt", required=True)
    s.add_argument("--subset", choices=["severe-overlap"])
    s.add_argument("--iou", type=float, default=0.5)
    s.add_argument("--out")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("loss-eval", help="evaluate loss components from a JSON case file")
    s.add_argument("--cases", required=True)
    s.add_argument("--out")
    s.set_defaults(func=cmd_loss_eval)

    s = sub.add_parser("train-loop", help="run training rounds with the bundled backends")
    s.add_argument("--config", required=True)
    s.add_argument("--seed", type=int, required=True)
    s.add_argument("--rounds", type=int)
    s.add_argument("--out")
    s.set_defaults(func=cmd_train_loop)

    s = sub.add_parser("export-coco", help="convert a manifest to COCO annotations")
    s.add_argument("--manifest", required=True)
    s.add_argument("--out")
    s.set_defaults(func=cmd_export_coco)
    return p


def _one_line(msg) -> str:
    return " ".join(str(msg).split())


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        args.func(args)
    except CLIError as exc:
        print(f"ERR:{exc.code}:{_one_line(exc)}", file=sys.stderr)
        return exc.exit_code
    except FormatError as exc:
        print(f"ERR:{exc.code}:{_one_line(exc)}", file=sys.stderr)
        return 1
    except Exception as exc:  # anything past validation is a pipeline failure
        logger.debug("pipeline failure", exc_info=True)
        print(f"ERR:pipeline:{_one_line(f'{type(exc).__name__}: {exc}')}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
