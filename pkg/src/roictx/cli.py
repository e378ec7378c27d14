"""Command-line front end.

Three file formats total: FTEN for tensors, the RoI CSV for box lists,
and JSON for structured reports.  Identical invocations on identical
inputs produce byte-identical outputs, and `--jobs N` parallelism never
changes output order or content.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from . import attacks, gradcheck as gc, losses, mining, roi_ops, synth
from .errors import FormatError, RoictxError, ShapeError
from .geometry import Box, generate_anchors, load_roi_csv, nms, save_roi_csv
from .tensor import load_ften, save_ften


def _default_jobs() -> int:
    try:
        return max(1, int(os.environ.get("ROICTX_JOBS", "1")))
    except ValueError:
        return 1


def _pmap(fn, items, jobs):
    if jobs <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=jobs) as ex:
        return list(ex.map(fn, items))


def _boxes(path) -> list[Box]:
    return [row[0] for row in load_roi_csv(path)]


def _parse_floats(text, n, what):
    parts = [p for p in text.split(",") if p != ""]
    if n is not None and len(parts) != n:
        raise FormatError(f"{what} needs {n} comma-separated values, got {len(parts)}")
    try:
        return [float(p) for p in parts]
    except ValueError as exc:
        raise FormatError(f"{what}: non-numeric value in {text!r}") from exc


def _write_json(path, payload) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _load_scorer(path, d, ph, pw) -> mining.ContextScorer:
    """Scorer vector format: rank-1 FTEN of length D*ph*pw + 1, bias last."""
    if path is None:
        return mining.ContextScorer.zeros(d, ph, pw)
    vec = load_ften(path)
    if vec.ndim != 1 or vec.shape[0] != d * ph * pw + 1:
        raise ShapeError(
            f"scorer vector must have length D*ph*pw+1 = {d * ph * pw + 1}, "
            f"got shape {vec.shape}")
    return mining.ContextScorer(vec[:-1].copy(), float(vec[-1]))


def _cmd_roipool(args) -> int:
    F = load_ften(args.features)
    boxes = _boxes(args.rois)
    maps = _pmap(lambda r: roi_ops.roi_pool(F, r, args.ph, args.pw).data,
                 boxes, args.jobs)
    save_ften(args.out, np.stack(maps))
    return 0


def _cmd_roialign(args) -> int:
    F = load_ften(args.features)
    boxes = _boxes(args.rois)
    maps = _pmap(lambda r: roi_ops.roi_align(F, r, args.ph, args.pw,
                                             args.samples).data,
                 boxes, args.jobs)
    save_ften(args.out, np.stack(maps))
    return 0


def _cmd_ctxmine(args) -> int:
    F = load_ften(args.features)
    boxes = _boxes(args.rois)
    scorer = _load_scorer(args.scorer, F.shape[0], args.ph, args.pw)
    config = mining.MiningConfig(ph=args.ph, pw=args.pw, backbone=args.backbone,
                                 samples_per_bin=args.samples)
    mined = mining.mine_many(F, boxes, scorer, config, jobs=args.jobs)
    save_ften(args.out, np.stack([m.feature for m in mined]))
    if args.report:
        _write_json(args.report, [mining.mined_to_record(m) for m in mined])
    return 0


def _cmd_variant(args) -> int:
    F = load_ften(args.features)
    boxes = _boxes(args.rois)
    config = mining.MiningConfig(ph=args.ph, pw=args.pw, backbone=args.backbone,
                                 samples_per_bin=args.samples,
                                 local_scale=args.local_scale)
    feats = _pmap(lambda r: mining.fixed_context_variant(F, r, args.variant,
                                                         config),
                  boxes, args.jobs)
    save_ften(args.out, np.stack(feats))
    return 0


def _cmd_enumerate(args) -> int:
    cell = Box(*_parse_floats(args.cell, 4, "--cell"))
    bounds = None
    if args.bounds is not None:
        w, h = _parse_floats(args.bounds, 2, "--bounds")
        bounds = (w, h)
    grid = mining.CandidateGridSpec(anchor_iou_min=args.min_iou,
                                    short_edge_frac=args.short_edge_frac)
    pool = mining.candidate_pool_for_cell(cell, grid, bounds)
    if pool is None:
        print("error: cell anchor falls outside the bounds (empty pool)",
              file=sys.stderr)
        return 1
    save_roi_csv(args.out, pool.candidates)
    print(f"pool_size={len(pool.candidates)}")
    return 0


def _cmd_nms(args) -> int:
    rows = load_roi_csv(args.boxes)
    if any(len(r) < 2 for r in rows):
        raise FormatError(f"{args.boxes}: every row needs a score for nms")
    kept = nms([(r[0], r[1]) for r in rows], args.iou_threshold)
    save_roi_csv(args.out, [rows[i] for i in kept])
    return 0


def _cmd_anchors(args) -> int:
    scales = _parse_floats(args.scales, None, "--scales")
    ratios = _parse_floats(args.ratios, None, "--ratios")
    out = generate_anchors(args.height, args.width, scales, ratios, args.stride)
    save_roi_csv(args.out, out)
    return 0


def _cmd_attack(args) -> int:
    patch = load_ften(args.patch) if args.patch else None
    if args.manifest:
        with open(args.manifest, "r", encoding="utf-8") as fh:
            entries = json.load(fh)
        root = attacks.SplitMix64(args.seed)
        for i, entry in enumerate(entries):
            image = load_ften(entry["in"])
            boxes = _boxes(entry["boxes"])
            seed_i = root.split(i).next_u64()
            save_ften(entry["out"],
                      attacks.apply_patches(image, boxes, args.kind, seed_i, patch))
        return 0
    if not (args.infile and args.out and args.boxes):
        raise FormatError("attack needs --in/--boxes/--out (or --manifest)")
    image = load_ften(args.infile)
    boxes = _boxes(args.boxes)
    save_ften(args.out,
              attacks.apply_patches(image, boxes, args.kind, args.seed, patch))
    return 0


def _gradcheck_instance(op: str, seed: int):
    """Seeded random instance of one differentiable operator: returns
    (f, x, analytic_grad, records_fn)."""
    rng = np.random.default_rng([seed, 0x6d5a])
    if op == "roipool":
        F = rng.normal(0.0, 3.0, (2, 12, 12)).astype(np.float32)
        r = Box(1.3, 2.1, 9.6, 10.2)
        w = rng.normal(0.0, 1.0, (2, 5, 5)).astype(np.float32)
        roi_map = roi_ops.roi_pool(F, r, 5, 5)
        grad = roi_ops.roi_pool_backward(w, roi_map, F.shape)

        def f(x):
            return float((w.astype(np.float64)
                          * roi_ops.roi_pool(x, r, 5, 5).data).sum())

        def records(x):
            return roi_ops.roi_pool(x, r, 5, 5).argmax.tobytes()

        return f, F, grad, records
    if op == "roialign":
        F = rng.normal(0.0, 3.0, (2, 12, 12)).astype(np.float32)
        r = Box(1.7, 0.9, 10.4, 9.8)
        w = rng.normal(0.0, 1.0, (2, 5, 5)).astype(np.float32)
        roi_map = roi_ops.roi_align(F, r, 5, 5, 2)
        grad = roi_ops.roi_align_backward(w, roi_map, F.shape)

        def f(x):
            return float((w.astype(np.float64)
                          * roi_ops.roi_align(x, r, 5, 5, 2).data).sum())

        return f, F, grad, None
    if op == "ctxmine":
        F = rng.normal(0.0, 3.0, (2, 24, 24)).astype(np.float32)
        r = Box(9.2, 8.7, 14.9, 15.3)
        config = mining.MiningConfig(ph=3, pw=3)
        scorer = mining.ContextScorer(
            rng.normal(0.0, 1.0, 2 * 9).astype(np.float32), 0.1)
        w = rng.normal(0.0, 1.0, (18, 3, 3)).astype(np.float32)
        mined = mining.mine_context(F, r, scorer, config)
        grad, _ = mining.mine_context_backward(w, mined, F.shape, scorer)

        def f(x):
            m = mining.mine_context(x, r, scorer, config)
            return float((w.astype(np.float64) * m.feature).sum())

        def records(x):
            return mining.selection_indices(mining.mine_context(x, r, scorer,
                                                                config))

        return f, F, grad, records
    if op == "loss":
        n, classes = 6, 5
        labels = [int(v) for v in rng.integers(0, classes, n)]
        logits = rng.normal(0.0, 2.0, (n, classes)).astype(np.float32)
        t_vals = rng.normal(0.0, 0.6, (n, 4))
        ts_vals = rng.normal(0.0, 0.6, (n, 4))
        lam, n_cls, n_reg = 1.5, n, n

        from .geometry import RegressionTarget

        def build(x):
            x = x.reshape(n, classes + 4)
            samples = []
            for j in range(n):
                t = RegressionTarget(*[float(v) for v in x[j, classes:]])
                ts = (RegressionTarget(*[float(v) for v in ts_vals[j]])
                      if labels[j] >= 1 else None)
                samples.append(losses.LabeledSample(
                    labels[j], x[j, :classes],
                    t=t if labels[j] >= 1 else None, t_star=ts))
            return samples

        x0 = np.concatenate([logits, t_vals.astype(np.float32)],
                            axis=1).astype(np.float32)

        def f(x):
            return float(losses.multitask_loss(build(x), lam, n_cls, n_reg)[0])

        grads = losses.loss_backward(build(x0), lam, n_cls, n_reg)
        analytic = np.zeros_like(x0)
        for j, (gl, gt) in enumerate(grads):
            analytic[j, :classes] = gl
            if gt is not None:
                analytic[j, classes:] = gt
        return f, x0, analytic, None
    raise FormatError(f"unknown gradcheck op {op!r}")


def _cmd_gradcheck(args) -> int:
    f, x, grad, records = _gradcheck_instance(args.op, args.seed)
    report = gc.check(f, x, grad, h=args.h, probes=args.probes,
                      records_fn=records, seed=args.seed)
    payload = json.loads(report.to_json())
    payload["op"] = args.op
    payload["seed"] = args.seed
    _write_json(args.out, payload)
    return 0


def _cmd_synth_demo(args) -> int:
    scenes = synth.generate(args.seed, args.scenes)
    result = synth.train_head(scenes, args.variant, epochs=args.epochs,
                              lr=args.lr, seed=args.seed)
    _write_json(args.out, {
        "variant": args.variant,
        "seed": args.seed,
        "scenes": args.scenes,
        "epochs": args.epochs,
        "lr": args.lr,
        "accuracy": result.accuracy,
        "overlap_rate": result.overlap_rate,
        "loss_trace": result.trace,
    })
    return 0


def _add_io(sp, rois=True):
    sp.add_argument("--features", required=True, help="input FTEN feature map")
    if rois:
        sp.add_argument("--rois", required=True, help="RoI CSV file")
    sp.add_argument("--out", required=True, help="output FTEN path")
    sp.add_argument("--ph", type=int, default=7)
    sp.add_argument("--pw", type=int, default=7)
    sp.add_argument("--jobs", type=int, default=_default_jobs(),
                    help="parallel workers (output order is unaffected)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="roictx",
        description="Context-mining RoI operators: pooling, mining, attacks, "
                    "and the synthetic demo.")
    sub = parser.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("roipool", help="max-pool RoIs to fixed grids")
    _add_io(sp)
    sp.set_defaults(func=_cmd_roipool)

    sp = sub.add_parser("roialign", help="bilinear-sample RoIs to fixed grids")
    _add_io(sp)
    sp.add_argument("--samples", type=int, default=2)
    sp.set_defaults(func=_cmd_roialign)

    sp = sub.add_parser("ctxmine", help="mine 8 surrounding context RoIs per RoI")
    _add_io(sp)
    sp.add_argument("--scorer", help="FTEN scorer vector (D*ph*pw weights + bias);"
                                     " defaults to zeros, which selects every"
                                     " cell's anchor by the tie rule")
    sp.add_argument("--backbone", choices=("pool", "align"), default="pool")
    sp.add_argument("--samples", type=int, default=2)
    sp.add_argument("--report", help="optional JSON selection report")
    sp.set_defaults(func=_cmd_ctxmine)

    sp = sub.add_parser("variant", help="fixed context layouts for comparison")
    _add_io(sp)
    sp.add_argument("--variant", choices=mining.VARIANTS, required=True)
    sp.add_argument("--backbone", choices=("pool", "align"), default="pool")
    sp.add_argument("--samples", type=int, default=2)
    sp.add_argument("--local-scale", type=float, default=1.5)
    sp.set_defaults(func=_cmd_variant)

    sp = sub.add_parser("enumerate", help="list one cell's candidate pool")
    sp.add_argument("--cell", required=True, help="x1,y1,x2,y2")
    sp.add_argument("--bounds", help="map bounds W,H (candidates clipped)")
    sp.add_argument("--min-iou", type=float, default=0.3)
    sp.add_argument("--short-edge-frac", type=float, default=1.0 / 3.0)
    sp.add_argument("--out", required=True, help="output CSV path")
    sp.set_defaults(func=_cmd_enumerate)

    sp = sub.add_parser("nms", help="greedy non-maximum suppression")
    sp.add_argument("--boxes", required=True, help="RoI CSV with scores")
    sp.add_argument("--iou-threshold", type=float, default=0.7)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=_cmd_nms)

    sp = sub.add_parser("anchors", help="tile translation-invariant anchors")
    sp.add_argument("--height", type=int, required=True)
    sp.add_argument("--width", type=int, required=True)
    sp.add_argument("--scales", default="8,16,32")
    sp.add_argument("--ratios", default="0.5,1,2")
    sp.add_argument("--stride", type=float, default=16.0)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=_cmd_anchors)

    sp = sub.add_parser("attack", help="apply center patches to images")
    sp.add_argument("--kind", choices=attacks.KINDS, required=True)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--boxes", help="RoI CSV of ground-truth boxes")
    sp.add_argument("--in", dest="infile", help="input FTEN image")
    sp.add_argument("--out", help="output FTEN image")
    sp.add_argument("--patch", help="FTEN patch tensor for kind=adversarial")
    sp.add_argument("--manifest", help="JSON list of {in, boxes, out} entries")
    sp.set_defaults(func=_cmd_attack)

    sp = sub.add_parser("gradcheck", help="finite-difference check an operator")
    sp.add_argument("--op", choices=("roipool", "roialign", "ctxmine", "loss"),
                    required=True)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--h", type=float, default=1e-2)
    sp.add_argument("--probes", type=int, default=150)
    sp.add_argument("--out", required=True, help="JSON report path")
    sp.set_defaults(func=_cmd_gradcheck)

    sp = sub.add_parser("synth-demo", help="train on the synthetic context task")
    sp.add_argument("--variant", choices=synth.TRAIN_VARIANTS, required=True)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--epochs", type=int, default=30)
    sp.add_argument("--scenes", type=int, default=300)
    sp.add_argument("--lr", type=float, default=0.05)
    sp.add_argument("--out", required=True, help="JSON report path")
    sp.set_defaults(func=_cmd_synth_demo)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (RoictxError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
