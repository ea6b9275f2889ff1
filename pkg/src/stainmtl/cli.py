"""Command-line interface: ``stainmtl [global options] <command> ...``.

Exit codes: 0 success, 1 I/O error, 2 invalid input or domain failure,
3 numerical failure. Errors are also written to stderr as one JSON object.
"""

import argparse
import csv
import json
import logging
import os
import shutil
import sys
from concurrent.futures import ThreadPoolExecutor

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__
from ._random import derive_seed, make_rng
from .augment import MixturePolicy, PerturbConfig, StatPrior, fit_stat_prior, geometric_augment, mixture_augment
from .dataio import read_image, read_manifest, read_mask, stratified_kfold, write_image, write_mask
from .exceptions import FormatError, InsufficientTissue, InvalidInput, NotFound, StainError
from .metrics import evaluate_dataset, threshold_logits, tta_predict
from .mtl import (
    NonFiniteLoss,
    PixelBatch,
    ToyModelParams,
    finite_diff_check,
    init_params,
    pixel_batch,
    predict_logit_map,
    train,
)
from .stainsep import SeparationConfig, StainProfile, density_percentile, normalize_spcn, stain_densities
from .synthetic import toy_task

log = logging.getLogger("stainmtl")

EXIT_OK, EXIT_IO, EXIT_INVALID, EXIT_NUMERIC = 0, 1, 2, 3


class CommandFailed(Exception):
    """Raised by a command to exit with a given code and error payload."""

    def __init__(self, code, payload):
        self.code = code
        self.payload = payload
        super().__init__(payload.get("message", ""))


def _write_json(obj, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _sep_config(args, seed=None):
    return SeparationConfig(
        n_stains=args.stains,
        sparsity=args.sparsity,
        max_iter=args.max_iter,
        tol=args.tol,
        tissue_threshold=args.tissue_threshold,
        seed=args.seed if seed is None else seed,
    )


def _map(args, fn, items):
    """Apply ``fn`` to ``items`` on ``--threads`` workers, results in input order."""
    items = list(items)
    if args.threads <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=args.threads) as pool:
        return list(pool.map(fn, items))


def _error_record(exc):
    return {"error": type(exc).__name__, "message": str(exc)}


# -- commands ----------------------------------------------------------------


def cmd_separate(args):
    img = read_image(args.image)
    W, H, sep = stain_densities(img, _sep_config(args))
    p99 = np.maximum(density_percentile(H), 1e-6)
    summary = {
        "p99": p99.tolist(),
        "mean": H.mean(axis=1).tolist(),
        "max": H.max(axis=1).tolist(),
    }
    doc = StainProfile(W, p99).to_dict()
    doc.update(
        {
            "density_summary": summary,
            "n_iter": sep.n_iter,
            "converged": sep.converged,
            "degenerate": sep.degenerate,
            "tissue_fraction": float(sep.tissue.mean()),
        }
    )
    _write_json(doc, os.path.join(args.output, "stains.json"))
    h, w = img.shape[:2]
    for i, row in enumerate(H):
        scaled = np.clip(np.rint(255.0 * row / p99[i]), 0, 255).astype(np.uint8)
        rgb = np.repeat(scaled.reshape(h, w, 1), 3, axis=2)
        write_image(rgb, os.path.join(args.output, f"density_{i}.png"))
    print(f"stains={W.shape[1]} n_iter={sep.n_iter} degenerate={str(sep.degenerate).lower()}")
    return EXIT_OK


def _inputs(args):
    if args.manifest:
        return [(row.id, row.image_path) for row in read_manifest(args.manifest)]
    return [(os.path.splitext(os.path.basename(p))[0], p) for p in args.images]


def _batch_exit(results, what):
    n_ok = sum(1 for r in results if r["status"] == "ok")
    if n_ok == 0:
        raise CommandFailed(
            EXIT_INVALID, {"error": "NoSuccess", "message": f"no {what} succeeded", "n": len(results)}
        )
    return EXIT_OK


def cmd_normalize(args):
    target = StainProfile.from_json(args.target)
    cfg = _sep_config(args)
    inputs = _inputs(args)

    def one(item):
        _, path = item
        name = os.path.splitext(os.path.basename(path))[0] + ".png"
        try:
            out = normalize_spcn(read_image(path), target, cfg)
            write_image(out, os.path.join(args.output, name))
            return {"input": os.path.basename(path), "output": name, "status": "ok"}
        except (StainError, OSError) as exc:
            return {"input": os.path.basename(path), "status": "failed", **_error_record(exc)}

    results = _map(args, one, inputs)
    failed = sum(r["status"] != "ok" for r in results)
    _write_json(
        {"images": results, "n_ok": len(results) - failed, "n_failed": failed},
        os.path.join(args.output, "summary.json"),
    )
    print(f"normalized={len(results) - failed} failed={failed}")
    return _batch_exit(results, "normalization")


def cmd_augment(args):
    policy = MixturePolicy(*args.policy)
    prior = StatPrior.from_json(args.prior) if args.prior else None
    if policy.p_randstainna > 0 and prior is None:
        raise InvalidInput("--prior is required when the RandStainNA probability is positive")
    if args.n < 1:
        raise InvalidInput("--n must be at least 1")
    rows = list(read_manifest(args.manifest))
    pcfg = PerturbConfig(scale_sigma=args.sigma)
    img_dir = os.path.join(args.output, "images")
    mask_dir = os.path.join(args.output, "masks")
    os.makedirs(img_dir, exist_ok=True)
    os.makedirs(mask_dir, exist_ok=True)

    def one(item):
        index, row = item
        records = []
        try:
            image = read_image(row.image_path)
            mask = read_mask(row.mask_path) if row.mask_path else None
        except (StainError, OSError) as exc:
            return [{"id": row.id, "variant": v, "status": "failed", **_error_record(exc)} for v in range(args.n)]
        for v in range(args.n):
            seed = derive_seed(args.seed, index, v)
            rng = make_rng(seed)
            sample = mixture_augment(
                image, mask, policy, prior, _sep_config(args, seed), pcfg, rng
            )
            out_img, out_mask = sample.image, sample.mask
            flipped = False
            if args.flips:
                placeholder = out_mask if out_mask is not None else np.zeros(image.shape[:2], bool)
                flipped_img, flipped_mask = geometric_augment(out_img, placeholder, rng)
                flipped = not np.array_equal(flipped_img, out_img) or not np.array_equal(
                    flipped_mask, placeholder
                )
                out_img = flipped_img
                out_mask = flipped_mask if out_mask is not None else None
            stem = f"{row.id}_v{v}"
            if sample.applied == "identity" and not flipped:
                ext = os.path.splitext(row.image_path)[1] or ".png"
                shutil.copyfile(row.image_path, os.path.join(img_dir, stem + ext))
            else:
                write_image(out_img, os.path.join(img_dir, stem + ".png"))
            if row.mask_path:
                if flipped:
                    write_mask(out_mask, os.path.join(mask_dir, stem + ".png"))
                else:
                    ext = os.path.splitext(row.mask_path)[1] or ".png"
                    shutil.copyfile(row.mask_path, os.path.join(mask_dir, stem + ext))
            records.append(
                {"id": row.id, "variant": v, "branch": sample.applied, "seed": seed, "status": "ok"}
            )
        return records

    results = [r for recs in _map(args, one, enumerate(rows)) for r in recs]
    with open(os.path.join(args.output, "provenance.csv"), "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "variant", "branch", "seed"])
        for r in results:
            if r["status"] == "ok":
                writer.writerow([r["id"], r["variant"], r["branch"], r["seed"]])
    failures = [r for r in results if r["status"] != "ok"]
    _write_json(
        {"n_ok": len(results) - len(failures), "n_failed": len(failures), "failures": failures},
        os.path.join(args.output, "summary.json"),
    )
    counts = {b: sum(r.get("branch") == b for r in results) for b in ("identity", "randstainna", "stain_sep")}
    print(" ".join(f"{k}={v}" for k, v in counts.items()) + f" failed={len(failures)}")
    return _batch_exit(results, "augmentation")


def cmd_fit_prior(args):
    rows = list(read_manifest(args.manifest))
    if not rows:
        raise InvalidInput("manifest has no rows")
    prior = fit_stat_prior(read_image(row.image_path) for row in rows)
    prior.to_json(os.path.join(args.output, "prior.json"))
    print(f"n_images={prior.n_images}")
    return EXIT_OK


def cmd_evaluate(args):
    rows = list(read_manifest(args.manifest))
    params = ToyModelParams.from_json(args.model) if args.model else None

    def predict(img):
        return predict_logit_map(params, img)

    def one(row):
        groups = {"scanner": row.scanner}
        if row.fold is not None:
            groups["fold"] = row.fold
        try:
            if not row.mask_path:
                raise InvalidInput("row has no mask_path (ground truth)")
            gt = read_mask(row.mask_path)
            if params is not None:
                img = read_image(row.image_path)
                logits = tta_predict(predict, img) if args.tta == "on" else predict(img)
                pred = threshold_logits(logits, args.tau)
            else:
                pred_path = row.extra.get("pred_path")
                if not pred_path:
                    raise InvalidInput("row has no pred_path and no --model was given")
                pred = read_mask(pred_path)
        except (StainError, OSError) as exc:
            return (row.id, None, None, groups, f"{type(exc).__name__}: {exc}")
        return (row.id, pred, gt, groups)

    if not rows:
        raise InvalidInput("manifest has no rows")
    report = evaluate_dataset(_map(args, one, rows))
    report.to_json(os.path.join(args.output, "report.json"))
    report.to_csv(os.path.join(args.output, "report.csv"))
    if not report.aggregate:
        raise CommandFailed(EXIT_INVALID, {"error": "NoSuccess", "message": "no pair could be scored"})
    agg = report.aggregate
    print(f"cosas={agg['cosas']['mean']:.3f} dice={agg['dice']['mean']:.3f} iou={agg['iou']['mean']:.3f}")
    return EXIT_OK


def _toy_batches(args):
    if not args.manifest:
        return [toy_task(random_state=make_rng(args.seed, 0), window=args.window)]
    batches = []
    for row in read_manifest(args.manifest):
        if not row.mask_path:
            raise InvalidInput(f"row {row.id!r} has no mask_path")
        batches.append(pixel_batch(read_image(row.image_path), read_mask(row.mask_path), args.window))
    if not batches:
        raise InvalidInput("manifest has no rows")
    return batches


def cmd_train_toy(args):
    batches = _toy_batches(args)
    d = batches[0].features.shape[1]
    params = init_params(d, args.stains, 3, args.init_scale, make_rng(args.seed, 1), window=args.window)
    params, trace = train(params, batches, args.alpha, args.lr, args.steps, seed=args.seed)
    params.to_json(os.path.join(args.output, "params.json"))
    with open(os.path.join(args.output, "trace.csv"), "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "recon", "seg", "total"])
        for rec in trace:
            writer.writerow([rec.step, repr(rec.recon), repr(rec.seg), repr(rec.total)])
    print(f"initial_total={trace[0].total:.6f} final_total={trace[-1].total:.6f}")
    return EXIT_OK


def cmd_gradcheck(args):
    rng = make_rng(args.seed)
    if args.params:
        params = ToyModelParams.from_json(args.params)
    else:
        params = init_params(args.features, args.stains, 3, 0.5, rng)
    n = args.pixels
    batch = PixelBatch(
        rng.normal(size=(n, params.d)), rng.uniform(0.0, 1.5, (n, params.m)), rng.integers(0, 2, n)
    )
    err = finite_diff_check(params, batch, args.alpha, args.epsilon)
    _write_json(
        {"max_rel_error": err, "alpha": args.alpha, "epsilon": args.epsilon, "n_params": int(params.ravel().size)},
        os.path.join(args.output, "gradcheck.json"),
    )
    print(f"max_rel_error={err:.3e}")
    if not err < 1e-5:
        raise CommandFailed(
            EXIT_NUMERIC, {"error": "GradientMismatch", "message": f"max relative error {err:.3e}", "value": err}
        )
    return EXIT_OK


def cmd_split_folds(args):
    folds = stratified_kfold(read_manifest(args.manifest), args.k, args.seed, by=args.by)
    folds.to_json(os.path.join(args.output, "folds.json"))
    sizes = [len(f) for f in folds.folds()]
    print("fold_sizes=" + ",".join(map(str, sizes)))
    return EXIT_OK


# -- parser --------------------------------------------------------------------


def _add_separation_flags(p):
    p.add_argument("--stains", type=int, default=2, help="number of stains r")
    p.add_argument("--sparsity", type=float, default=SeparationConfig.sparsity)
    p.add_argument("--max-iter", type=int, default=SeparationConfig.max_iter)
    p.add_argument("--tol", type=float, default=SeparationConfig.tol)
    p.add_argument("--tissue-threshold", type=float, default=SeparationConfig.tissue_threshold)


def build_parser():
    parser = argparse.ArgumentParser(prog="stainmtl", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--seed", type=int, default=42)
    parser.add_argument("--threads", type=int, default=os.cpu_count() or 1)
    parser.add_argument("--output", default="out", help="output directory (created if missing)")
    parser.add_argument("--log-level", default="WARNING", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("separate", help="estimate stain matrix and densities of one image")
    p.add_argument("image")
    _add_separation_flags(p)
    p.set_defaults(func=cmd_separate)

    p = sub.add_parser("normalize", help="SPCN-normalise images towards a target profile")
    p.add_argument("images", nargs="*")
    p.add_argument("--manifest")
    p.add_argument("--target", required=True, help="stain profile JSON")
    _add_separation_flags(p)
    p.set_defaults(func=cmd_normalize)

    p = sub.add_parser("augment", help="mixture-of-stain augmentation over a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--policy", type=float, nargs=2, default=[0.25, 0.25], metavar=("P_RANDSTAINNA", "P_STAIN_SEP"))
    p.add_argument("--prior", help="StatPrior JSON from fit-prior")
    p.add_argument("--n", type=int, default=1, help="variants per input")
    p.add_argument("--sigma", type=float, default=PerturbConfig.scale_sigma)
    p.add_argument("--flips", action="store_true", help="also apply random horizontal/vertical flips")
    _add_separation_flags(p)
    p.set_defaults(func=cmd_augment)

    p = sub.add_parser("fit-prior", help="fit RandStainNA LAB statistic priors")
    p.add_argument("--manifest", required=True)
    p.set_defaults(func=cmd_fit_prior)

    p = sub.add_parser("evaluate", help="score predicted masks (Dice, IoU, COSAS)")
    p.add_argument("--manifest", required=True)
    p.add_argument("--model", help="toy model params JSON; predictions are made from images")
    p.add_argument("--tta", choices=["on", "off"], default="off")
    p.add_argument("--tau", type=float, default=0.0, help="logit threshold")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("train-toy", help="train the toy multi-task model")
    p.add_argument("--manifest", help="images with masks; a synthetic task is used if omitted")
    p.add_argument("--alpha", type=float, default=0.3)
    p.add_argument("--lr", type=float, default=0.5)
    p.add_argument("--steps", type=int, default=500)
    p.add_argument("--stains", type=int, default=2)
    p.add_argument("--window", type=int, default=0, help="neighbourhood radius for features")
    p.add_argument("--init-scale", type=float, default=0.1)
    p.set_defaults(func=cmd_train_toy)

    p = sub.add_parser("gradcheck", help="compare analytic gradients with finite differences")
    p.add_argument("--params", help="model params JSON (random if omitted)")
    p.add_argument("--alpha", type=float, default=0.3)
    p.add_argument("--epsilon", type=float, default=1e-5)
    p.add_argument("--pixels", type=int, default=16)
    p.add_argument("--features", type=int, default=4)
    p.add_argument("--stains", type=int, default=2)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("split-folds", help="stratified k-fold assignment")
    p.add_argument("--manifest", required=True)
    p.add_argument("--k", type=int, default=4)
    p.add_argument("--by", default="scanner", help="stratification column")
    p.set_defaults(func=cmd_split_folds)
    return parser


def _exit_code(exc):
    if isinstance(exc, NonFiniteLoss):
        return EXIT_NUMERIC
    if isinstance(exc, (InvalidInput, InsufficientTissue, FormatError)):
        return EXIT_INVALID
    if isinstance(exc, (NotFound, OSError)):
        return EXIT_IO
    return EXIT_INVALID


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=args.log_level, format="%(levelname)s %(name)s: %(message)s")
    try:
        os.makedirs(args.output, exist_ok=True)
        with threadpool_limits(limits=1):
            return args.func(args)
    except CommandFailed as exc:
        print(json.dumps(exc.payload, sort_keys=True), file=sys.stderr)
        return exc.code
    except (StainError, OSError) as exc:
        payload = _error_record(exc)
        for attr in ("step", "line", "id", "column", "n_tissue"):
            if getattr(exc, attr, None) is not None:
                payload[attr] = getattr(exc, attr)
        print(json.dumps(payload, sort_keys=True), file=sys.stderr)
        return _exit_code(exc)
