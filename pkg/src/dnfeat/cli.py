"""Command-line entry point: ``dnfeat <command> [options]``.

Every command reads its defaults from ``--config`` (the same JSON document
``run`` takes) and writes its outputs under ``--out``. Features are cached
in ``--cache``, else ``$DNF_CACHE_DIR``, else ``<out>/cache``.

Exit status: 0 on success, 1 when a step fails, 2 on bad usage.
"""

from __future__ import annotations

import argparse
import logging
import os
import shlex
import sys
from pathlib import Path

import numpy as np

from ._validation import DNFError, ParameterError, check_binary_labels
from .analysis import PCAEmbedding, mean_log_spectrum
from .data import gen_fake_dataset, gen_real_dataset, load_dataset
from .detector import DnfDetector, evaluate
from .dnf import DnfConfig, extract_batch, load_cached_features, resize_to, to_unit_range
from .experiment import CACHE_ENV, load_config, run_experiment
from .formats import read_json, read_tensor, write_json, write_tensor
from .perturb import PerturbationSpec, perturbation_sweep
from .predictor import AnalyticGaussianPredictor, ExternalPredictor, TinyDenoiser
from .schedule import make_linear_schedule, sample_timesteps

log = logging.getLogger("dnfeat")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=None, help="overrides the config seed")
    p.add_argument("--config", type=Path, default=None, help="JSON config supplying defaults")
    p.add_argument("--out", type=Path, required=True, help="output directory")
    p.add_argument("--workers", type=int, default=None, help="worker processes for extraction")
    p.add_argument("--cache", type=Path, default=None, help=f"feature cache (default ${CACHE_ENV} or OUT/cache)")
    p.add_argument("-v", "--verbose", action="store_true")


def _predictor_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--predictor", default=None,
                   help="trained predictor directory, 'analytic' or 'analytic:MU:SIGMA2'")
    p.add_argument("--predictor-cmd", default=None, help="command line of a DNFP peer process")
    p.add_argument("--strategy", choices=["first", "avg", "last"], default=None)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="dnfeat", description="Diffusion noise feature toolkit.")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a synthetic real or generated image set")
    _common(p)
    p.add_argument("--n", type=int, required=True, help="number of images")
    p.add_argument("--kind", choices=["real", "generated"], default="real")
    p.add_argument("--sampler-steps", type=int, default=None)
    _predictor_args(p)

    p = sub.add_parser("train-predictor", help="train the small denoiser on real images")
    _common(p)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--steps", type=int, default=None)

    p = sub.add_parser("extract", help="compute and cache features for a dataset")
    _common(p)
    p.add_argument("--data", type=Path, required=True)
    _predictor_args(p)

    p = sub.add_parser("train-detector", help="train a detector on a dataset's features")
    _common(p)
    p.add_argument("--data", type=Path, required=True, help="training dataset")
    p.add_argument("--val", type=Path, required=True, help="validation dataset")
    p.add_argument("--raw", action="store_true", help="train on pixels instead of features")
    _predictor_args(p)

    p = sub.add_parser("eval", help="score a dataset (or fixed features) with a detector")
    _common(p)
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--data", type=Path, default=None)
    p.add_argument("--features", type=Path, default=None, help="DNFT file of (n, H, W) features")
    p.add_argument("--labels", type=Path, default=None, help="JSON list of 0/1 labels")
    p.add_argument("--raw", action="store_true")
    _predictor_args(p)

    p = sub.add_parser("perturb-sweep", help="evaluate a detector under blur and JPEG")
    _common(p)
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    _predictor_args(p)

    p = sub.add_parser("spectrum", help="mean log-magnitude spectrum per class")
    _common(p)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--raw", action="store_true", help="use pixels instead of features")
    _predictor_args(p)

    p = sub.add_parser("embed", help="PCA embedding of a dataset's features")
    _common(p)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--k", type=int, default=2)
    p.add_argument("--raw", action="store_true")
    _predictor_args(p)

    p = sub.add_parser("run", help="run a configured experiment end to end")
    _common(p)
    return ap


# -- helpers ------------------------------------------------------------------

def _config(args) -> dict:
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.workers is not None:
        overrides["workers"] = args.workers
    return load_config(args.config, overrides)


def _cache(args) -> Path:
    return args.cache or Path(os.environ.get(CACHE_ENV) or args.out / "cache")


def _predictor(args, cfg):
    if args.predictor_cmd and args.predictor:
        raise ParameterError("give either --predictor or --predictor-cmd, not both")
    if args.predictor_cmd:
        return ExternalPredictor(shlex.split(args.predictor_cmd))
    spec = args.predictor
    if spec is None:
        p = cfg["predictor"]
        if p["kind"] == "analytic":
            return AnalyticGaussianPredictor(p["mu"], p["sigma2"])
        if p["kind"] == "external" and p["command"]:
            return ExternalPredictor(p["command"])
        if p["kind"] == "saved" and p["path"]:
            return TinyDenoiser.load(p["path"])
        raise ParameterError("a predictor is required (--predictor or --predictor-cmd)")
    if spec == "analytic" or spec.startswith("analytic:"):
        parts = spec.split(":")[1:]
        if len(parts) not in (0, 2):
            raise ParameterError("analytic predictor spec is 'analytic' or 'analytic:MU:SIGMA2'")
        return AnalyticGaussianPredictor(*map(float, parts)) if parts else AnalyticGaussianPredictor()
    return TinyDenoiser.load(spec)


def _dnf_config(args, cfg, predictor) -> DnfConfig:
    d = cfg["dnf"]
    return DnfConfig(
        predictor=predictor, resolution=cfg["resolution"], n_steps=d["n_steps"],
        timestep_mode=d["timestep_mode"], strategy=args.strategy or d["strategies"][0],
        **cfg["schedule"],
    )


def _features(args, cfg, data_dir):
    """Features (or pixels with ``--raw``), labels and filenames of a dataset."""
    images, labels, names = load_dataset(data_dir)
    if getattr(args, "raw", False):
        res = cfg["resolution"]
        return np.stack([to_unit_range(resize_to(im, res)) for im in images]).astype(np.float32), labels, names
    predictor = _predictor(args, cfg)
    try:
        res = extract_batch(data_dir, _dnf_config(args, cfg, predictor), _cache(args), workers=cfg["workers"])
    finally:
        if isinstance(predictor, ExternalPredictor):
            predictor.close()
    if res.failures:
        raise DNFError(f"{len(res.failures)} image(s) failed extraction, first: {res.failures[0]['error']}")
    return load_cached_features(_cache(args), res.keys), np.asarray(res.labels), names


# -- commands ---------------------------------------------------------------------

def cmd_gen_data(args, cfg):
    seed = cfg["seed"]
    if args.kind == "real":
        rows = gen_real_dataset(args.out, args.n, seed, cfg["resolution"], **cfg["data"]["texture"])
    else:
        predictor = _predictor(args, cfg)
        schedule = make_linear_schedule(**cfg["schedule"])
        steps = args.sampler_steps or cfg["data"]["sampler_steps"]
        taus = sample_timesteps(schedule.total_steps, steps, cfg["data"]["sampler_mode"]).tolist()
        try:
            rows = gen_fake_dataset(args.out, args.n, seed, predictor, schedule, taus, cfg["resolution"])
        finally:
            if isinstance(predictor, ExternalPredictor):
                predictor.close()
    return {"kind": args.kind, "n": len(rows)}


def cmd_train_predictor(args, cfg):
    images, _, _ = load_dataset(args.data, label=0)
    X = to_unit_range(np.stack([resize_to(im, cfg["resolution"]) for im in images]))
    p = cfg["predictor"]
    model = TinyDenoiser(
        width=p["width"], embed_dim=p["embed_dim"], steps=args.steps if args.steps is not None else p["steps"],
        batch_size=p["batch_size"], learning_rate=p["learning_rate"], seed=cfg["seed"],
    ).fit(X, schedule=make_linear_schedule(**cfg["schedule"]))
    model.save(args.out)
    return {"steps": model.n_train_steps_, "final_loss": model.final_loss_, "id": model.describe()}


def cmd_extract(args, cfg):
    predictor = _predictor(args, cfg)
    try:
        res = extract_batch(args.data, _dnf_config(args, cfg, predictor), _cache(args), workers=cfg["workers"])
    finally:
        if isinstance(predictor, ExternalPredictor):
            predictor.close()
    report = res.report()
    report["failures"] = [dict(f, path=os.path.relpath(f["path"], args.data)) for f in res.failures]
    report["keys"] = res.keys
    write_json(args.out / "extract.json", report)
    if res.failures:
        raise DNFError(f"{len(res.failures)} image(s) failed extraction; see {args.out / 'extract.json'}")
    return {k: report[k] for k in ("n_items", "computed", "cached")}


def cmd_train_detector(args, cfg):
    X, y, _ = _features(args, cfg, args.data)
    Xv, yv, _ = _features(args, cfg, args.val)
    model = DnfDetector(seed=cfg["seed"], **cfg["detector"]).fit(X, y, Xv, yv)
    model.save(args.out)
    return {"n_epochs": model.n_epochs_, "best_val_accuracy": model.best_val_accuracy_}


def cmd_eval(args, cfg):
    model = DnfDetector.load(args.model)
    if args.features is not None:
        if args.labels is None:
            raise ParameterError("--features needs --labels")
        X, y = read_tensor(args.features), check_binary_labels(read_json(args.labels))
    elif args.data is not None:
        X, y, _ = _features(args, cfg, args.data)
    else:
        raise ParameterError("give --data or --features/--labels")
    report = evaluate(model, X, y)
    write_json(args.out / "eval.json", report.to_dict())
    return report.summary()


def cmd_perturb_sweep(args, cfg):
    images, labels, _ = load_dataset(args.data)
    predictor = _predictor(args, cfg)
    specs = [PerturbationSpec.from_dict(d) for d in cfg["perturbations"]]
    try:
        rows = perturbation_sweep(images, labels, DnfDetector.load(args.model),
                                  _dnf_config(args, cfg, predictor), specs, workers=cfg["workers"])
    finally:
        if isinstance(predictor, ExternalPredictor):
            predictor.close()
    write_json(args.out / "sweep.json", {"rows": rows})
    return {"rows": [{"spec": r["spec"], "accuracy": r["accuracy"]} for r in rows]}


def cmd_spectrum(args, cfg):
    X, y, _ = _features(args, cfg, args.data)
    out = {}
    for label, name in ((0, "real"), (1, "generated")):
        if np.sum(y == label) < 2:
            continue
        spec = mean_log_spectrum(X[y == label])
        spec.save(args.out / name)
        spec.to_png(args.out / f"{name}.png")
        out[name] = {"count": spec.count}
    if not out:
        raise ParameterError("need at least two images of one class")
    write_json(args.out / "spectrum.json", out)
    return out


def cmd_embed(args, cfg):
    X, y, names = _features(args, cfg, args.data)
    pca = PCAEmbedding(args.k).fit(X)
    Z = pca.transform(X)
    write_tensor(args.out / "components.dnft", pca.components_.reshape((args.k,) + X.shape[1:]))
    write_json(args.out / "embedding.json", {
        "explained_variance": pca.explained_variance_.tolist(),
        "points": [{"file": n, "label": int(lab), "coords": z.tolist()} for n, lab, z in zip(names, y, Z)],
    })
    return {"n": len(names), "explained_variance": pca.explained_variance_.tolist()}


def cmd_run(args, cfg):
    report = run_experiment(cfg, args.out, cache_dir=args.cache, workers=cfg["workers"])
    return {k: v for k, v in report.items() if k in ("eval", "failed_stage")}


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train-predictor": cmd_train_predictor,
    "extract": cmd_extract,
    "train-detector": cmd_train_detector,
    "eval": cmd_eval,
    "perturb-sweep": cmd_perturb_sweep,
    "spectrum": cmd_spectrum,
    "embed": cmd_embed,
    "run": cmd_run,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _config(args)
        if args.command != "run":
            args.out.mkdir(parents=True, exist_ok=True)
        result = COMMANDS[args.command](args, cfg)
    except DNFError as exc:
        print(f"dnfeat {args.command}: error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"dnfeat {args.command}: error: {exc}", file=sys.stderr)
        return 1
    if result:
        for key, value in result.items():
            print(f"{key}: {value}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
