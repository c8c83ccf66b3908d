"""Configured end-to-end runs: data, predictor, features, detectors, reports.

A run is described by one JSON document. Every section is optional and
falls back to :data:`DEFAULTS`; unknown keys are rejected. Stages run in
the fixed order of :data:`STAGES`, restricted to ``config["stages"]``.
Stages that are not run pick up earlier outputs from the run directory::

    out/
      run_manifest.json     everything needed to repeat the run
      report.json           one summary per stage
      failures.log          only when a stage failed
      data/{train,val,test}/
      predictor/            trained denoiser (``kind: tiny``)
      detector/<name>/      one model per fusion strategy (and ``raw``)
      eval/<name>.json      full EvalReport with per-item scores

Features are cached under ``cache_dir`` (default ``out/cache``, or
``$DNF_CACHE_DIR``). No timestamps or absolute paths enter the outputs,
so equal configs give byte-identical files.
"""

from __future__ import annotations

import copy
import json
import logging
import os
import time
import traceback
from pathlib import Path

import numpy as np

from . import __version__
from ._validation import DNFError, ParameterError, StageError, check_binary_labels
from .data import gen_fake_dataset, gen_real_dataset, load_dataset, load_manifest
from .detector import DnfDetector, evaluate
from .dnf import DnfConfig, STRATEGIES, extract_batch, load_cached_features, resize_to, to_unit_range
from .formats import atomic_write_bytes, config_hash, dump_json, read_json, read_tensor, write_json
from .perturb import DEFAULT_GRID, PerturbationSpec, perturbation_sweep
from .predictor import AnalyticGaussianPredictor, ExternalPredictor, TinyDenoiser
from .schedule import make_linear_schedule, sample_timesteps

log = logging.getLogger(__name__)

CACHE_ENV = "DNF_CACHE_DIR"
STAGES = ("gen-data", "train-predictor", "extract", "train-detector", "eval", "perturb-sweep")
SPLITS = ("train", "val", "test")
RAW = "raw"

DEFAULTS = {
    "seed": 0,
    "resolution": 32,
    "workers": 1,
    "cache_dir": None,
    "stages": list(STAGES),
    "schedule": {"T": 1000, "beta_start": 1e-4, "beta_end": 0.02},
    "dnf": {"n_steps": 20, "timestep_mode": "uniform", "strategies": ["first"]},
    "baselines": [],
    "data": {
        "n_train": 2000, "n_val": 250, "n_test": 500,
        "sampler_steps": 50, "sampler_mode": "uniform",
        "texture": {
            "correlation_length": 1.5, "field_amplitude": 0.35, "n_edges": 3,
            "edge_levels": 4, "edge_amplitude": 0.5,
        },
    },
    "predictor": {
        "kind": "tiny", "width": 16, "embed_dim": 32, "steps": 1000, "batch_size": 64,
        "learning_rate": 2e-3, "path": None, "command": None, "mu": 0.0, "sigma2": 1.0,
    },
    "detector": {
        "arch": "resnet", "width": 16, "n_blocks": 3, "stem_pool": True, "batch_size": 64,
        "learning_rate": 1e-4, "beta1": 0.9, "beta2": 0.999, "lr_decay": 10.0,
        "patience": 5, "min_improvement": 0.001, "min_learning_rate": 1e-6,
        "max_epochs": 60, "flip_prob": 0.5, "threshold": 0.5,
    },
    "perturbations": [s.to_dict() for s in DEFAULT_GRID],
    "eval": {"features": None, "labels": None, "model": None},
}

# sections whose values are free-form lists rather than nested key sets
_LIST_KEYS = {"stages", "strategies", "baselines", "perturbations", "command"}
_NULLABLE = {"cache_dir", "path", "command", "features", "labels", "model", "batch_size"}


def _merge(defaults: dict, given: dict, where: str) -> dict:
    if not isinstance(given, dict):
        raise ParameterError(f"{where or 'config'} must be a JSON object")
    unknown = sorted(set(given) - set(defaults))
    if unknown:
        raise ParameterError(f"unknown config key(s) {unknown} in {where or 'top level'}")
    out = copy.deepcopy(defaults)
    for key, value in given.items():
        path = f"{where}.{key}" if where else key
        default = defaults[key]
        if isinstance(default, dict):
            out[key] = _merge(default, value, path)
        elif value is None:
            if key not in _NULLABLE:
                raise ParameterError(f"{path} may not be null")
            out[key] = None
        elif key in _LIST_KEYS:
            if not isinstance(value, list):
                raise ParameterError(f"{path} must be a list")
            out[key] = list(value)
        elif isinstance(default, bool) or isinstance(value, bool):
            if not isinstance(value, bool) or not isinstance(default, bool):
                raise ParameterError(f"{path} has the wrong type")
            out[key] = value
        elif isinstance(default, (int, float)):
            if not isinstance(value, (int, float)):
                raise ParameterError(f"{path} must be a number")
            if isinstance(default, int) and int(value) != value:
                raise ParameterError(f"{path} must be an integer")
            out[key] = type(default)(value)
        else:
            if not isinstance(value, str):
                raise ParameterError(f"{path} must be a string")
            out[key] = value
    return out


def load_config(source=None, overrides: dict | None = None) -> dict:
    """Resolve a config from a path, a dict, or ``None`` (all defaults).

    Relative paths in ``eval`` and ``predictor.path`` are resolved against
    the config file's directory.
    """
    base_dir = None
    if source is None:
        given = {}
    elif isinstance(source, dict):
        given = source
    else:
        path = Path(source)
        try:
            given = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ParameterError(f"config {path} is not valid JSON: {exc}") from None
        base_dir = path.resolve().parent
    cfg = _merge(DEFAULTS, given, "")
    if overrides:
        cfg = _merge(DEFAULTS, _deep_update(cfg, overrides), "")
    _validate(cfg)
    if base_dir is not None:
        for section, key in (("eval", "features"), ("eval", "labels"), ("eval", "model"), ("predictor", "path")):
            value = cfg[section][key]
            if value is not None and not Path(value).is_absolute():
                cfg[section][key] = str(base_dir / value)
    return cfg


def _deep_update(cfg: dict, overrides: dict) -> dict:
    out = copy.deepcopy(cfg)
    for k, v in overrides.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _deep_update(out[k], v)
        else:
            out[k] = v
    return out


def _validate(cfg: dict) -> None:
    bad = [s for s in cfg["stages"] if s not in STAGES]
    if bad:
        raise ParameterError(f"unknown stage(s) {bad}; choose from {list(STAGES)}")
    bad = [s for s in cfg["dnf"]["strategies"] if s not in STRATEGIES]
    if bad or not cfg["dnf"]["strategies"]:
        raise ParameterError(f"strategies must be a non-empty subset of {list(STRATEGIES)}")
    if len(set(cfg["dnf"]["strategies"])) != len(cfg["dnf"]["strategies"]):
        raise ParameterError("duplicate strategies")
    if any(b != RAW for b in cfg["baselines"]):
        raise ParameterError(f"the only baseline is {RAW!r}")
    if cfg["predictor"]["kind"] not in ("tiny", "saved", "analytic", "external"):
        raise ParameterError(f"unknown predictor kind {cfg['predictor']['kind']!r}")
    if cfg["workers"] < 1:
        raise ParameterError("workers must be >= 1")
    for d in cfg["perturbations"]:
        PerturbationSpec.from_dict(d)
    d = cfg["data"]
    if min(d["n_train"], d["n_val"]) < 1 or d["n_test"] < 0:
        raise ParameterError("split sizes must be positive")
    make_linear_schedule(**cfg["schedule"])


def _split_seeds(seed: int) -> dict:
    """Independent seeds for every random draw of a run."""
    state = np.random.SeedSequence(seed).generate_state(8)
    names = ["real.train", "real.val", "real.test", "fake.train", "fake.val", "fake.test",
             "predictor", "detector"]
    return {n: int(s) for n, s in zip(names, state)}


class Run:
    """State shared by the stages of one run."""

    def __init__(self, cfg: dict, out, cache_dir=None, workers: int | None = None):
        self.cfg = cfg
        self.out = Path(out)
        self.workers = int(workers or cfg["workers"])
        cache = cache_dir or cfg["cache_dir"] or os.environ.get(CACHE_ENV) or self.out / "cache"
        self.cache = Path(cache)
        self.seeds = _split_seeds(cfg["seed"])
        self.schedule = make_linear_schedule(**cfg["schedule"])
        self.report: dict = {}
        # per-stage wall and CPU seconds; kept out of every output file so reruns stay byte-identical
        self.timings: dict = {}
        self._predictor = None
        self._features: dict = {}

    # -- helpers -------------------------------------------------------------
    def data_dir(self, split: str) -> Path:
        return self.out / "data" / split

    @property
    def predictor(self):
        if self._predictor is None:
            self._predictor = self._load_predictor()
        return self._predictor

    def _load_predictor(self):
        p = self.cfg["predictor"]
        kind = p["kind"]
        if kind == "analytic":
            return AnalyticGaussianPredictor(p["mu"], p["sigma2"])
        if kind == "external":
            if not p["command"]:
                raise ParameterError("predictor.command is required for kind external")
            return ExternalPredictor(p["command"])
        path = Path(p["path"]) if kind == "saved" else self.out / "predictor"
        if kind == "saved" and p["path"] is None:
            raise ParameterError("predictor.path is required for kind saved")
        if not (path / "predictor.json").exists():
            raise StageError(f"no trained predictor at {path}; run train-predictor first")
        return TinyDenoiser.load(path)

    def dnf_configs(self) -> list:
        d = self.cfg["dnf"]
        return [
            DnfConfig(
                predictor=self.predictor, resolution=self.cfg["resolution"],
                n_steps=d["n_steps"], timestep_mode=d["timestep_mode"], strategy=s,
                **self.cfg["schedule"],
            )
            for s in d["strategies"]
        ]

    def features(self, split: str, name: str):
        """``(features, labels)`` of one split, for a strategy or the raw baseline."""
        key = (split, name)
        if key not in self._features:
            if name == RAW:
                images, labels, _ = load_dataset(self.data_dir(split))
                res = self.cfg["resolution"]
                feats = np.stack([to_unit_range(resize_to(im, res)) for im in images]).astype(np.float32)
                self._features[key] = (feats, labels)
            else:
                self._extract(split)
        return self._features[key]

    def _extract(self, split: str) -> dict:
        configs = self.dnf_configs()
        results = extract_batch(self.data_dir(split), configs, self.cache, workers=self.workers)
        summary = {}
        for cfg, res in zip(configs, results):
            if res.failures:
                root = self.data_dir(split)
                failures = [dict(f, path=os.path.relpath(f["path"], root)) for f in res.failures]
                raise StageError(f"feature extraction failed for {len(failures)} image(s) in {split}: "
                                 f"{failures[:3]}")
            if not res.keys:
                raise StageError(f"split {split} has no images")
            feats = load_cached_features(self.cache, res.keys)
            self._features[(split, cfg.strategy)] = (feats, np.asarray(res.labels))
            # cache hit counts vary between reruns, so they are logged, not reported
            log.info("%s/%s: %d computed, %d cached", split, cfg.strategy, res.computed, res.cached)
            summary[cfg.strategy] = {"n_items": len(res.keys)}
        return summary

    def detector_names(self) -> list:
        return list(self.cfg["dnf"]["strategies"]) + list(self.cfg["baselines"])

    def detector_dir(self, name: str) -> Path:
        return self.out / "detector" / name

    # -- stages ----------------------------------------------------------------
    def stage_gen_data(self):
        d = self.cfg["data"]
        res = self.cfg["resolution"]
        counts = {"train": d["n_train"], "val": d["n_val"], "test": d["n_test"]}
        for split in SPLITS:
            if counts[split] > 0:
                gen_real_dataset(self.data_dir(split), counts[split], self.seeds[f"real.{split}"],
                                 res, **d["texture"])
        if self.cfg["predictor"]["kind"] == "tiny":
            self.stage_train_predictor()
        taus = sample_timesteps(self.schedule.total_steps, d["sampler_steps"], d["sampler_mode"]).tolist()
        for split in SPLITS:
            if counts[split] > 0:
                gen_fake_dataset(self.data_dir(split), counts[split], self.seeds[f"fake.{split}"],
                                 self.predictor, self.schedule, taus, res)
        return {split: {"n_real": counts[split], "n_generated": counts[split]} for split in SPLITS}

    def stage_train_predictor(self):
        if "train-predictor" in self.report:
            return self.report["train-predictor"]
        p = self.cfg["predictor"]
        if p["kind"] != "tiny":
            summary = {"kind": p["kind"], "trained": False, "id": self.predictor.describe()}
            self.report["train-predictor"] = summary
            return summary
        images, _, _ = load_dataset(self.data_dir("train"), label=0)
        X = to_unit_range(np.stack([resize_to(im, self.cfg["resolution"]) for im in images]))
        model = TinyDenoiser(
            width=p["width"], embed_dim=p["embed_dim"], steps=p["steps"], batch_size=p["batch_size"],
            learning_rate=p["learning_rate"], seed=self.seeds["predictor"],
        ).fit(X, schedule=self.schedule)
        model.save(self.out / "predictor")
        self._predictor = model
        summary = {"kind": "tiny", "trained": True, "n_images": int(X.shape[0]),
                   "steps": model.n_train_steps_, "final_loss": model.final_loss_,
                   "id": model.describe()}
        self.report["train-predictor"] = summary
        return summary

    def stage_extract(self):
        return {split: self._extract(split) for split in SPLITS if self._has_split(split)}

    def _has_split(self, split):
        return (self.data_dir(split) / "manifest.tsv").exists()

    def stage_train_detector(self):
        summary = {}
        for name in self.detector_names():
            X, y = self.features("train", name)
            Xv, yv = self.features("val", name)
            model = DnfDetector(seed=self.seeds["detector"], **self.cfg["detector"]).fit(X, y, Xv, yv)
            model.save(self.detector_dir(name))
            summary[name] = {"n_epochs": model.n_epochs_, "best_val_accuracy": model.best_val_accuracy_,
                             "final_learning_rate": model.final_learning_rate_}
        return summary

    def stage_eval(self):
        e = self.cfg["eval"]
        if e["features"] is not None:
            if e["model"] is None or e["labels"] is None:
                raise ParameterError("eval.features needs eval.labels and eval.model")
            feats = read_tensor(e["features"])
            labels = check_binary_labels(read_json(e["labels"]))
            if feats.shape[0] == 0:
                raise StageError("test set is empty")
            report = evaluate(DnfDetector.load(e["model"]), feats, labels)
            write_json(self.out / "eval" / "fixture.json", report.to_dict())
            return {"fixture": report.summary()}
        summary = {}
        for name in self.detector_names():
            if not self._has_split("test") or not load_manifest(self.data_dir("test")):
                raise StageError("test set is empty")
            X, y = self.features("test", name)
            report = evaluate(DnfDetector.load(self.detector_dir(name)), X, y)
            write_json(self.out / "eval" / f"{name}.json", report.to_dict())
            summary[name] = report.summary()
        return summary

    def stage_perturb_sweep(self):
        name = self.cfg["dnf"]["strategies"][0]
        images, labels, _ = load_dataset(self.data_dir("test"))
        config = self.dnf_configs()[0]
        specs = [PerturbationSpec.from_dict(d) for d in self.cfg["perturbations"]]
        rows = perturbation_sweep(images, labels, DnfDetector.load(self.detector_dir(name)), config,
                                  specs, workers=self.workers)
        return {"strategy": name, "rows": rows}

    # -- manifest ----------------------------------------------------------------
    def manifest(self) -> dict:
        d = self.cfg["dnf"]
        taus = sample_timesteps(self.schedule.total_steps, d["n_steps"], d["timestep_mode"]).tolist()
        try:
            pred = self.predictor.describe()
        except DNFError:
            pred = None
        cfg = copy.deepcopy(self.cfg)
        # paths vary between machines and do not influence results
        cfg["cache_dir"] = None
        del cfg["workers"]
        for key in ("features", "labels", "model"):
            if cfg["eval"][key] is not None:
                cfg["eval"][key] = Path(cfg["eval"][key]).name
        if cfg["predictor"]["path"] is not None:
            cfg["predictor"]["path"] = Path(cfg["predictor"]["path"]).name
        return {
            "tool_version": __version__,
            "seed": self.cfg["seed"],
            "schedule": dict(self.schedule.to_dict(), mode=d["timestep_mode"], S=d["n_steps"]),
            "taus": taus,
            "predictor": pred,
            "strategies": list(d["strategies"]),
            "resolution": self.cfg["resolution"],
            "config": cfg,
            "config_hash": config_hash(cfg),
        }

    def execute(self) -> dict:
        self.out.mkdir(parents=True, exist_ok=True)
        failure_log = self.out / "failures.log"
        if failure_log.exists():
            failure_log.unlink()
        handlers = {s: getattr(self, "stage_" + s.replace("-", "_")) for s in STAGES}
        try:
            for stage in STAGES:
                if stage not in self.cfg["stages"]:
                    continue
                started, cpu = time.perf_counter(), time.process_time()
                self.report[stage] = handlers[stage]()
                self.timings[stage] = {"wall": time.perf_counter() - started, "cpu": time.process_time() - cpu}
                log.info("stage %s done in %.1f s (%.1f s CPU)", stage, self.timings[stage]["wall"],
                         self.timings[stage]["cpu"])
                self._write_report()
        except Exception as exc:
            self.report["failed_stage"] = stage
            self.report["error"] = f"{type(exc).__name__}: {exc}"
            self._write_report()
            atomic_write_bytes(failure_log, (
                f"stage: {stage}\nerror: {type(exc).__name__}: {exc}\n\n{traceback.format_exc()}"
            ).encode("utf-8"))
            raise StageError(f"stage {stage} failed: {type(exc).__name__}: {exc}") from exc
        finally:
            if isinstance(self._predictor, ExternalPredictor):
                self._predictor.close()
        return self.report

    def _write_report(self):
        ordered = {s: self.report[s] for s in STAGES if s in self.report}
        for k in ("failed_stage", "error"):
            if k in self.report:
                ordered[k] = self.report[k]
        write_json(self.out / "report.json", ordered)
        try:
            write_json(self.out / "run_manifest.json", self.manifest())
        except Exception:  # manifest is best effort while a stage is failing
            pass


def run_experiment(config, out, cache_dir=None, workers: int | None = None, overrides=None) -> dict:
    """Run the configured stages; raises :class:`StageError` on the first failure."""
    cfg = load_config(config, overrides)
    return Run(cfg, out, cache_dir=cache_dir, workers=workers).execute()


def report_bytes(report: dict) -> bytes:
    return dump_json(report).encode("utf-8")
