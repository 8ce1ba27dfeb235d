"""Experiment configuration: one strict JSON document per experiment.

Top-level keys (all optional except ``dataset``)::

    {
      "dataset": {"cube": "cube.npy", "labels": "labels.npy", "n_classes": 9,
                  "normalize": "minmax"}
               | {"synthetic": {"height": 32, "width": 32, "bands": 16,
                                "n_classes": 3, "noise": 0.01, "seed": 0}},
      "mode": "TRN" | "SDTN-only" | "CNN-baseline",
      "hyperparams": {<Hyperparams fields>},
      "trn": {<TrnConfig fields other than mode, bands, n_classes, hp>},
      "decompose": {"patches": [[row, col], ...] | null, "rank": 3,
                    "glr_rank": 2, "n_starts": 1, "probe_iters": 100,
                    "step_mode": "als"},
      "gradcheck": {"suites": [...] | null, "instances": 20},
      "n_per_class": 10,
      "seed": 0,
      "out_dir": "out"
    }

Relative paths are resolved against the directory holding the config file.
Unknown keys anywhere raise :class:`ConfigError`.
"""
from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, fields

from .hyperparams import Hyperparams
from .trn import MODES, TrnConfig


class ConfigError(ValueError):
    """Invalid experiment configuration."""


def _strict(d, allowed: set[str], where: str) -> dict:
    if not isinstance(d, dict):
        raise ConfigError(f"{where} must be a JSON object")
    unknown = sorted(set(d) - allowed)
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {unknown}")
    return d


def _typed(value, kinds, where: str):
    if isinstance(value, bool) and bool not in (kinds if isinstance(kinds, tuple) else (kinds,)):
        raise ConfigError(f"{where} has the wrong type")
    if not isinstance(value, kinds):
        raise ConfigError(f"{where} has the wrong type ({type(value).__name__})")
    return value


@dataclass(frozen=True)
class DatasetConfig:
    cube: str | None = None
    labels: str | None = None
    n_classes: int | None = None
    normalize: str | None = "minmax"
    synthetic: dict | None = None

    SYNTH_KEYS = ("height", "width", "bands", "n_classes", "noise", "seed")


@dataclass(frozen=True)
class DecomposeConfig:
    patches: tuple[tuple[int, int], ...] | None = None
    rank: int = 3
    glr_rank: int = 2
    n_starts: int = 1
    probe_iters: int = 100
    step_mode: str = "als"


@dataclass(frozen=True)
class GradcheckConfig:
    suites: tuple[str, ...] | None = None
    instances: int = 20


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: DatasetConfig
    mode: str = "TRN"
    hyperparams: Hyperparams = field(default_factory=Hyperparams)
    trn: dict = field(default_factory=dict)
    decompose: DecomposeConfig = field(default_factory=DecomposeConfig)
    gradcheck: GradcheckConfig = field(default_factory=GradcheckConfig)
    n_per_class: int = 10
    seed: int = 0
    out_dir: str = "out"

    def with_seed(self, seed: int) -> "ExperimentConfig":
        from dataclasses import replace

        return replace(self, seed=int(seed), hyperparams=self.hyperparams.replace(seed=int(seed)))

    def trn_config(self, bands: int, n_classes: int) -> TrnConfig:
        try:
            return TrnConfig(**self.trn, bands=bands, n_classes=n_classes, mode=self.mode,
                             hp=self.hyperparams)
        except (TypeError, ValueError) as e:
            raise ConfigError(f"invalid trn section: {e}") from e

    def canonical(self) -> dict:
        """Every field that influences results (the output directory is excluded)."""
        d = {
            "dataset": {k: v for k, v in asdict(self.dataset).items()},
            "mode": self.mode,
            "hyperparams": self.hyperparams.to_dict(),
            "trn": dict(sorted(self.trn.items())),
            "n_per_class": self.n_per_class,
            "seed": self.seed,
        }
        for k in ("cube", "labels"):
            if d["dataset"][k] is not None:
                d["dataset"][k] = os.path.basename(d["dataset"][k])
        return json.loads(json.dumps(d))


_TRN_KEYS = {f.name for f in fields(TrnConfig)} - {"mode", "bands", "n_classes", "hp"}


def _int(v, where, lo=None):
    _typed(v, int, where)
    if lo is not None and v < lo:
        raise ConfigError(f"{where} must be >= {lo}, got {v}")
    return v


def parse(doc: dict, base_dir: str = ".") -> ExperimentConfig:
    """Validate a decoded JSON document completely and build the config."""
    top = _strict(doc, {"dataset", "mode", "hyperparams", "trn", "decompose", "gradcheck",
                        "n_per_class", "seed", "out_dir"}, "config")
    if "dataset" not in top:
        raise ConfigError("config needs a 'dataset' section")
    ds = _strict(top["dataset"], {"cube", "labels", "n_classes", "normalize", "synthetic"},
                 "dataset")
    if "synthetic" in ds:
        if "cube" in ds or "labels" in ds:
            raise ConfigError("dataset takes either file paths or 'synthetic', not both")
        syn = _strict(ds["synthetic"], set(DatasetConfig.SYNTH_KEYS), "dataset.synthetic")
        for k, v in syn.items():
            _typed(v, (int, float) if k == "noise" else int, f"dataset.synthetic.{k}")
    else:
        for k in ("cube", "labels"):
            if k not in ds:
                raise ConfigError(f"dataset.{k} path is required")
            _typed(ds[k], str, f"dataset.{k}")
    resolve = lambda p: p if p is None or os.path.isabs(p) else os.path.join(base_dir, p)
    if ds.get("n_classes") is not None:
        _int(ds["n_classes"], "dataset.n_classes", 2)
    norm = ds.get("normalize", "minmax")
    if norm not in (None, "minmax", "standardize"):
        raise ConfigError(f"dataset.normalize must be minmax, standardize or null, got {norm!r}")
    dataset = DatasetConfig(resolve(ds.get("cube")), resolve(ds.get("labels")),
                            ds.get("n_classes"), norm, ds.get("synthetic"))

    mode = top.get("mode", "TRN")
    if mode not in MODES:
        raise ConfigError(f"mode must be one of {MODES}, got {mode!r}")
    seed = _int(top.get("seed", 0), "seed", 0)
    if seed >= 2**64:
        raise ConfigError("seed must fit in 64 bits")
    hp_doc = dict(_strict(top.get("hyperparams", {}), {f.name for f in fields(Hyperparams)},
                          "hyperparams"))
    hp_doc.setdefault("seed", seed)
    try:
        hp = Hyperparams.from_dict(hp_doc)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"invalid hyperparams: {e}") from e
    if hp.step_mode == "als":
        raise ConfigError("hyperparams.step_mode 'als' only applies to decompose.step_mode")
    trn = dict(_strict(top.get("trn", {}), _TRN_KEYS, "trn"))
    if "conv3d_kernel" in trn:
        trn["conv3d_kernel"] = tuple(trn["conv3d_kernel"])

    dc = _strict(top.get("decompose", {}), {f.name for f in fields(DecomposeConfig)}, "decompose")
    patches = dc.get("patches")
    if patches is not None:
        if not isinstance(patches, list) or not all(
                isinstance(p, list) and len(p) == 2 and all(isinstance(i, int) for i in p)
                for p in patches):
            raise ConfigError("decompose.patches must be a list of [row, col] pairs")
        patches = tuple(tuple(p) for p in patches)
    step_mode = dc.get("step_mode", "als")
    if step_mode not in ("schedule", "backtracking", "als"):
        raise ConfigError(f"invalid decompose.step_mode {step_mode!r}")
    decompose = DecomposeConfig(patches, _int(dc.get("rank", 3), "decompose.rank", 1),
                                _int(dc.get("glr_rank", 2), "decompose.glr_rank", 0),
                                _int(dc.get("n_starts", 1), "decompose.n_starts", 1),
                                _int(dc.get("probe_iters", 100), "decompose.probe_iters", 0),
                                step_mode)
    gc = _strict(top.get("gradcheck", {}), {"suites", "instances"}, "gradcheck")
    suites = gc.get("suites")
    if suites is not None:
        from .gradcheck import SUITES

        if not isinstance(suites, list) or any(s not in SUITES for s in suites):
            raise ConfigError(f"gradcheck.suites must name entries of {sorted(SUITES)}")
        suites = tuple(suites)
    gradcheck = GradcheckConfig(suites, _int(gc.get("instances", 20), "gradcheck.instances", 1))

    cfg = ExperimentConfig(dataset, mode, hp, trn, decompose, gradcheck,
                           _int(top.get("n_per_class", 10), "n_per_class", 1), seed,
                           resolve(_typed(top.get("out_dir", "out"), str, "out_dir")))
    # build the classifier config once so bad trn fields fail before any work
    cfg.trn_config(bands=1, n_classes=2)
    return cfg


def load(path) -> ExperimentConfig:
    path = os.fspath(path)
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e.strerror}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"config {path} is not valid JSON: {e}") from e
    return parse(doc, os.path.dirname(os.path.abspath(path)))
