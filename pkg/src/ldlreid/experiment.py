"""Experiment configuration and single-run orchestration.

Config files are flat ``key = value`` text; ``#`` starts a comment.  Keys:

    seed                  root seed; repeat r uses seed + r
    repeats               number of paired seeds
    variants              comma list of baseline, LDL-1, LDL-2, LDL-3, onehot-compare
    output_dir            where artifacts go
    metric                euclidean | cosine
    source_eval           true | false (also evaluate on every source domain)
    sweep_m, sweep_lambda comma lists for the hyper-parameter sweep in ``ablate``

    domain_count, classes_per_domain, samples_per_class, latent_dim, input_dim,
    identity_scale, within_class_noise, domain_shift, view_count, view_noise
                          synthetic data (classes_per_domain: int or comma list)

    learning_rate, decay_epochs, decay_factor, total_epochs, momentum_m, lambda,
    ids_per_domain, images_per_id, hidden_dim, feature_dim, smoothing, margin,
    pinned_diagonal       training

Precedence: command-line flags > config file > defaults.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np

from .evaluation import EvalReport, build_report
from .ldl_engine import LDLEngine, similarity_report, similarity_summary
from .model import CONFIG_VARIANTS, ModelParams, TrainConfig, encode, expand_variant, make_engine, train
from .synth_data import Dataset, SyntheticSpec, generate

SPEC_KEYS = {
    "domain_count": int, "samples_per_class": int, "latent_dim": int, "input_dim": int,
    "identity_scale": float, "within_class_noise": float, "domain_shift": float,
    "view_count": int, "view_noise": float,
}
TRAIN_KEYS = {
    "learning_rate": ("learning_rate", float), "decay_factor": ("decay_factor", float),
    "total_epochs": ("total_epochs", int), "momentum_m": ("momentum_m", float), "lambda": ("lam", float),
    "ids_per_domain": ("ids_per_domain_per_batch", int), "images_per_id": ("images_per_id", int),
    "hidden_dim": ("hidden_dim", int), "feature_dim": ("feature_dim", int), "smoothing": ("smoothing", float),
    "margin": ("margin", float), "pinned_diagonal": ("pinned_diagonal", float),
}
OTHER_KEYS = {"seed", "repeats", "variants", "output_dir", "metric", "source_eval", "sweep_m", "sweep_lambda",
              "classes_per_domain", "decay_epochs"}


class ConfigError(ValueError):
    pass


def _int_list(text: str) -> tuple[int, ...]:
    return tuple(int(t) for t in text.split(",") if t.strip())


def _float_list(text: str) -> tuple[float, ...]:
    return tuple(float(t) for t in text.split(",") if t.strip())


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {text!r}")


def parse_config_text(text: str) -> dict[str, str]:
    out = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in SPEC_KEYS and key not in TRAIN_KEYS and key not in OTHER_KEYS:
            raise ConfigError(f"line {n}: unknown key {key!r}")
        out[key] = value
    return out


@dataclass
class ExperimentConfig:
    spec: SyntheticSpec = field(default_factory=SyntheticSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    output_dir: Path = Path("ldl-out")
    variants: tuple[str, ...] = ("baseline", "LDL-1", "LDL-2", "LDL-3")
    repeats: int = 1
    seed: int = 0
    metric: str = "euclidean"
    source_eval: bool = False
    sweep_m: tuple[float, ...] = ()
    sweep_lambda: tuple[float, ...] = ()

    def __post_init__(self):
        if self.repeats < 1:
            raise ConfigError("repeats must be >= 1")
        for v in self.variants:
            if v not in CONFIG_VARIANTS:
                raise ConfigError(f"unknown variant {v!r}")
        if self.metric not in ("euclidean", "cosine"):
            raise ConfigError(f"unknown metric {self.metric!r}")

    @classmethod
    def from_mapping(cls, values: dict[str, str]) -> "ExperimentConfig":
        spec_kw, train_kw, kw = {}, {}, {}
        try:
            for key, value in values.items():
                if key in SPEC_KEYS:
                    spec_kw[key] = SPEC_KEYS[key](value)
                elif key in TRAIN_KEYS:
                    name, conv = TRAIN_KEYS[key]
                    train_kw[name] = conv(value)
                elif key == "classes_per_domain":
                    counts = _int_list(value)
                    spec_kw[key] = counts[0] if len(counts) == 1 else counts
                elif key == "decay_epochs":
                    train_kw[key] = _int_list(value)
                elif key in ("seed", "repeats"):
                    kw[key] = int(value)
                elif key == "variants":
                    kw[key] = tuple(v.strip() for v in value.split(",") if v.strip())
                elif key == "output_dir":
                    kw[key] = Path(value)
                elif key == "metric":
                    kw[key] = value
                elif key == "source_eval":
                    kw[key] = _bool(value)
                elif key in ("sweep_m", "sweep_lambda"):
                    kw[key] = _float_list(value)
                else:
                    raise ConfigError(f"unknown key {key!r}")
            seed = kw.get("seed", 0)
            cpd = spec_kw.pop("classes_per_domain", SyntheticSpec.classes_per_domain)
            if isinstance(cpd, int):
                cpd = (cpd,) * spec_kw.get("domain_count", SyntheticSpec.domain_count)
            spec = SyntheticSpec(classes_per_domain=cpd, seed=seed, **spec_kw)
            train_cfg = TrainConfig(seed=seed, **train_kw)
            return cls(spec=spec, train=train_cfg, **kw)
        except ConfigError:
            raise
        except (ValueError, TypeError) as exc:
            raise ConfigError(str(exc)) from exc

    def run_seeds(self) -> list[int]:
        return [self.seed + r for r in range(self.repeats)]

    def train_variants(self) -> list[str]:
        out = []
        for v in self.variants:
            for name in expand_variant(v):
                if name not in out:
                    out.append(name)
        return out

    def snapshot(self) -> dict:
        return {
            "spec": self.spec.to_dict(),
            "train": self.train.to_dict(),
            "variants": list(self.variants),
            "repeats": self.repeats,
            "seed": self.seed,
            "metric": self.metric,
            "source_eval": self.source_eval,
            "sweep_m": list(self.sweep_m),
            "sweep_lambda": list(self.sweep_lambda),
        }


def load_config(path=None, overrides: dict[str, str] | None = None) -> ExperimentConfig:
    values = parse_config_text(Path(path).read_text()) if path else {}
    for key, value in (overrides or {}).items():
        parse_config_text(f"{key} = {value}")
        values[key] = value
    return ExperimentConfig.from_mapping(values)


# --------------------------------------------------------------------------
# schemas
# --------------------------------------------------------------------------

def load_schema(name: str) -> dict:
    return json.loads(resources.files("ldlreid").joinpath("schemas", f"{name}.v1.json").read_text())


def validate_doc(doc: dict, name: str) -> None:
    jsonschema.validate(doc, load_schema(name))


def write_json(path, doc: dict, schema: str) -> None:
    validate_doc(doc, schema)
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


# --------------------------------------------------------------------------
# single runs
# --------------------------------------------------------------------------

@dataclass
class RunResult:
    variant: str
    seed: int
    params: ModelParams
    history: list[dict]
    engine: LDLEngine | None
    target_report: EvalReport
    source_reports: dict[int, EvalReport] = field(default_factory=dict)

    def summary(self) -> dict:
        row = {
            "variant": self.variant,
            "seed": self.seed,
            "map": self.target_report.map,
            "rank1": self.target_report.cmc[1],
            "rank5": self.target_report.cmc[5],
            "rank10": self.target_report.cmc[10],
            "gap_ratio": self.target_report.gap_ratio,
        }
        if self.engine is not None:
            row.update(similarity_summary(similarity_report(self.engine.tracking, self.engine.layout)))
        return row


def train_config_for(base: TrainConfig, variant: str, seed: int, **changes) -> TrainConfig:
    return dataclasses.replace(base, variant=variant, seed=seed, **changes)


def evaluate_model(params: ModelParams, source: Dataset, target: Dataset, metric: str = "euclidean",
                   source_eval: bool = False, context: dict | None = None) -> tuple[EvalReport, dict[int, EvalReport]]:
    src_feats = encode(params, source.x)
    report = build_report(encode(params, target.x), target, src_feats, source, metric,
                          dict(context or {}, split="target"))
    per_source = {}
    if source_eval:
        for d in np.unique(source.domain_ids):
            sel = source.domain_ids == d
            per_source[int(d)] = build_report(src_feats[sel], source.subset(sel), src_feats, source, metric,
                                              dict(context or {}, split=f"source-{int(d)}"))
    return report, per_source


def run_variant(source: Dataset, target: Dataset, train_cfg: TrainConfig, metric: str = "euclidean",
                source_eval: bool = False) -> RunResult:
    engine = make_engine(train_cfg, source)
    params, history = train(train_cfg, source, engine)
    context = {"variant": train_cfg.variant, "seed": train_cfg.seed}
    report, per_source = evaluate_model(params, source, target, metric, source_eval, context)
    return RunResult(train_cfg.variant, train_cfg.seed, params, history, engine, report, per_source)


def run_paired(cfg: ExperimentConfig, seed: int, variants=None, **train_changes) -> dict[str, RunResult]:
    """Generate one dataset for ``seed`` and train every variant on it with the same seed."""
    spec = dataclasses.replace(cfg.spec, seed=seed)
    source, target = generate(spec)
    out = {}
    for v in variants or cfg.train_variants():
        tc = train_config_for(cfg.train, v, seed, **train_changes)
        out[v] = run_variant(source, target, tc, cfg.metric, cfg.source_eval)
    return out


def aggregate(rows: list[dict], keys=("map", "rank1", "gap_ratio", "mean_similarity", "mean_diff")) -> list[dict]:
    """Mean and population std per variant, in first-seen variant order."""
    out = []
    variants = list(dict.fromkeys(r["variant"] for r in rows))
    for v in variants:
        sub = [r for r in rows if r["variant"] == v]
        for stat, fn in (("mean", np.mean), ("std", np.std)):
            agg = {"variant": v, "seed": stat}
            for k in keys:
                vals = [r[k] for r in sub if r.get(k) is not None]
                agg[k] = float(fn(vals)) if vals else None
            out.append(agg)
    return out
