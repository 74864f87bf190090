"""Experiment configuration files (YAML).

Schema::

    benchmark:            # optional; any BenchmarkSpec field, defaults otherwise
      num_seen: 10
      noise_sigma: 0.1
      encoder_mode: mean_pool_identity
    grpo:                 # eta0, lambda, beta, gamma, iterations are mandatory
      eta0: 0.01
      lambda: 0.1
      beta: 10.0
      gamma: 0.5
      iterations: 10
      projection: hard_nearest   # or soft_knn (with knn_k, knn_temperature)
      init: nearest_vocab        # or mlp, linear_map (with init_seed)
    experiment:           # optional
      variants: [full, no_pseudo_word_opt]
      seeds: [1, 2, 3]
      output_dir: results
      formats: [json, csv]
      aggregation: mean_z        # or mean_anchor
      ordering_ci: 0.0           # slack for ablate --assert-ordering

Unknown keys are rejected so that typos never fall back to defaults.
"""

import hashlib
import json
from dataclasses import dataclass, fields
from pathlib import Path

import yaml

from .benchmark import VARIANTS, BenchmarkSpec
from .grpo import AGGREGATIONS, GrpoConfig
from .numeric import GTMAError

REQUIRED_GRPO = ("eta0", "lambda", "beta", "gamma", "iterations")
GRPO_OPTIONAL = ("projection", "knn_k", "knn_temperature", "init", "init_seed", "adaptive_lr")
EXPERIMENT_KEYS = ("variants", "seeds", "output_dir", "formats", "aggregation", "ordering_ci")
FORMATS = ("json", "csv")


class ConfigError(GTMAError, ValueError):
    def __init__(self, message, field=None, line=None):
        self.field = field
        self.line = line
        where = []
        if field is not None:
            where.append(f"field '{field}'")
        if line is not None:
            where.append(f"line {line}")
        super().__init__(f"{message} ({', '.join(where)})" if where else message)


@dataclass(frozen=True)
class ExperimentConfig:
    benchmark: BenchmarkSpec
    grpo: GrpoConfig
    variants: tuple = VARIANTS
    seeds: tuple = (1,)
    output_dir: str = "results"
    formats: tuple = FORMATS
    aggregation: str = "mean_z"
    ordering_ci: float = 0.0

    def to_dict(self):
        g = self.grpo.to_dict()
        g["lambda"] = g.pop("lam")
        return {
            "benchmark": self.benchmark.to_dict(),
            "grpo": g,
            "experiment": {"variants": list(self.variants), "seeds": list(self.seeds),
                           "output_dir": self.output_dir, "formats": list(self.formats),
                           "aggregation": self.aggregation, "ordering_ci": self.ordering_ci},
        }

    def config_hash(self):
        """SHA-256 of the canonical (key-sorted) JSON form."""
        canon = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode()).hexdigest()


def _key_lines(node, prefix=""):
    """Map dotted key paths to 1-based line numbers from a composed YAML node."""
    lines = {}
    if isinstance(node, yaml.MappingNode):
        for k, v in node.value:
            path = f"{prefix}{k.value}"
            lines[path] = k.start_mark.line + 1
            lines.update(_key_lines(v, path + "."))
    return lines


def parse_config(text):
    try:
        root = yaml.compose(text)
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        raise ConfigError(f"invalid YAML: {getattr(exc, 'problem', exc)}",
                          line=None if mark is None else mark.line + 1) from None
    lines = _key_lines(root) if root is not None else {}
    if not isinstance(data, dict):
        raise ConfigError("config must be a mapping with a 'grpo' section")

    def section(name, required):
        sec = data.get(name)
        if sec is None:
            if required:
                raise ConfigError("missing section", field=name)
            return {}
        if not isinstance(sec, dict):
            raise ConfigError("section must be a mapping", field=name, line=lines.get(name))
        return sec

    unknown = set(data) - {"benchmark", "grpo", "experiment"}
    if unknown:
        k = sorted(unknown)[0]
        raise ConfigError("unknown section", field=k, line=lines.get(k))

    bench_raw = section("benchmark", False)
    bench_fields = {f.name for f in fields(BenchmarkSpec)}
    for k in bench_raw:
        if k not in bench_fields:
            raise ConfigError("unknown benchmark field", field=f"benchmark.{k}",
                              line=lines.get(f"benchmark.{k}"))
    try:
        bench = BenchmarkSpec(**bench_raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc), field="benchmark", line=lines.get("benchmark")) from None

    grpo_raw = section("grpo", True)
    for k in REQUIRED_GRPO:
        if k not in grpo_raw:
            raise ConfigError("missing required field", field=f"grpo.{k}", line=lines.get("grpo"))
    for k in grpo_raw:
        if k not in REQUIRED_GRPO + GRPO_OPTIONAL:
            raise ConfigError("unknown grpo field", field=f"grpo.{k}", line=lines.get(f"grpo.{k}"))
    kwargs = dict(grpo_raw)
    kwargs["lam"] = kwargs.pop("lambda")
    for k in ("eta0", "lam", "beta", "gamma", "knn_temperature"):
        if k in kwargs and (isinstance(kwargs[k], bool) or not isinstance(kwargs[k], (int, float))):
            name = "lambda" if k == "lam" else k
            raise ConfigError("must be a number", field=f"grpo.{name}", line=lines.get(f"grpo.{name}"))
    try:
        grpo = GrpoConfig(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc), field="grpo", line=lines.get("grpo")) from None

    exp = section("experiment", False)
    for k in exp:
        if k not in EXPERIMENT_KEYS:
            raise ConfigError("unknown experiment field", field=f"experiment.{k}",
                              line=lines.get(f"experiment.{k}"))

    def at(k):
        return {"field": f"experiment.{k}", "line": lines.get(f"experiment.{k}")}

    variants = tuple(exp.get("variants", VARIANTS))
    for v in variants:
        if v not in VARIANTS:
            raise ConfigError(f"unknown variant {v!r}", **at("variants"))
    seeds = exp.get("seeds", [1])
    if not isinstance(seeds, list) or not seeds or not all(
            isinstance(s, int) and not isinstance(s, bool) for s in seeds):
        raise ConfigError("seeds must be a non-empty list of integers", **at("seeds"))
    formats = tuple(exp.get("formats", FORMATS))
    if not formats or not set(formats) <= set(FORMATS):
        raise ConfigError(f"formats must be a non-empty subset of {FORMATS}", **at("formats"))
    aggregation = exp.get("aggregation", "mean_z")
    if aggregation not in AGGREGATIONS:
        raise ConfigError(f"aggregation must be one of {AGGREGATIONS}", **at("aggregation"))
    ordering_ci = exp.get("ordering_ci", 0.0)
    if not isinstance(ordering_ci, (int, float)) or ordering_ci < 0:
        raise ConfigError("ordering_ci must be a non-negative number", **at("ordering_ci"))
    return ExperimentConfig(bench, grpo, variants, tuple(seeds), str(exp.get("output_dir", "results")),
                            formats, aggregation, float(ordering_ci))


def load_config(path):
    return parse_config(Path(path).read_text(encoding="utf-8"))


def dump_config(cfg):
    return yaml.safe_dump(cfg.to_dict(), sort_keys=True)


def default_config_dict():
    """The published optimizer setting with the default synthetic benchmark."""
    return ExperimentConfig(BenchmarkSpec(), GrpoConfig()).to_dict()

