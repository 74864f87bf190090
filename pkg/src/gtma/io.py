"""File formats: benchmark fixtures, trajectories, reports and ablation tables.

JSON is written with sorted keys and Python's shortest round-trip float
repr. CSV uses a header row, commas, LF line endings and floats printed with
17 significant digits, so every value reads back bit-exact. Missing values
are written as empty CSV cells and JSON ``null``.
"""

import csv
import io
import json
from pathlib import Path

import numpy as np

from .benchmark import Benchmark, BenchmarkSpec, ConceptSpec, Instance
from .encoder import AttentionParams, Template, TextEncoderParams, VocabularyTable
from .grpo import STEP_FIELDS

FIXTURE_FORMAT = "gtma-fixture"
FIXTURE_VERSION = 1
FIXTURE_FILES = ("vocabulary.json", "encoder.json", "concepts.json", "instances.json")


def dumps_json(obj):
    return json.dumps(obj, sort_keys=True, indent=1, allow_nan=False) + "\n"


def write_json(path, obj):
    Path(path).write_text(dumps_json(obj), encoding="utf-8", newline="\n")


def read_json(path):
    return json.loads(Path(path).read_text(encoding="utf-8"))


def format_float(x):
    if x is None:
        return ""
    if isinstance(x, (bool, np.bool_)):
        return str(bool(x)).lower()
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return f"{float(x):.17g}"
    return str(x)


def dumps_csv(rows, fields):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(fields)
    for row in rows:
        w.writerow([format_float(row.get(f)) for f in fields])
    return buf.getvalue()


def write_csv(path, rows, fields):
    Path(path).write_text(dumps_csv(rows, fields), encoding="utf-8", newline="\n")


def read_csv(path):
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def save_fixture(bench, out_dir):
    """Write ``bench`` as four JSON files under ``out_dir``; returns their paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    header = {"format": FIXTURE_FORMAT, "version": FIXTURE_VERSION}
    docs = {
        "vocabulary.json": {**header, "vocabulary": bench.vocab.to_dict(),
                            "placeholder_index": bench.placeholder_index},
        "encoder.json": {**header, "spec": bench.spec.to_dict(), "encoder": bench.encoder.to_dict(),
                         "attention": bench.attention.to_dict(), "template": bench.template.to_dict()},
        "concepts.json": {**header, "concepts": [
            {"concept_id": c.concept_id, "kind": c.kind, "token_index": c.token_index,
             "display_name": c.display_name, "prototype": c.prototype.tolist()}
            for c in bench.concepts]},
        "instances.json": {**header, "instances": [
            {"instance_id": i.instance_id, "true_concept": i.true_concept, "split": i.split,
             "patches": i.patches.tolist()}
            for i in bench.instances]},
    }
    paths = []
    for name in FIXTURE_FILES:
        write_json(out / name, docs[name])
        paths.append(out / name)
    return paths


def _check_header(doc, name):
    if doc.get("format") != FIXTURE_FORMAT or doc.get("version") != FIXTURE_VERSION:
        raise ValueError(f"{name} is not a {FIXTURE_FORMAT} v{FIXTURE_VERSION} file")


def load_fixture(fixture_dir):
    d = Path(fixture_dir)
    docs = {}
    for name in FIXTURE_FILES:
        docs[name] = read_json(d / name)
        _check_header(docs[name], name)
    enc = docs["encoder.json"]
    spec = BenchmarkSpec(**enc["spec"])
    concepts = [ConceptSpec(c["concept_id"], np.asarray(c["prototype"], dtype=np.float64), c["kind"],
                            c["token_index"], c["display_name"])
                for c in docs["concepts.json"]["concepts"]]
    instances = [Instance(i["instance_id"], np.asarray(i["patches"], dtype=np.float64),
                          i["true_concept"], i["split"])
                 for i in docs["instances.json"]["instances"]]
    return Benchmark(
        spec,
        VocabularyTable.from_dict(docs["vocabulary.json"]["vocabulary"]),
        TextEncoderParams.from_dict(enc["encoder"]),
        AttentionParams.from_dict(enc["attention"]),
        Template.from_dict(enc["template"]),
        concepts,
        instances,
        docs["vocabulary.json"]["placeholder_index"],
    )


def write_trajectory(trajectory, config, out_dir, formats=("json", "csv"), stem="trajectory"):
    out = Path(out_dir)
    paths = []
    if "csv" in formats:
        rows = [{f: getattr(s, f) for f in STEP_FIELDS} for s in trajectory.steps]
        write_csv(out / f"{stem}.csv", rows, STEP_FIELDS)
        paths.append(out / f"{stem}.csv")
    if "json" in formats:
        write_json(out / f"{stem}.json", trajectory.to_dict(config))
        paths.append(out / f"{stem}.json")
    return paths


REPORT_FIELDS = ("method", "variant", "seed", "shots", "seen_accuracy", "ood_accuracy",
                 "open_accuracy", "ood_alignment", "n_seen", "n_ood")
AGGREGATE_FIELDS = ("method", "variant", "shots", "metric", "mean", "std", "ci95", "n")


def report_rows(reports):
    return [{f: getattr(r, f) for f in REPORT_FIELDS} for r in reports]


def aggregate_rows(groups):
    """``groups``: iterable of ``(method, variant, shots, {metric: summary})``."""
    rows = []
    for method, variant, shots, summary in groups:
        for metric, s in summary.items():
            rows.append({"method": method, "variant": variant, "shots": shots, "metric": metric, **s})
    return rows


def ablation_fields(result):
    fields = ["variant"]
    for ds in result.datasets:
        fields += [ds, f"{ds}_ci95"]
    return fields + ["avg_drop"]
