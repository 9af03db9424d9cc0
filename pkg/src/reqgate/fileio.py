"""File formats: datasets, features, configs, models, reports and manifests.

Every file is plain text with Unix newlines and locale-independent decimal
numbers. Floats are written in shortest round-trip form, so reading a file
back gives bit-identical values. All writes go to a temporary file in the
target directory that is renamed into place once complete.
"""

from contextlib import contextmanager
import csv
import hashlib
import io
import json
import math
import os
from pathlib import Path
import tempfile

import numpy as np
import polars as pl

from ._validation import N_FEATURES, N_SAMPLES
from .datagen import (
    EasyNoiseParams,
    MotionParams,
    SignalDataset,
    SignalDatasetSpec,
    SourceKind,
    SpuriousParams,
)
from .exceptions import ConfigurationError, DataFormatError
from .features import SpectrogramExtractor
from .models import CnnWeights, GateWeights, ProductModelWeights

DATASET_COLUMNS = ["label", "source"] + [f"s{i}" for i in range(N_SAMPLES)]
FEATURE_COLUMNS = ["label"] + list(SpectrogramExtractor().get_feature_names_out())
TOY_COLUMNS = ["label", "x", "y"]
SCORE_COLUMNS = ["label", "score"]
ROC_COLUMNS = ["threshold", "fp_fraction", "tp_fraction"]
REPORT_COLUMNS = [
    "stage", "lambda0", "lambda1", "loss_train", "loss_val", "tp_train", "tp_val",
    "fp_train", "fp_val", "peak_active", "iters", "seconds",
]
MODEL_FORMAT = "reqgate-product-model"
MODEL_VERSION = 1


# -- plumbing ----------------------------------------------------------------


@contextmanager
def atomic_writer(path, mode="w"):
    """Open a temp file next to ``path``; rename it over ``path`` on success."""
    path = Path(path)
    directory = path.parent if str(path.parent) else Path(".")
    if not directory.is_dir():
        raise OSError(f"output directory does not exist: {directory}")
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".tmp", dir=directory)
    try:
        kwargs = {"newline": ""} if "b" not in mode else {}
        with os.fdopen(fd, mode, **kwargs) as fh:
            yield fh
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except FileNotFoundError:
            pass
        raise


def write_text(path, text):
    with atomic_writer(path) as fh:
        fh.write(text)


def _write_frame(path, df):
    with atomic_writer(path, "wb") as fh:
        df.write_csv(fh, line_terminator="\n", float_precision=None)


def sha256_file(path, chunk=1 << 20):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(chunk), b""):
            h.update(block)
    return h.hexdigest()


def format_float(x):
    """Shortest round-trip decimal text for a float (``repr``)."""
    return repr(float(x))


def _require_file(path):
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no such file: {path}")
    return path


# -- config files ------------------------------------------------------------


def parse_config(text, allowed=None, source="<config>"):
    """Parse ``key = value`` lines; values are JSON literals.

    Blank lines and lines starting with ``#`` are ignored. Unknown keys (when
    ``allowed`` is given), duplicate keys and untyped values are rejected.
    """
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        if not sep or not key:
            raise ConfigurationError(f"{source}:{lineno}: expected 'key = value'")
        if allowed is not None and key not in allowed:
            raise ConfigurationError(
                f"{source}:{lineno}: unknown key {key!r}; allowed keys are {sorted(allowed)}"
            )
        if key in out:
            raise ConfigurationError(f"{source}:{lineno}: duplicate key {key!r}")
        try:
            out[key] = json.loads(value.strip())
        except json.JSONDecodeError:
            raise ConfigurationError(
                f"{source}:{lineno}: value for {key!r} is not a number, boolean, "
                f"quoted string or list: {value.strip()!r}"
            ) from None
    return out


def read_config(path, allowed=None):
    path = Path(path)
    if not path.is_file():
        raise ConfigurationError(f"config file not found: {path}")
    return parse_config(path.read_text(encoding="utf-8"), allowed, source=str(path))


def format_config(mapping):
    lines = []
    for key in sorted(mapping):
        value = mapping[key]
        if isinstance(value, float):
            text = format_float(value)
        else:
            text = json.dumps(value)
        lines.append(f"{key} = {text}")
    return "\n".join(lines) + "\n"


_SIGNAL_GROUPS = {
    "motion": (MotionParams, "motion_params"),
    "easy_noise": (EasyNoiseParams, "easy_noise_params"),
    "spurious": (SpuriousParams, "spurious_params"),
}
SIGNAL_SPEC_KEYS = {"n_motion", "n_easy_noise", "n_spurious_noise", "seed"} | {
    f"{prefix}.{name}"
    for prefix, (cls, _) in _SIGNAL_GROUPS.items()
    for name in cls.__dataclass_fields__
}


def signal_spec_from_mapping(mapping):
    """Build a :class:`SignalDatasetSpec` from flat keys such as ``motion.coverage``."""
    unknown = set(mapping) - SIGNAL_SPEC_KEYS
    if unknown:
        raise ConfigurationError(f"unknown dataset spec keys: {sorted(unknown)}")
    top = {k: v for k, v in mapping.items() if "." not in k}
    for prefix, (cls, attr) in _SIGNAL_GROUPS.items():
        sub = {}
        for key, value in mapping.items():
            head, _, name = key.partition(".")
            if head == prefix:
                sub[name] = tuple(value) if isinstance(value, list) else value
        top[attr] = cls(**sub)
    try:
        return SignalDatasetSpec(**top)
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigurationError):
            raise
        raise ConfigurationError(f"invalid dataset spec: {exc}") from None


# -- CSV scanning for precise error locations --------------------------------


def _scan_csv(path, header, row_check):
    """Slow pass that pinpoints the first bad record; raises DataFormatError."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            head = next(reader)
        except StopIteration:
            raise DataFormatError("file is empty", line=1) from None
        if head != header:
            raise DataFormatError(
                f"unexpected header (first columns {head[:3]}, {len(head)} columns); "
                f"expected {header[:3]}... with {len(header)} columns",
                line=1,
            )
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise DataFormatError(
                    f"expected {len(header)} fields, found {len(row)}", line=lineno
                )
            problem = row_check(row)
            if problem:
                raise DataFormatError(problem, line=lineno)


def _numeric_problem(fields, offset=0):
    for i, text in enumerate(fields, start=offset):
        try:
            value = float(text)
        except ValueError:
            return f"column {i + 1} is not a number: {text!r}"
        if not math.isfinite(value):
            return f"column {i + 1} is not finite: {text!r}"
    return None


def _label_problem(text):
    if text not in ("0", "1"):
        return f"label must be 0 or 1, got {text!r}"
    return None


def _read_frame(path, header, schema, row_check):
    path = _require_file(path)
    try:
        df = pl.read_csv(path, schema=schema, has_header=True, raise_if_empty=True)
    except pl.exceptions.NoDataError:
        raise DataFormatError("file is empty", line=1) from None
    except (pl.exceptions.PolarsError, UnicodeDecodeError) as exc:
        _scan_csv(path, header, row_check)
        raise DataFormatError(f"could not parse {path}: {exc}") from None
    with open(path, encoding="utf-8", newline="") as fh:
        first = next(csv.reader([fh.readline()]), [])
    if first != header:
        _scan_csv(path, header, row_check)
    if sum(df.null_count().row(0)) > 0:
        _scan_csv(path, header, row_check)
        raise DataFormatError(f"{path} contains empty fields")
    return df


def _numeric_check(skip):
    def check(row):
        return _label_problem(row[0]) or _numeric_problem(row[skip:], skip)
    return check


# -- datasets ----------------------------------------------------------------


def write_dataset_csv(path, dataset):
    frame = pl.DataFrame(np.asarray(dataset.samples, dtype=np.float64),
                         schema=DATASET_COLUMNS[2:], orient="row")
    slugs = [SourceKind(int(k)).slug for k in dataset.source_kinds]
    frame.insert_column(0, pl.Series("source", slugs, dtype=pl.String))
    frame.insert_column(0, pl.Series("label", np.asarray(dataset.labels, dtype=np.int8)))
    _write_frame(path, frame)


def read_dataset_csv(path):
    schema = {"label": pl.Int8, "source": pl.String}
    schema.update({c: pl.Float64 for c in DATASET_COLUMNS[2:]})

    def check(row):
        problem = _label_problem(row[0]) or _numeric_problem(row[2:], 2)
        if problem:
            return problem
        try:
            kind = SourceKind.from_slug(row[1])
        except ConfigurationError:
            return f"unknown source {row[1]!r}"
        if kind.label != int(row[0]):
            return f"label {row[0]} does not match source {row[1]!r}"
        return None

    df = _read_frame(path, DATASET_COLUMNS, schema, check)
    labels = df["label"].to_numpy().astype(np.int8)
    slugs = df["source"].to_list()
    try:
        kinds = np.array([SourceKind.from_slug(s) for s in slugs], dtype=np.int8)
    except ConfigurationError:
        _scan_csv(path, DATASET_COLUMNS, check)
        raise
    samples = df.select(DATASET_COLUMNS[2:]).to_numpy()
    if not np.all(np.isfinite(samples)) or not np.all((labels == 0) | (labels == 1)) or \
            not np.array_equal(labels, (kinds == SourceKind.MOTION).astype(np.int8)):
        _scan_csv(path, DATASET_COLUMNS, check)
    return SignalDataset(samples=np.ascontiguousarray(samples), labels=labels, source_kinds=kinds)


def write_toy_csv(path, X, y):
    X = np.asarray(X, dtype=np.float64)
    _write_frame(path, pl.DataFrame({
        "label": np.asarray(y, dtype=np.int8), "x": X[:, 0], "y": X[:, 1],
    }))


def read_toy_csv(path):
    schema = {"label": pl.Int8, "x": pl.Float64, "y": pl.Float64}
    df = _read_frame(path, TOY_COLUMNS, schema, _numeric_check(1))
    y = df["label"].to_numpy().astype(np.int8)
    X = df.select(["x", "y"]).to_numpy()
    if not np.all((y == 0) | (y == 1)) or not np.all(np.isfinite(X)):
        _scan_csv(path, TOY_COLUMNS, _numeric_check(1))
    return np.ascontiguousarray(X), y


# -- features ----------------------------------------------------------------


def write_features_csv(path, features, labels):
    F = np.asarray(features, dtype=np.float64).reshape(len(labels), N_FEATURES)
    frame = pl.DataFrame(F, schema=FEATURE_COLUMNS[1:], orient="row")
    frame.insert_column(0, pl.Series("label", np.asarray(labels, dtype=np.int8)))
    _write_frame(path, frame)


def read_features_csv(path):
    """Return ``(features (n, 1344), labels (n,))``."""
    schema = {"label": pl.Int8}
    schema.update({c: pl.Float64 for c in FEATURE_COLUMNS[1:]})
    df = _read_frame(path, FEATURE_COLUMNS, schema, _numeric_check(1))
    y = df["label"].to_numpy().astype(np.int8)
    df = df.drop("label")
    F = np.ascontiguousarray(df.to_numpy())
    del df
    if not np.all((y == 0) | (y == 1)) or not np.all(np.isfinite(F)):
        _scan_csv(path, FEATURE_COLUMNS, _numeric_check(1))
    return F, y


def read_scores_csv(path):
    schema = {"label": pl.Int8, "score": pl.Float64}
    df = _read_frame(path, SCORE_COLUMNS, schema, _numeric_check(1))
    return df["score"].to_numpy(), df["label"].to_numpy().astype(np.int8)


# -- models ------------------------------------------------------------------


def model_to_dict(w):
    tensors = [
        {"name": f"gate.{name}", "shape": [], "values": [getattr(w.gate, name)]}
        for name in ("w11", "w12", "w2a", "w2b")
    ]
    for name, arr in w.cnn.tensors().items():
        tensors.append({
            "name": f"cnn.{name}",
            "shape": list(arr.shape),
            "values": [float(v) for v in arr.ravel(order="C")],
        })
    return {
        "format": MODEL_FORMAT,
        "version": MODEL_VERSION,
        "flags": {
            "conv_kernels_unit_norm": True,
            "dense_unit_interval": True,
            "frozen_gate_p1": bool(w.frozen_gate_p1),
        },
        "tensors": tensors,
    }


def model_from_dict(doc):
    if not isinstance(doc, dict) or doc.get("format") != MODEL_FORMAT:
        raise DataFormatError("not a reqgate model document")
    if doc.get("version") != MODEL_VERSION:
        raise DataFormatError(f"unsupported model version {doc.get('version')!r}")
    try:
        tensors = {t["name"]: t for t in doc["tensors"]}
        flags = doc["flags"]
        gate = {}
        for name in ("w11", "w12", "w2a", "w2b"):
            t = tensors.pop(f"gate.{name}")
            if t["shape"] != [] or len(t["values"]) != 1:
                raise DataFormatError(f"gate.{name} must be a scalar")
            gate[name] = float(t["values"][0])
        cnn = {}
        for name, shape in CnnWeights.SHAPES.items():
            t = tensors.pop(f"cnn.{name}")
            if tuple(t["shape"]) != shape:
                raise DataFormatError(f"cnn.{name} has shape {t['shape']}, expected {list(shape)}")
            values = np.array(t["values"], dtype=np.float64)
            if values.size != math.prod(shape):
                raise DataFormatError(f"cnn.{name} holds {values.size} values for shape {list(shape)}")
            cnn[name] = values.reshape(shape)
        frozen = bool(flags["frozen_gate_p1"])
    except KeyError as exc:
        raise DataFormatError(f"model document lacks {exc}") from None
    except (TypeError, ValueError) as exc:
        raise DataFormatError(f"bad model document: {exc}") from None
    if tensors:
        raise DataFormatError(f"unexpected tensors in model: {sorted(tensors)}")
    return ProductModelWeights(gate=GateWeights(**gate), cnn=CnnWeights(**cnn), frozen_gate_p1=frozen)


def dumps_model(w):
    return json.dumps(model_to_dict(w), indent=1, sort_keys=True, allow_nan=False) + "\n"


def save_model(path, w):
    write_text(path, dumps_model(w))


def load_model(path):
    path = _require_file(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DataFormatError(f"model file is not valid JSON: {exc.msg}", line=exc.lineno) from None
    return model_from_dict(doc)


# -- reports -----------------------------------------------------------------


def _cell(value):
    if isinstance(value, float):
        return format_float(value)
    return str(value)


def report_csv_text(report, timings=False):
    """CSV of the per-stage records. ``seconds`` stays empty unless ``timings``."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(REPORT_COLUMNS)
    for s in report.stages:
        row = [getattr(s, c) for c in REPORT_COLUMNS]
        row[-1] = s.seconds if timings else ""
        writer.writerow([_cell(v) for v in row])
    return buf.getvalue()


def report_table_text(report, timings=False):
    head = (f"{'stage':>5}  {'lambda0':>8} {'lambda1':>8}  {'loss train':>11} {'loss val':>11}  "
            f"{'%TP train':>9} {'%TP val':>9}  {'%FP train':>9} {'%FP val':>9}  "
            f"{'peak active':>11} {'iters':>6}")
    if timings:
        head += f" {'seconds':>8}"
    lines = [head, "-" * len(head)]
    for s in report.stages:
        line = (f"{s.stage:>5}  {s.lambda0:>8.4g} {s.lambda1:>8.4g}  {s.loss_train:>11.4g} "
                f"{s.loss_val:>11.4g}  {100 * s.tp_train:>9.3f} {100 * s.tp_val:>9.3f}  "
                f"{100 * s.fp_train:>9.4f} {100 * s.fp_val:>9.4f}  {s.peak_active:>11d} {s.iters:>6d}")
        if timings:
            line += f" {s.seconds:>8.2f}"
        lines.append(line)
    lines.append("")
    lines.append(f"requirements met: {'yes' if report.requirements_met else 'no'}"
                 f"{'  (dead model)' if report.dead_model else ''}")
    return "\n".join(lines) + "\n"


def report_json_text(report, extra=None, timings=False):
    stages = []
    for s in report.stages:
        d = dict(vars(s))
        if not timings:
            d.pop("seconds")
        stages.append(d)
    doc = {
        "stages": stages,
        "phase1": report.phase1,
        "n_train": report.n_train,
        "n_train_class0": report.n_train_class0,
        "n_train_class1": report.n_train_class1,
        "requirements_met": report.requirements_met,
        "dead_model": report.dead_model,
        "total_iters": report.total_iters,
        "total_sample_evals": report.total_sample_evals,
    }
    if extra:
        doc.update(extra)
    return json.dumps(doc, indent=1, sort_keys=True) + "\n"


# -- ROC ---------------------------------------------------------------------


def roc_csv_text(curves):
    """``curves`` is a list of (ratio or None, RocCurve); a ratio adds a column."""
    with_ratio = any(r is not None for r, _ in curves)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow((["class_weight_ratio"] if with_ratio else []) + ROC_COLUMNS)
    for ratio, curve in curves:
        for q in curve.points:
            row = [format_float(q.threshold), format_float(q.fp_fraction), format_float(q.tp_fraction)]
            writer.writerow(([format_float(ratio)] if with_ratio else []) + row)
    return buf.getvalue()


# -- manifests ---------------------------------------------------------------


def manifest_text(command, version, seed, config, inputs, outputs, parameters=None):
    """JSON run manifest with sha256 digests of every input and output file."""
    doc = {
        "command": command,
        "tool_version": version,
        "seed": seed,
        "config": None if config is None else str(config),
        "inputs": {str(p): sha256_file(p) for p in inputs},
        "outputs": {str(p): sha256_file(p) for p in outputs},
        "parameters": parameters or {},
    }
    return json.dumps(doc, indent=1, sort_keys=True) + "\n"


def write_manifest(path, *args, **kwargs):
    write_text(path, manifest_text(*args, **kwargs))
