"""Reading stay records from CSV, schema/config files, and JSON fit reports."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Mapping, Optional, Sequence

import yaml

from .errors import ConfigError, DataDomainError, ParseError, SchemaError
from .links import FeatureSchema, FeatureSpec
from .mixture import FORMAT_VERSION

LOS_COLUMN = "los_days"
DAYS_COLUMN, HOURS_COLUMN = "days", "hours"


@dataclass(frozen=True)
class StayRecord:
    """One hospital stay; ``row`` is the 1-based data row in the source file.

    ``features`` holds validated values (after any schema transform) and
    ``raw`` the untouched strings of every column, e.g. the full DRG code.
    """

    los_days: Optional[float]
    features: Mapping[str, Any] = field(default_factory=dict)
    row: Optional[int] = None
    raw: Mapping[str, str] = field(default_factory=dict, compare=False, repr=False)


def table3_schema() -> FeatureSchema:
    """Schema of the usual administrative explanatory variables.

    Categorical level sets are left open and frozen from the training data;
    DRG codes are cut to their first two characters, as the full code has
    hundreds of levels. No parameter uses a covariate until the schema says so.
    """
    categorical = ("gender", "marital_status", "ethnicity", "country", "disease_type", "drg",
                   "day_of_arrival", "admission_type", "admission_unit", "discharge_unit",
                   "care_type")
    feats = [FeatureSpec("age", "numeric", minimum=0.0)]
    feats += [FeatureSpec(name, "categorical", transform="prefix:2" if name == "drg" else None)
              for name in categorical]
    feats += [FeatureSpec("hour_of_arrival", "numeric", minimum=0.0, maximum=23.0),
              FeatureSpec("month_of_arrival", "numeric", minimum=1.0, maximum=12.0)]
    return FeatureSchema(tuple(feats))


# --------------------------------------------------------------------------- #
# YAML / JSON configuration
# --------------------------------------------------------------------------- #


def load_yaml(path) -> dict:
    """Load a YAML mapping; ``.json`` files go through the JSON parser.

    PyYAML follows YAML 1.1, which reads ``1e-10`` as a string, so JSON
    documents (such as fit reports) must not take the YAML path.
    """
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read ({exc.strerror or exc})") from exc
    try:
        data = json.loads(text) if path.suffix.lower() == ".json" else yaml.safe_load(text)
    except (yaml.YAMLError, json.JSONDecodeError) as exc:
        raise ConfigError(f"{path}: cannot parse: {exc}") from exc
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected a mapping at the top level")
    return data


def load_schema(path) -> FeatureSchema:
    return FeatureSchema.from_dict(load_yaml(path))


# --------------------------------------------------------------------------- #
# CSV
# --------------------------------------------------------------------------- #


def _los(raw: Mapping[str, str], row: int) -> float:
    try:
        if raw.get(LOS_COLUMN) not in (None, ""):
            los = float(raw[LOS_COLUMN])
        else:
            los = float(raw[DAYS_COLUMN]) + float(raw[HOURS_COLUMN]) / 24.0
    except (TypeError, ValueError, KeyError):
        raise ParseError(f"row {row}: length of stay is missing or not a number", row=row) from None
    if not (math.isfinite(los) and los > 0):
        raise DataDomainError(f"row {row}: length of stay must be positive, got {los}", row=row)
    return los


def read_csv(path, schema: Optional[FeatureSchema] = None, require_los: bool = True) -> list[StayRecord]:
    """Parse and validate stay records.

    The length of stay comes from ``los_days`` or from a ``days``/``hours``
    pair. Declared features are validated and converted; other columns are
    kept as raw strings. Errors name the 1-based data row. With
    ``require_los=False`` a blank or absent length of stay gives ``None``.
    """
    path = Path(path)
    records = []
    try:
        with path.open(newline="", encoding="utf-8") as handle:
            reader = csv.reader(handle, strict=True)
            try:
                header = next(reader)
            except StopIteration:
                raise ParseError(f"{path}: missing header row") from None
            header = [h.strip() for h in header]
            has_los = LOS_COLUMN in header or {DAYS_COLUMN, HOURS_COLUMN} <= set(header)
            if require_los and not has_los:
                raise ParseError(f"{path}: header needs {LOS_COLUMN!r} or {DAYS_COLUMN!r}+{HOURS_COLUMN!r}")
            features = schema.features if schema is not None else ()
            absent = [f.name for f in features if f.name not in header]
            if absent:
                raise SchemaError(f"{path}: columns {absent} declared in the schema are missing")
            skip = schema is not None and schema.missing == "skip"
            row = 0
            for row, values in enumerate(reader, start=1):
                if not values:
                    continue
                if len(values) != len(header):
                    raise ParseError(f"row {row}: expected {len(header)} fields, found {len(values)}",
                                     row=row)
                raw = dict(zip(header, values))
                given = any(raw.get(c, "").strip() for c in (LOS_COLUMN, DAYS_COLUMN, HOURS_COLUMN))
                los = _los(raw, row) if require_los or given else None
                out = {k: v for k, v in raw.items()
                       if k not in (LOS_COLUMN, DAYS_COLUMN, HOURS_COLUMN)}
                if skip and any(raw[f.name].strip() == "" for f in features):
                    continue
                for spec in features:
                    out[spec.name] = spec.coerce(raw[spec.name], row)
                records.append(StayRecord(los, out, row, raw))
    except csv.Error as exc:
        raise ParseError(f"{path}: malformed CSV near row {reader.line_num - 1}: {exc}") from exc
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read ({exc.strerror or exc})") from exc
    return records


def _fmt(value) -> str:
    if isinstance(value, float):
        return format(value, ".17g")
    return str(value)


def write_csv(path, records: Sequence[StayRecord], columns: Optional[Sequence[str]] = None) -> None:
    """Write records with ``los_days`` first; floats keep 17 significant digits."""
    if columns is None:
        seen = {}
        for rec in records:
            seen.update(dict.fromkeys(rec.features))
        columns = list(seen)
    path = Path(path)
    try:
        with path.open("w", newline="", encoding="utf-8") as handle:
            writer = csv.writer(handle, lineterminator="\n")
            writer.writerow([LOS_COLUMN, *columns])
            for rec in records:
                writer.writerow([_fmt(float(rec.los_days))]
                                + [_fmt(rec.features.get(c, "")) for c in columns])
    except OSError as exc:
        raise ConfigError(f"{path}: cannot write ({exc.strerror or exc})") from exc


# --------------------------------------------------------------------------- #
# Reports
# --------------------------------------------------------------------------- #


def _check_finite(obj, where="report"):
    if isinstance(obj, float) and not math.isfinite(obj):
        raise ValueError(f"{where} contains a non-finite number")
    if isinstance(obj, dict):
        for k, v in obj.items():
            _check_finite(v, f"{where}.{k}")
    elif isinstance(obj, list):
        for i, v in enumerate(obj):
            _check_finite(v, f"{where}[{i}]")


def write_json(document: dict, path, timestamp: Optional[str] = None) -> None:
    """Write a versioned JSON document; the timestamp lives only in ``metadata``."""
    doc = {"format_version": FORMAT_VERSION,
           "metadata": {"timestamp": timestamp or datetime.now(timezone.utc).isoformat()}}
    doc.update(document)
    _check_finite(doc)
    path = Path(path)
    try:
        path.write_text(json.dumps(doc, indent=2, allow_nan=False) + "\n", encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"{path}: cannot write ({exc.strerror or exc})") from exc


def write_report(result, path, gof=None, extra: Optional[Mapping[str, Any]] = None,
                 timestamp: Optional[str] = None) -> None:
    """Persist a fit result (and optional GoF table) as JSON."""
    doc = result.to_dict()
    if gof is not None:
        doc["gof"] = gof.to_records()
    if extra:
        doc.update(extra)
    write_json(doc, path, timestamp)


def read_report(path) -> dict:
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read ({exc.strerror or exc})") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
    version = doc.get("format_version")
    if version != FORMAT_VERSION:
        raise ConfigError(f"{path}: unsupported format_version {version!r}")
    return doc
