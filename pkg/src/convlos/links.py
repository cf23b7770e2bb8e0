"""Covariate links: ``s(x) = h(x_s . beta_s)`` for each modelled parameter.

A :class:`FeatureSchema` turns raw records into a :class:`DesignMatrix`
(intercept, numeric columns, one-hot categorical columns with the reference
level dropped).  A :class:`ParameterMap` then produces one parameter value
per row through a link ``h`` chosen so the value stays inside the
parameter's domain.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Any, Iterable, Mapping, Optional, Sequence

import numpy as np
from scipy.special import expit, logit

from .errors import ConfigError, SchemaError, ShapeError

INTERCEPT = "intercept"


def _softplus(x):
    return np.logaddexp(0.0, x)


def _softplus_inv(y):
    y = np.asarray(y, dtype=float)
    return y + np.log(-np.expm1(-y))


LINKS = {
    "identity": (lambda x: np.asarray(x, dtype=float), lambda y: np.asarray(y, dtype=float)),
    "exp": (np.exp, np.log),
    "logit_inverse": (expit, logit),
    "softplus": (_softplus, _softplus_inv),
}
LINK_RANGE = {"identity": "real", "exp": "positive", "softplus": "positive", "logit_inverse": "unit"}

TARGET_DOMAIN = {
    "p": "unit",
    "pi": "unit",
    "r": "positive",
    "sigma": "positive",
    "lambda": "positive",
    "nu": "positive",
    "sigma_S": "positive",
    "m": "real",
    "mu_S": "real",
}
DEFAULT_LINK = {"unit": "logit_inverse", "positive": "exp", "real": "identity"}
_INSIDE = {"real": {"real", "positive", "unit"}, "positive": {"positive", "unit"}, "unit": {"unit"}}


def default_link(target: str) -> str:
    if target not in TARGET_DOMAIN:
        raise ConfigError(f"parameter {target!r} cannot carry a link (known: {sorted(TARGET_DOMAIN)})")
    return DEFAULT_LINK[TARGET_DOMAIN[target]]


def link_forward(link: str, eta):
    return LINKS[link][0](eta)


def link_inverse(link: str, value):
    return LINKS[link][1](value)


def group_rows(table: np.ndarray, max_groups: int):
    """Label identical rows of a 2-d array with codes ``0..G-1``.

    Returns ``(codes, G)``, or ``None`` as soon as more than ``max_groups``
    distinct rows appear. Columns are factorised one at a time, which is far
    cheaper than a row-wise ``np.unique``.
    """
    n = table.shape[0]
    codes = np.zeros(n, dtype=np.int64)
    size = 1
    for col in np.asarray(table).T:
        levels, inverse = np.unique(col, return_inverse=True)
        if len(levels) > max_groups:
            return None
        _, codes = np.unique(codes * len(levels) + inverse.ravel(), return_inverse=True)
        codes = codes.ravel()
        size = int(codes.max()) + 1 if n else 0
        if size > max_groups:
            return None
    return codes, size


def split_groups(codes: np.ndarray, size: int) -> list[np.ndarray]:
    """Row indices of each group, in ascending order within a group."""
    order = np.argsort(codes, kind="stable")
    bounds = np.searchsorted(codes[order], np.arange(size + 1))
    return [order[bounds[g]:bounds[g + 1]] for g in range(size)]


MAX_DESIGN_GROUPS = 256


@dataclass(frozen=True)
class DesignMatrix:
    values: np.ndarray
    column_names: tuple[str, ...]

    def __post_init__(self):
        values = np.array(self.values, dtype=float)
        if values.ndim != 2 or values.shape[1] != len(self.column_names):
            raise ShapeError(
                f"design matrix has shape {values.shape} but {len(self.column_names)} column names")
        if not np.all(np.isfinite(values)):
            raise SchemaError("design matrix contains missing or non-finite values")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "column_names", tuple(self.column_names))

    @property
    def n_rows(self) -> int:
        return self.values.shape[0]

    def columns(self, names: Sequence[str]) -> np.ndarray:
        index = {name: i for i, name in enumerate(self.column_names)}
        missing = [name for name in names if name not in index]
        if missing:
            raise ShapeError(f"columns not in design matrix: {missing}")
        return self.values[:, [index[name] for name in names]]

    def take(self, rows) -> "DesignMatrix":
        return DesignMatrix(self.values[rows], self.column_names)

    @cached_property
    def row_groups(self):
        """``(codes, representative rows)`` of identical design rows, or ``None`` if too many."""
        grouped = group_rows(self.values, MAX_DESIGN_GROUPS)
        if grouped is None:
            return None
        codes, _ = grouped
        _, first = np.unique(codes, return_index=True)
        return codes, self.take(first)

    @classmethod
    def intercept_only(cls, n: int) -> "DesignMatrix":
        return cls(np.ones((n, 1)), (INTERCEPT,))


@dataclass(frozen=True)
class ParameterMap:
    """Coefficients and link producing one parameter from design columns.

    An empty ``selected_columns`` means a constant map: ``beta`` has length one
    and every row gets ``h(beta[0])``.
    """

    target: str
    beta: np.ndarray
    selected_columns: tuple[str, ...] = ()
    link: Optional[str] = None

    def __post_init__(self):
        link = self.link or default_link(self.target)
        if link not in LINKS:
            raise ConfigError(f"unknown link {link!r}")
        domain = TARGET_DOMAIN.get(self.target)
        if domain is None:
            raise ConfigError(f"parameter {self.target!r} cannot carry a link")
        if LINK_RANGE[link] not in _INSIDE[domain]:
            raise ConfigError(f"link {link!r} can leave the domain of {self.target!r} ({domain})")
        beta = np.array(self.beta, dtype=float).ravel()
        expected = max(1, len(self.selected_columns))
        if beta.size != expected:
            raise ShapeError(f"{self.target}: beta has {beta.size} entries, expected {expected}")
        beta.setflags(write=False)
        object.__setattr__(self, "beta", beta)
        object.__setattr__(self, "link", link)
        object.__setattr__(self, "selected_columns", tuple(self.selected_columns))

    @classmethod
    def constant(cls, target: str, value: float, link: Optional[str] = None) -> "ParameterMap":
        link = link or default_link(target)
        return cls(target, [float(link_inverse(link, value))], (), link)

    @property
    def is_constant(self) -> bool:
        return not self.selected_columns

    def with_beta(self, beta) -> "ParameterMap":
        return ParameterMap(self.target, beta, self.selected_columns, self.link)

    def linear_predictor(self, matrix: Optional[DesignMatrix], n: Optional[int] = None):
        if self.is_constant:
            rows = matrix.n_rows if matrix is not None else (n or 1)
            return np.full(rows, self.beta[0])
        if matrix is None:
            raise ShapeError(f"{self.target}: covariate map needs a design matrix")
        return matrix.columns(self.selected_columns) @ self.beta


def apply(pmap: ParameterMap, matrix: Optional[DesignMatrix], n: Optional[int] = None) -> np.ndarray:
    """Row-wise parameter values ``h(x_i . beta)``."""
    return np.asarray(link_forward(pmap.link, pmap.linear_predictor(matrix, n)), dtype=float)


# --------------------------------------------------------------------------- #
# Feature schema and encoding
# --------------------------------------------------------------------------- #


@dataclass(frozen=True)
class FeatureSpec:
    """One raw feature.

    ``transform`` may be ``"prefix:N"`` (keep the first N characters of a code
    before the level lookup).  Categorical features without declared levels
    get them from the data when the schema is frozen.
    """

    name: str
    kind: str
    levels: tuple[str, ...] = ()
    reference: Optional[str] = None
    transform: Optional[str] = None
    minimum: Optional[float] = None
    maximum: Optional[float] = None

    def __post_init__(self):
        if self.kind not in ("numeric", "categorical"):
            raise ConfigError(f"feature {self.name!r}: kind must be numeric or categorical")
        object.__setattr__(self, "levels", tuple(str(v) for v in self.levels))
        if self.reference is not None and self.levels and str(self.reference) not in self.levels:
            raise ConfigError(f"feature {self.name!r}: reference {self.reference!r} is not a level")
        if self.transform is not None and not self.transform.startswith("prefix:"):
            raise ConfigError(f"feature {self.name!r}: unknown transform {self.transform!r}")

    @property
    def reference_level(self) -> str:
        return str(self.reference) if self.reference is not None else self.levels[0]

    def coerce(self, raw: Any, row: Optional[int] = None):
        """Validate one raw value and return it in canonical form."""
        if raw is None or (isinstance(raw, str) and raw.strip() == ""):
            raise SchemaError(f"row {row}: missing value for {self.name!r}", row=row, field=self.name)
        if self.kind == "numeric":
            try:
                value = float(raw)
            except (TypeError, ValueError):
                raise SchemaError(f"row {row}: {self.name!r} is not numeric: {raw!r}",
                                  row=row, field=self.name) from None
            if not np.isfinite(value):
                raise SchemaError(f"row {row}: {self.name!r} is not finite", row=row, field=self.name)
            if (self.minimum is not None and value < self.minimum) or (
                    self.maximum is not None and value > self.maximum):
                raise SchemaError(f"row {row}: {self.name!r}={value} outside declared range",
                                  row=row, field=self.name)
            return value
        value = str(raw).strip()
        if self.transform is not None:
            value = value[: int(self.transform.split(":", 1)[1])]
        if self.levels and value not in self.levels:
            raise SchemaError(f"row {row}: unknown level {value!r} for {self.name!r}",
                              row=row, field=self.name)
        return value

    def column_names(self) -> list[str]:
        if self.kind == "numeric":
            return [self.name]
        ref = self.reference_level
        return [f"{self.name}={level}" for level in self.levels if level != ref]


# "reject" raises on a missing feature value, "skip" drops the record
MISSING_POLICIES = ("reject", "skip")


@dataclass(frozen=True)
class FeatureSchema:
    """Declared features plus the covariate selection for each parameter."""

    features: tuple[FeatureSpec, ...] = ()
    parameters: Mapping[str, tuple[str, ...]] = field(default_factory=dict)
    links: Mapping[str, str] = field(default_factory=dict)
    missing: str = "reject"

    def __post_init__(self):
        if self.missing not in MISSING_POLICIES:
            raise ConfigError(f"missing-value policy must be one of {MISSING_POLICIES}")
        names = [f.name for f in self.features]
        if len(set(names)) != len(names):
            raise ConfigError("duplicate feature names in schema")
        for target, feats in self.parameters.items():
            default_link(target)
            if target == "pi" and feats:
                raise ConfigError("the long-stay probability pi cannot depend on covariates")
            unknown = [f for f in feats if f not in names]
            if unknown:
                raise ConfigError(f"parameter {target!r} uses undeclared features {unknown}")

    def feature(self, name: str) -> FeatureSpec:
        for spec in self.features:
            if spec.name == name:
                return spec
        raise KeyError(name)

    def frozen(self, records: Iterable[Mapping[str, Any]]) -> "FeatureSchema":
        """Fill in missing categorical levels from ``records`` (sorted)."""
        records = list(records)
        out = []
        for spec in self.features:
            if spec.kind == "categorical" and not spec.levels:
                seen = sorted({spec.coerce(rec.get(spec.name), i) for i, rec in enumerate(records)})
                spec = FeatureSpec(spec.name, spec.kind, tuple(seen), spec.reference,
                                   spec.transform, spec.minimum, spec.maximum)
            out.append(spec)
        return FeatureSchema(tuple(out), dict(self.parameters), dict(self.links), self.missing)

    def parameter_columns(self, target: str) -> tuple[str, ...]:
        """Design columns (intercept first) feeding ``target``; empty if constant."""
        feats = self.parameters.get(target, ())
        if not feats:
            return ()
        cols = [INTERCEPT]
        for name in feats:
            cols.extend(self.feature(name).column_names())
        return tuple(cols)

    def to_dict(self) -> dict:
        feats = []
        for f in self.features:
            entry = {"name": f.name, "type": f.kind}
            if f.levels:
                entry["levels"] = list(f.levels)
            for key, value in (("reference", f.reference), ("transform", f.transform),
                               ("min", f.minimum), ("max", f.maximum)):
                if value is not None:
                    entry[key] = value
            feats.append(entry)
        return {"features": feats,
                "parameters": {k: list(v) for k, v in self.parameters.items()},
                "links": dict(self.links),
                "missing": self.missing}

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "FeatureSchema":
        feats = []
        for entry in data.get("features", []) or []:
            try:
                feats.append(FeatureSpec(
                    name=str(entry["name"]),
                    kind=str(entry.get("type", "numeric")),
                    levels=tuple(entry.get("levels", ()) or ()),
                    reference=None if entry.get("reference") is None else str(entry["reference"]),
                    transform=entry.get("transform"),
                    minimum=entry.get("min"),
                    maximum=entry.get("max"),
                ))
            except KeyError as exc:
                raise ConfigError(f"feature entry missing key {exc}") from None
        params = {str(k): tuple(v or ()) for k, v in (data.get("parameters") or {}).items()}
        links = {str(k): str(v) for k, v in (data.get("links") or {}).items()}
        return cls(tuple(feats), params, links, str(data.get("missing", "reject")))


def encode(records: Sequence[Mapping[str, Any]], schema: FeatureSchema) -> DesignMatrix:
    """Build the design matrix: intercept, then each feature in schema order."""
    names = [INTERCEPT]
    for spec in schema.features:
        names.extend(spec.column_names())
    values = np.zeros((len(records), len(names)))
    values[:, 0] = 1.0
    for i, rec in enumerate(records):
        col = 1
        for spec in schema.features:
            value = spec.coerce(rec.get(spec.name), i)
            if spec.kind == "numeric":
                values[i, col] = value
                col += 1
                continue
            if not spec.levels:
                raise SchemaError(f"feature {spec.name!r} has no levels; freeze the schema first",
                                  row=i, field=spec.name)
            cols = spec.column_names()
            if value != spec.reference_level:
                values[i, col + cols.index(f"{spec.name}={value}")] = 1.0
            col += len(cols)
    return DesignMatrix(values, tuple(names))
