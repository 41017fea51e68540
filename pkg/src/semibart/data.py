"""Data ingestion, formula parsing, design matrices, and response scaling.

The linear design ``X1`` carries dummy-encoded fixed effects (reference
level dropped, never an intercept), ``Z`` carries random-effect indicator
columns, and the tree design ``X2`` carries raw columns: categorical
covariates enter as level codes, not dummies, so a split on a primary
categorical is detectable by name.
"""

from __future__ import annotations

import csv
import logging
import re
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger(__name__)

MISSING_TOKENS = {"", "NA", "NaN", "nan", "na", "NULL", "null"}


class DataError(ValueError):
    """Problem with the input data or the model specification."""


class FormulaError(DataError):
    """Malformed model formula; carries the offending position."""

    def __init__(self, message: str, pos: int):
        self.pos = pos
        super().__init__(f"{message} (at position {pos})")


# --- tables -----------------------------------------------------------------


@dataclass
class Column:
    """A typed data column: numeric values, or level codes with a level list."""

    name: str
    values: np.ndarray
    levels: list[str] | None = None

    @property
    def is_categorical(self) -> bool:
        return self.levels is not None


@dataclass
class Table:
    columns: dict[str, Column]
    n_rows: int
    dropped_rows: int = 0

    @property
    def names(self) -> list[str]:
        return list(self.columns)

    def __getitem__(self, name: str) -> Column:
        try:
            return self.columns[name]
        except KeyError:
            raise DataError(f"column {name!r} not found in the data") from None


def _is_number(token: str) -> bool:
    try:
        float(token)
        return True
    except ValueError:
        return False


def load_table(path, delimiter: str = ",", usecols: list[str] | None = None) -> Table:
    """Read a delimited text file with a header row into a typed table.

    Columns whose non-missing values all parse as numbers become numeric;
    anything else becomes categorical with lexicographically ordered
    levels. Rows with a missing value in any of ``usecols`` (default: all
    columns) are dropped, and the count is reported.
    """
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh, delimiter=delimiter)
            rows = [r for r in reader if r]
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    if not rows:
        raise DataError(f"{path}: empty file")
    header = [h.strip() for h in rows[0]]
    if len(set(header)) != len(header):
        raise DataError(f"{path}: duplicate column names in header")
    body = rows[1:]
    for i, row in enumerate(body):
        if len(row) != len(header):
            raise DataError(
                f"{path}: row {i + 2} has {len(row)} fields, expected {len(header)}"
            )
    if usecols is None:
        used = header
    else:
        missing = [c for c in usecols if c not in header]
        if missing:
            raise DataError(f"{path}: columns not present: {', '.join(missing)}")
        used = usecols
    used_idx = [header.index(c) for c in used]

    kept = [
        row for row in body if all(row[j].strip() not in MISSING_TOKENS for j in used_idx)
    ]
    dropped = len(body) - len(kept)
    if dropped:
        log.info("dropped %d row(s) with missing values in used columns", dropped)
    if not kept:
        raise DataError(f"{path}: no usable rows after dropping incomplete cases")

    columns: dict[str, Column] = {}
    for j, name in enumerate(header):
        raw = [row[j].strip() for row in kept]
        present = [v for v in raw if v not in MISSING_TOKENS]
        if present and all(_is_number(v) for v in present):
            vals = np.array(
                [float(v) if v not in MISSING_TOKENS else np.nan for v in raw]
            )
            columns[name] = Column(name, vals)
        else:
            levels = sorted({v for v in present})
            code = {lvl: c for c, lvl in enumerate(levels)}
            vals = np.array(
                [code[v] if v not in MISSING_TOKENS else -1 for v in raw],
                dtype=np.int32,
            )
            columns[name] = Column(name, vals, levels)
    return Table(columns, len(kept), dropped)


# --- formulas -----------------------------------------------------------------

_TOKEN_RE = re.compile(r"\s*(?:(?P<name>[A-Za-z_.][A-Za-z0-9_.]*)|(?P<num>\d+)|(?P<op>[~+|()]))")


def _tokenize(text: str) -> list[tuple[str, str, int]]:
    tokens, pos = [], 0
    while pos < len(text):
        m = _TOKEN_RE.match(text, pos)
        if m is None:
            if text[pos:].strip() == "":
                break
            raise FormulaError(f"unexpected character {text[pos]!r}", pos)
        kind = m.lastgroup
        tokens.append((kind, m.group(kind), m.start(kind)))
        pos = m.end()
    return tokens


@dataclass
class ModelSpec:
    """Parsed model: response, fixed terms, random (slope, group) terms,
    and the tree-design covariate names."""

    response: str
    fixed: list[str] = field(default_factory=list)
    random: list[tuple[str | None, str]] = field(default_factory=list)
    x2: list[str] = field(default_factory=list)

    @property
    def slope_names(self) -> list[str]:
        return [s for s, _ in self.random if s is not None]

    @property
    def primary_names(self) -> frozenset[str]:
        return frozenset(self.fixed) | frozenset(self.slope_names)

    @property
    def shared_names(self) -> frozenset[str]:
        return self.primary_names & frozenset(self.x2)


def parse_formula(text: str) -> ModelSpec:
    """Parse ``response ~ 0 (+ term)*`` where a term is a covariate name or
    ``(slope | group)`` / ``(1 | group)``. The leading 0 is mandatory: the
    linear design must not contain an intercept column."""
    tokens = _tokenize(text)
    i = 0

    def peek():
        return tokens[i] if i < len(tokens) else ("end", "", len(text))

    def take(kind, value=None, what=""):
        nonlocal i
        tk, tv, tp = peek()
        if tk != kind or (value is not None and tv != value):
            raise FormulaError(f"expected {what or value or kind}, found {tv or 'end of formula'}", tp)
        i += 1
        return tv

    response = take("name", what="a response name")
    take("op", "~")
    tk, tv, tp = peek()
    if not (tk == "num" and tv == "0"):
        raise FormulaError(
            "an intercept is not permitted in the linear design; "
            "the formula must start its right-hand side with '0'", tp
        )
    i += 1

    fixed: list[str] = []
    random: list[tuple[str | None, str]] = []
    while i < len(tokens):
        take("op", "+")
        tk, tv, tp = peek()
        if tk == "name":
            i += 1
            if tv not in fixed:
                fixed.append(tv)
        elif tk == "op" and tv == "(":
            i += 1
            tk2, tv2, tp2 = peek()
            if tk2 == "name":
                slope: str | None = tv2
            elif tk2 == "num" and tv2 == "1":
                slope = None
            else:
                raise FormulaError("expected a slope name or 1 inside (...)", tp2)
            i += 1
            take("op", "|")
            group = take("name", what="a grouping factor name")
            take("op", ")")
            random.append((slope, group))
        else:
            raise FormulaError(f"expected a term, found {tv!r}", tp)
    return ModelSpec(response, fixed, random)


# --- design matrices ----------------------------------------------------------


@dataclass
class CategoricalEffect:
    """A categorical fixed effect: all levels (levels[0] is the dropped
    reference) and the X1 columns of the non-reference dummies."""

    name: str
    levels: list[str]
    columns: list[int]


@dataclass
class DesignMatrices:
    y: np.ndarray
    x1: np.ndarray
    z: np.ndarray
    x2: np.ndarray
    x1_names: list[str]
    z_names: list[str]
    x2_names: list[str]
    x2_is_categorical: np.ndarray
    x2_levels: list[list[str] | None]
    shared_x2: frozenset[int]
    categorical_x1_x2: frozenset[int]
    cat_registry: list[CategoricalEffect]
    primary_names: frozenset[str]
    response_name: str

    @property
    def n(self) -> int:
        return self.y.shape[0]

    @property
    def p1(self) -> int:
        return self.x1.shape[1]

    @property
    def q(self) -> int:
        return self.z.shape[1]

    @property
    def p2(self) -> int:
        return self.x2.shape[1]


def encode_design(table: Table, spec: ModelSpec) -> DesignMatrices:
    """Build (X1, Z, X2, y) from a typed table and a model spec.

    Categorical fixed effects are dummy-encoded with the first
    lexicographic level as the dropped reference; X2 keeps raw columns
    (level codes for categoricals); the shared set records which X2
    columns also appear among the fixed/random-slope terms.
    """
    n = table.n_rows
    ycol = table[spec.response]
    if ycol.is_categorical:
        raise DataError(f"response {spec.response!r} must be numeric")
    y = ycol.values.astype(float)

    x1_cols: list[np.ndarray] = []
    x1_names: list[str] = []
    registry: list[CategoricalEffect] = []
    for name in spec.fixed:
        col = table[name]
        if col.is_categorical:
            levels = col.levels
            if len(levels) < 2:
                raise DataError(f"categorical covariate {name!r} has a single level")
            entry_cols = []
            for c, lvl in enumerate(levels[1:], start=1):
                x1_cols.append((col.values == c).astype(float))
                x1_names.append(f"{name}={lvl}")
                entry_cols.append(len(x1_cols) - 1)
            registry.append(CategoricalEffect(name, list(levels), entry_cols))
        else:
            vals = col.values.astype(float)
            if np.ptp(vals) == 0:
                raise DataError(f"covariate {name!r} is constant; X1 must not contain a constant column")
            x1_cols.append(vals)
            x1_names.append(name)

    z_cols: list[np.ndarray] = []
    z_names: list[str] = []
    for slope, group in spec.random:
        gcol = table[group]
        if not gcol.is_categorical:
            raise DataError(f"grouping factor {group!r} must be categorical")
        if len(gcol.levels) < 2:
            raise DataError(f"grouping factor {group!r} has a single level")
        if slope is None:
            svals = np.ones(n)
            stag = "1"
        else:
            scol = table[slope]
            if scol.is_categorical:
                raise DataError(f"random slope {slope!r} must be numeric")
            svals = scol.values.astype(float)
            stag = slope
        for c, lvl in enumerate(gcol.levels):
            z_cols.append(svals * (gcol.values == c))
            z_names.append(f"{stag}|{group}={lvl}")

    if not spec.x2:
        raise DataError("the tree design needs at least one covariate")
    x2_cols, x2_levels, x2_cat = [], [], []
    multilevel_cats = {e.name for e in registry if len(e.levels) > 2}
    shared_idx, cat_idx = set(), set()
    for j, name in enumerate(spec.x2):
        col = table[name]
        if col.is_categorical:
            x2_cols.append(col.values.astype(float))
            x2_levels.append(list(col.levels))
            x2_cat.append(True)
        else:
            x2_cols.append(col.values.astype(float))
            x2_levels.append(None)
            x2_cat.append(False)
        if name in spec.primary_names:
            shared_idx.add(j)
        if name in multilevel_cats:
            cat_idx.add(j)

    x1 = np.column_stack(x1_cols) if x1_cols else np.empty((n, 0))
    z = np.column_stack(z_cols) if z_cols else np.empty((n, 0))
    x2 = np.column_stack(x2_cols)
    if not (np.isfinite(y).all() and np.isfinite(x1).all() and np.isfinite(x2).all()):
        raise DataError("non-finite values in the used columns")
    _warn_monotone_duplicates(x2, x2_cat, spec.x2)

    return DesignMatrices(
        y=y,
        x1=x1,
        z=z,
        x2=x2,
        x1_names=x1_names,
        z_names=z_names,
        x2_names=list(spec.x2),
        x2_is_categorical=np.array(x2_cat, dtype=bool),
        x2_levels=x2_levels,
        shared_x2=frozenset(shared_idx),
        categorical_x1_x2=frozenset(cat_idx),
        cat_registry=registry,
        primary_names=spec.primary_names,
        response_name=spec.response,
    )


def _warn_monotone_duplicates(x2, x2_cat, names) -> None:
    # A column and a monotone transform of it would let trees split on "the
    # same" covariate under two names, defeating the single-covariate checks.
    numeric = [j for j, c in enumerate(x2_cat) if not c]
    if len(numeric) < 2:
        return
    ranks = np.empty((x2.shape[0], len(numeric)))
    for k, j in enumerate(numeric):
        order = np.argsort(x2[:, j], kind="stable")
        r = np.empty(x2.shape[0])
        r[order] = np.arange(x2.shape[0], dtype=float)
        ranks[:, k] = r
    with np.errstate(invalid="ignore"):
        corr = np.corrcoef(ranks, rowvar=False)
    for a in range(len(numeric)):
        for b in range(a + 1, len(numeric)):
            if abs(corr[a, b]) >= 1.0 - 1e-12:
                log.warning(
                    "tree-design columns %r and %r are monotone transforms of "
                    "each other; keep only one, or single-covariate checks may be evaded",
                    names[numeric[a]], names[numeric[b]],
                )


# --- response scaling ---------------------------------------------------------


@dataclass
class ScalingRecord:
    """Min/max of the training response; scaled values lie in [-0.5, 0.5]."""

    y_min: float
    y_max: float

    @property
    def span(self) -> float:
        return self.y_max - self.y_min


def scale_response(y: np.ndarray) -> tuple[np.ndarray, ScalingRecord]:
    y = np.asarray(y, dtype=float)
    lo, hi = float(y.min()), float(y.max())
    if hi <= lo:
        raise DataError("constant response: cannot scale")
    rec = ScalingRecord(lo, hi)
    return (y - lo) / rec.span - 0.5, rec


def unscale_predictions(values: np.ndarray, rec: ScalingRecord) -> np.ndarray:
    return (np.asarray(values, dtype=float) + 0.5) * rec.span + rec.y_min


def unscale_beta(values: np.ndarray, rec: ScalingRecord) -> np.ndarray:
    return np.asarray(values, dtype=float) * rec.span


def unscale_sigma2(values, rec: ScalingRecord):
    return np.asarray(values, dtype=float) * rec.span**2


def unscale(draws, rec: ScalingRecord, kind: str = "prediction"):
    """Inverse of :func:`scale_response` for draws of the given kind."""
    if kind == "prediction":
        return unscale_predictions(draws, rec)
    if kind == "beta":
        return unscale_beta(draws, rec)
    if kind == "sigma2":
        return unscale_sigma2(draws, rec)
    raise ValueError(f"unknown kind {kind!r}")
