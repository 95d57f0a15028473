"""Dataset schema, ingestion, target transforms, and split planning.

The property catalog covers the 22 homopolymer properties handled by
this pipeline, with units, expected value ranges, and a log10 flag for
the quantities that span several orders of magnitude (gas
permeabilities, mechanical properties, conductivity).  Values outside
the expected range are warnings, not rejections; structurally invalid
polymer strings are rejected at ingestion.

Splitting is seeded and reproducible: a Fisher-Yates shuffle driven by
the package's deterministic stream sends 15% (rounded) of the ids to
the held-out test set and deals the remainder round-robin into 5
cross-validation folds.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

from . import psmiles
from .errors import DataError, NumericalError
from .rng import Stream, derive_key

N_FOLDS = 5
TEST_FRACTION = 0.15


class NonpositiveLogError(DataError):
    """Nonpositive value supplied for a log10-transformed property."""

    code = "nonpositive_log_input"


class ZeroVarianceError(NumericalError):
    """Standardization attempted on a constant column."""

    code = "zero_variance"


@dataclass(frozen=True)
class PropertyInfo:
    symbol: str
    unit: str
    lo: float
    hi: float
    log_scale: bool


def _catalog() -> dict[str, PropertyInfo]:
    rows = [
        # symbol, unit, lo, hi, log_scale
        ("Tg", "degC", -1.2e2, 5e2, False),
        ("Tm", "degC", -5.5e1, 5.8e2, False),
        ("Td", "degC", 1.8e1, 8.5e2, False),
        ("Eat", "eV/atom", -7e0, -5e0, False),
        ("Xc", "%", 1e-1, 1e2, False),
        ("rho", "g/cm3", 1e-1, 3e0, False),
        ("Egc", "eV", 2e-2, 1e1, False),
        ("Egb", "eV", 4e-1, 1e1, False),
        ("Eea", "eV", 4e-1, 5e0, False),
        ("Ei", "eV", 3.5e0, 1e1, False),
        ("nc", "-", 1e0, 3e0, False),
        ("sigma", "S/cm", 0e0, 1e7, True),
        ("E", "GPa", 2e-5, 6e0, True),
        ("sigma_y", "GPa", 3e-8, 4e-1, True),
        ("sigma_b", "GPa", 8e-5, 2e-1, True),
        ("eps_b", "-", 6e-1, 1e3, True),
        ("mu_O2", "barrer", 3e-4, 1.9e4, True),
        ("mu_CO2", "barrer", 1e-3, 4.7e4, True),
        ("mu_N2", "barrer", 1e-4, 1.7e4, True),
        ("mu_H2", "barrer", 2e-2, 3.7e4, True),
        ("mu_He", "barrer", 5e-2, 1.8e4, True),
        ("mu_CH4", "barrer", 4e-4, 3.5e4, True),
    ]
    return {sym: PropertyInfo(sym, unit, lo, hi, log) for sym, unit, lo, hi, log in rows}


DEFAULT_CATALOG: dict[str, PropertyInfo] = _catalog()


@dataclass
class PolymerRecord:
    id: str
    psmiles: str
    values: dict[str, float] = field(default_factory=dict)


def load_csv(
    path: str | Path, catalog: dict[str, PropertyInfo] | None = None
) -> tuple[list[PolymerRecord], list[str]]:
    """Parse a CSV with a `psmiles` column plus property-symbol columns.

    Empty cells are missing values.  Returns (records, warnings); rows
    with invalid polymer strings or unparseable cells are reported with
    their line numbers.  An `id` column is optional and defaults to the
    polymer string itself; duplicate ids are an error.
    """
    catalog = catalog or DEFAULT_CATALOG
    path = Path(path)
    records: list[PolymerRecord] = []
    warnings: list[str] = []
    seen: set[str] = set()

    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise DataError(f"{path}: empty or unparseable CSV")
        fields = [f.strip() for f in reader.fieldnames]
        if "psmiles" not in fields:
            raise DataError(f"{path}: missing required column 'psmiles'")
        unknown = [f for f in fields if f not in catalog and f not in ("psmiles", "id")]
        if unknown:
            warnings.append(f"ignoring unknown columns: {', '.join(sorted(unknown))}")

        for lineno, row in enumerate(reader, start=2):
            row = {(k or "").strip(): (v or "").strip() for k, v in row.items()}
            s = row.get("psmiles", "")
            violations = psmiles.validate(s)
            if violations:
                warnings.append(f"line {lineno}: rejected psmiles {s!r}: {violations[0]}")
                continue
            pid = row.get("id") or s
            if pid in seen:
                raise DataError(f"{path}: duplicate id {pid!r} at line {lineno}")
            seen.add(pid)

            values: dict[str, float] = {}
            for sym, info in catalog.items():
                cell = row.get(sym, "")
                if not cell:
                    continue
                try:
                    value = float(cell)
                except ValueError:
                    warnings.append(
                        f"line {lineno}: unparseable {sym} value {cell!r}, treated as missing"
                    )
                    continue
                if not info.lo <= value <= info.hi:
                    warnings.append(
                        f"line {lineno}: {sym}={value:g} outside [{info.lo:g}, {info.hi:g}]"
                    )
                values[sym] = value
            records.append(PolymerRecord(pid, s, values))
    return records, warnings


def write_jsonl(records: list[PolymerRecord], path: str | Path) -> None:
    with Path(path).open("w") as fh:
        for rec in records:
            fh.write(record_to_json(rec) + "\n")


def record_to_json(rec: PolymerRecord) -> str:
    return json.dumps(
        {"id": rec.id, "psmiles": rec.psmiles, "values": rec.values},
        sort_keys=True,
        separators=(",", ":"),
    )


def load_jsonl(path: str | Path) -> list[PolymerRecord]:
    records = []
    seen = set()
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
            rec = PolymerRecord(obj["id"], obj["psmiles"], dict(obj["values"]))
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise DataError(f"{path}: bad record at line {lineno}: {exc}") from exc
        if rec.id in seen:
            raise DataError(f"{path}: duplicate id {rec.id!r} at line {lineno}")
        seen.add(rec.id)
        records.append(rec)
    return records


def load_dataset(path: str | Path) -> tuple[list[PolymerRecord], list[str]]:
    """Load either a raw CSV or an already-ingested JSON-lines dataset."""
    path = Path(path)
    if path.suffix.lower() == ".csv":
        return load_csv(path)
    return load_jsonl(path), []


# ---------------------------------------------------------------------------
# Target transforms


def transform_target(
    value: float, prop: str, catalog: dict[str, PropertyInfo] | None = None
) -> float:
    """Map a raw property value into training space (log10 where flagged)."""
    info = _property(prop, catalog)
    if not info.log_scale:
        return value
    if value <= 0:
        raise NonpositiveLogError(
            f"{prop}={value:g} is nonpositive but the property is log10-transformed"
        )
    return math.log10(value)


def inverse_transform(
    value: float, prop: str, catalog: dict[str, PropertyInfo] | None = None
) -> float:
    info = _property(prop, catalog)
    return 10.0**value if info.log_scale else value


def _property(prop: str, catalog: dict[str, PropertyInfo] | None) -> PropertyInfo:
    catalog = catalog or DEFAULT_CATALOG
    if prop not in catalog:
        raise DataError(f"unknown property {prop!r}")
    return catalog[prop]


@dataclass(frozen=True)
class Standardizer:
    mean: float
    std: float

    @classmethod
    def fit(cls, values) -> "Standardizer":
        values = list(values)
        if len(values) < 2:
            raise DataError("standardization needs at least 2 values")
        mean = sum(values) / len(values)
        var = sum((v - mean) ** 2 for v in values) / len(values)
        if var == 0.0:
            raise ZeroVarianceError("cannot standardize a constant column")
        return cls(mean, math.sqrt(var))

    def apply(self, v: float) -> float:
        return (v - self.mean) / self.std

    def invert(self, z: float) -> float:
        return z * self.std + self.mean


# ---------------------------------------------------------------------------
# Split planning


@dataclass
class SplitPlan:
    seed: int
    train_ids: list[str]
    test_ids: list[str]
    folds: list[list[str]]

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "train_ids": self.train_ids,
            "test_ids": self.test_ids,
            "folds": self.folds,
        }


def make_split(ids: list[str], seed: int) -> SplitPlan:
    """Shuffle ids, hold out 15% (rounded) for test, deal the rest
    round-robin into 5 folds (sizes differ by at most 1)."""
    if len(set(ids)) != len(ids):
        raise DataError("split ids must be unique")
    n = len(ids)
    if n < 2 * N_FOLDS:
        raise DataError(f"need at least {2 * N_FOLDS} records to split, got {n}")
    shuffled = list(ids)
    Stream(derive_key("split", seed)).shuffle(shuffled)
    n_test = round(TEST_FRACTION * n)
    test_ids = shuffled[:n_test]
    train_ids = shuffled[n_test:]
    folds: list[list[str]] = [[] for _ in range(N_FOLDS)]
    for i, pid in enumerate(train_ids):
        folds[i % N_FOLDS].append(pid)
    if any(not fold for fold in folds):
        raise DataError(f"cannot form {N_FOLDS} nonempty folds from {n} records")
    return SplitPlan(seed, train_ids, test_ids, folds)


def records_with_property(
    records: list[PolymerRecord], prop: str
) -> list[PolymerRecord]:
    return [r for r in records if prop in r.values]
