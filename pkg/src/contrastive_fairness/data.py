"""Adult Income ingestion, feature encoding, splits and imbalance subsamples.

Records are encoded into a fixed layout: continuous columns standardised with
training statistics, categorical columns one-hot. The protected attribute and
the label never appear among the encoded columns.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import ContractViolation, ParseError, SchemaError

log = logging.getLogger(__name__)

FORMAT_VERSION = 1
MISSING = "?"
ADULT_SIZE = 45_222
ADULT_DIMS = 62

ADULT_COLUMNS = (
    "age", "workclass", "fnlwgt", "education", "education-num", "marital-status",
    "occupation", "relationship", "race", "sex", "capital-gain", "capital-loss",
    "hours-per-week", "native-country", "income",
)

# Category vocabularies of the cleaned data. "Never-worked" only occurs on rows
# with a missing occupation, so it never survives the missing-value filter.
ADULT_CATEGORIES = {
    "workclass": ("Private", "Self-emp-not-inc", "Self-emp-inc", "Federal-gov",
                  "Local-gov", "State-gov", "Without-pay"),
    "education": ("Bachelors", "Some-college", "11th", "HS-grad", "Prof-school",
                  "Assoc-acdm", "Assoc-voc", "9th", "7th-8th", "12th", "Masters",
                  "1st-4th", "10th", "Doctorate", "5th-6th", "Preschool"),
    "marital-status": ("Married-civ-spouse", "Divorced", "Never-married", "Separated",
                       "Widowed", "Married-spouse-absent", "Married-AF-spouse"),
    "occupation": ("Tech-support", "Craft-repair", "Other-service", "Sales",
                   "Exec-managerial", "Prof-specialty", "Handlers-cleaners",
                   "Machine-op-inspct", "Adm-clerical", "Farming-fishing",
                   "Transport-moving", "Priv-house-serv", "Protective-serv", "Armed-Forces"),
    "relationship": ("Wife", "Own-child", "Husband", "Not-in-family", "Other-relative",
                     "Unmarried"),
    "race": ("White", "Asian-Pac-Islander", "Amer-Indian-Eskimo", "Other", "Black"),
    "native-country": ("United-States", "Other"),
}

ADULT_LAYOUT = (
    "age", "workclass", "education", "education-num", "marital-status", "occupation",
    "relationship", "race", "capital-gain", "capital-loss", "hours-per-week", "native-country",
)
ADULT_CONTINUOUS = ("age", "education-num", "capital-gain", "capital-loss", "hours-per-week")


@dataclass(frozen=True)
class FeatureGroup:
    name: str
    kind: str  # "continuous" or "categorical"
    mean: float = 0.0
    std: float = 1.0
    categories: tuple[str, ...] = ()

    @property
    def width(self) -> int:
        return 1 if self.kind == "continuous" else len(self.categories)

    def to_dict(self) -> dict:
        if self.kind == "continuous":
            return {"name": self.name, "kind": self.kind, "mean": self.mean, "std": self.std}
        return {"name": self.name, "kind": self.kind, "categories": list(self.categories)}

    @classmethod
    def from_dict(cls, d: Mapping) -> FeatureGroup:
        if d["kind"] == "continuous":
            return cls(d["name"], "continuous", float(d["mean"]), float(d["std"]))
        return cls(d["name"], "categorical", categories=tuple(d["categories"]))


@dataclass(frozen=True)
class ProtectedAttribute:
    name: str
    values: tuple[str, ...]

    @property
    def cardinality(self) -> int:
        return len(self.values)


@dataclass(frozen=True)
class FeatureSchema:
    """Ordered feature groups plus the protected attributes and label kept outside them.

    Protected values are stored per record as one joint group code in mixed
    radix over ``protected`` (the first attribute varies slowest).
    """

    groups: tuple[FeatureGroup, ...]
    protected: tuple[ProtectedAttribute, ...] = (ProtectedAttribute("sex", ("Female", "Male")),)
    label_name: str = "income"
    label_values: tuple[str, str] = ("<=50K", ">50K")

    def __post_init__(self):
        names = [g.name for g in self.groups]
        hidden = {p.name for p in self.protected} | {self.label_name}
        clash = hidden.intersection(names)
        if clash:
            raise SchemaError(f"protected attribute or label among features: {sorted(clash)}")
        if len(set(names)) != len(names):
            raise SchemaError("duplicate feature group names")

    @property
    def total_dims(self) -> int:
        return sum(g.width for g in self.groups)

    @property
    def protected_name(self) -> str:
        return "+".join(p.name for p in self.protected)

    @property
    def n_groups(self) -> int:
        return math.prod(p.cardinality for p in self.protected)

    def slices(self) -> dict[str, slice]:
        out, start = {}, 0
        for g in self.groups:
            out[g.name] = slice(start, start + g.width)
            start += g.width
        return out

    def group(self, name: str) -> FeatureGroup:
        for g in self.groups:
            if g.name == name:
                return g
        raise KeyError(name)

    def columns(self) -> list[str]:
        cols = []
        for g in self.groups:
            if g.kind == "continuous":
                cols.append(g.name)
            else:
                cols.extend(f"{g.name}={c}" for c in g.categories)
        return cols

    def layout(self) -> str:
        return ", ".join(f"{g.name}[{g.width}]" for g in self.groups) + f" -> {self.total_dims} columns"

    def decode_group_code(self, code: int) -> tuple[int, ...]:
        values = []
        for p in reversed(self.protected):
            code, v = divmod(int(code), p.cardinality)
            values.append(v)
        return tuple(reversed(values))

    def encode_group_code(self, values: Sequence[int]) -> int:
        code = 0
        for p, v in zip(self.protected, values):
            code = code * p.cardinality + int(v)
        return code

    def group_label(self, code: int) -> str:
        vals = self.decode_group_code(code)
        return "/".join(p.values[v] for p, v in zip(self.protected, vals))

    # -- encoding ---------------------------------------------------------

    def encode(self, rows: Sequence[Mapping]) -> np.ndarray:
        """Raw feature dicts -> encoded matrix."""
        X = np.zeros((len(rows), self.total_dims))
        sl = self.slices()
        for g in self.groups:
            s = sl[g.name]
            if g.kind == "continuous":
                X[:, s.start] = (np.array([float(r[g.name]) for r in rows]) - g.mean) / g.std
            else:
                index = {c: i for i, c in enumerate(g.categories)}
                for i, r in enumerate(rows):
                    try:
                        X[i, s.start + index[r[g.name]]] = 1.0
                    except KeyError:
                        raise SchemaError(f"unknown {g.name} category {r[g.name]!r}") from None
        return X

    def decode(self, x: np.ndarray) -> dict:
        """Encoded vector -> raw feature dict (categoricals by argmax)."""
        out = {}
        sl = self.slices()
        for g in self.groups:
            block = x[sl[g.name]]
            if g.kind == "continuous":
                out[g.name] = float(block[0] * g.std + g.mean)
            else:
                out[g.name] = g.categories[int(np.argmax(block))]
        return out

    def raw_continuous(self, X: np.ndarray) -> dict[str, np.ndarray]:
        sl = self.slices()
        return {g.name: X[:, sl[g.name].start] * g.std + g.mean
                for g in self.groups if g.kind == "continuous"}

    # -- persistence ------------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "groups": [g.to_dict() for g in self.groups],
            "protected": [{"name": p.name, "values": list(p.values)} for p in self.protected],
            "label": {"name": self.label_name, "values": list(self.label_values)},
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> FeatureSchema:
        return cls(
            groups=tuple(FeatureGroup.from_dict(g) for g in d["groups"]),
            protected=tuple(ProtectedAttribute(p["name"], tuple(p["values"])) for p in d["protected"]),
            label_name=d["label"]["name"],
            label_values=tuple(d["label"]["values"]),
        )

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


@dataclass(frozen=True)
class Record:
    index: int
    x: np.ndarray
    y: int
    s: int


def _freeze(a: np.ndarray) -> np.ndarray:
    a = np.array(a)
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class Dataset:
    schema: FeatureSchema
    X: np.ndarray
    y: np.ndarray
    s: np.ndarray
    provenance: Mapping = field(default_factory=dict)

    def __post_init__(self):
        X = np.asarray(self.X, dtype=np.float64)
        if X.ndim != 2 or X.shape[1] != self.schema.total_dims:
            raise SchemaError(f"X has shape {X.shape}, schema expects {self.schema.total_dims} columns")
        n = X.shape[0]
        y = np.asarray(self.y, dtype=np.int64)
        s = np.asarray(self.s, dtype=np.int64)
        if y.shape != (n,) or s.shape != (n,):
            raise SchemaError("X, y and s lengths differ")
        if n and (y.min() < 0 or y.max() > 1):
            raise SchemaError("labels must be binary 0/1")
        if n and (s.min() < 0 or s.max() >= self.schema.n_groups):
            raise SchemaError("protected codes out of range")
        object.__setattr__(self, "X", _freeze(X))
        object.__setattr__(self, "y", _freeze(y))
        object.__setattr__(self, "s", _freeze(s))
        object.__setattr__(self, "provenance", dict(self.provenance))

    def __len__(self) -> int:
        return self.X.shape[0]

    def record(self, i: int) -> Record:
        return Record(i, self.X[i], int(self.y[i]), int(self.s[i]))

    def records(self) -> Iterable[Record]:
        return (self.record(i) for i in range(len(self)))

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update(self.schema.hash().encode())
        for a in (self.X, self.y, self.s):
            h.update(np.ascontiguousarray(a).tobytes())
        return h.hexdigest()[:16]

    def subset(self, indices, **provenance) -> Dataset:
        idx = np.asarray(indices, dtype=np.int64)
        prov = {**self.provenance, "parent": self.fingerprint(), **provenance}
        return Dataset(self.schema, self.X[idx], self.y[idx], self.s[idx], prov)

    def with_labels(self, y) -> Dataset:
        return Dataset(self.schema, self.X, y, self.s, self.provenance)

    def counts(self) -> dict[tuple[int, int], int]:
        """Record count per (y, s) stratum, including empty strata."""
        out = {}
        for yv in (0, 1):
            for sv in range(self.schema.n_groups):
                out[(yv, sv)] = int(np.sum((self.y == yv) & (self.s == sv)))
        return out


# -- Adult parsing -----------------------------------------------------------


def _adult_files(raw_path) -> list[Path]:
    if isinstance(raw_path, (list, tuple)):
        return [Path(p) for p in raw_path]
    p = Path(raw_path)
    if p.is_dir():
        files = [p / "adult.data", p / "adult.test"]
        missing = [f for f in files if not f.exists()]
        if missing:
            raise ContractViolation(f"missing Adult files: {missing}")
        return files
    if not p.exists():
        raise ContractViolation(f"no such file: {p}")
    return [p]


def _sha256_files(files: Sequence[Path]) -> str:
    h = hashlib.sha256()
    for f in files:
        h.update(f.read_bytes())
    return h.hexdigest()[:16]


def parse_adult_rows(lines: Iterable[str], start_line: int = 1):
    """Yield (raw feature dict, y, sex) for complete rows; rows holding '?' are skipped."""
    for lineno, line in enumerate(lines, start=start_line):
        line = line.strip()
        if not line or line.startswith("|"):
            continue
        fields = [f.strip() for f in next(csv.reader([line]))]
        if len(fields) != len(ADULT_COLUMNS):
            raise SchemaError(f"line {lineno}: expected {len(ADULT_COLUMNS)} columns, got {len(fields)}")
        if MISSING in fields:
            continue
        row = dict(zip(ADULT_COLUMNS, fields))
        feats = {}
        for name in ADULT_CONTINUOUS:
            try:
                feats[name] = float(row[name])
            except ValueError:
                raise ParseError(f"{name} is not numeric: {row[name]!r}", lineno) from None
        for name, cats in ADULT_CATEGORIES.items():
            value = row[name]
            if name == "native-country":
                value = "United-States" if value == "United-States" else "Other"
            if value not in cats:
                raise ParseError(f"unknown {name} category {value!r}", lineno)
            feats[name] = value
        label = row["income"].rstrip(".")
        if label not in (">50K", "<=50K"):
            raise ParseError(f"unknown income label {row['income']!r}", lineno)
        sex = row["sex"]
        if sex not in ("Female", "Male"):
            raise ParseError(f"unknown sex {sex!r}", lineno)
        yield feats, int(label == ">50K"), int(sex == "Male")


def adult_schema() -> FeatureSchema:
    groups = []
    for name in ADULT_LAYOUT:
        if name in ADULT_CONTINUOUS:
            groups.append(FeatureGroup(name, "continuous"))
        else:
            groups.append(FeatureGroup(name, "categorical", categories=ADULT_CATEGORIES[name]))
    return FeatureSchema(tuple(groups))


def _fit_continuous(schema: FeatureSchema, rows: Sequence[Mapping]) -> FeatureSchema:
    groups = []
    for g in schema.groups:
        if g.kind == "continuous":
            v = np.array([float(r[g.name]) for r in rows]) if rows else np.zeros(1)
            mu, sd = float(v.mean()), float(v.std())
            if sd == 0.0:
                log.warning("continuous feature %s is constant; leaving it unscaled", g.name)
                sd = 1.0
            g = replace(g, mean=mu, std=sd)
        groups.append(g)
    return replace(schema, groups=tuple(groups))


def load_adult(raw_path, expect_size: int | None = None) -> Dataset:
    """Parse UCI Adult file(s) into an encoded dataset.

    ``raw_path`` is a directory holding ``adult.data`` and ``adult.test``, a
    single file, or a list of files (concatenated in order).
    """
    files = _adult_files(raw_path)
    rows, ys, ss = [], [], []
    for f in files:
        with open(f, newline="") as fh:
            for feats, y, s in parse_adult_rows(fh):
                rows.append(feats)
                ys.append(y)
                ss.append(s)
    if not rows:
        raise ContractViolation(f"no complete records in {[str(f) for f in files]}")
    schema = _fit_continuous(adult_schema(), rows)
    if schema.total_dims != ADULT_DIMS:
        raise SchemaError(f"Adult layout has {schema.total_dims} columns, expected {ADULT_DIMS}: "
                          f"{schema.layout()}")
    if expect_size is not None and len(rows) != expect_size:
        raise ContractViolation(f"expected {expect_size} records, parsed {len(rows)}")
    prov = {"source_hash": _sha256_files(files), "role": "full"}
    return Dataset(schema, schema.encode(rows), ys, ss, prov)


def load_csv(path, continuous: Sequence[str], categorical: Sequence[str], protected: str,
             label: str, positive_label: str, missing: str = MISSING) -> Dataset:
    """Generic path for Adult-shaped tables with a header row and a caller-given schema.

    Categorical vocabularies are taken from the data in order of appearance.
    """
    path = Path(path)
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh, skipinitialspace=True)
        needed = set(continuous) | set(categorical) | {protected, label}
        absent = needed - set(reader.fieldnames or ())
        if absent:
            raise SchemaError(f"columns missing from header: {sorted(absent)}")
        rows, ys, raw_s = [], [], []
        for lineno, row in enumerate(reader, start=2):
            vals = {k: (row[k] or "").strip() for k in needed}
            if missing in vals.values():
                continue
            feats = {}
            for name in continuous:
                try:
                    feats[name] = float(vals[name])
                except ValueError:
                    raise ParseError(f"{name} is not numeric: {vals[name]!r}", lineno) from None
            for name in categorical:
                feats[name] = vals[name]
            rows.append(feats)
            ys.append(int(vals[label].rstrip(".") == positive_label))
            raw_s.append(vals[protected])
    if not rows:
        raise ContractViolation(f"no complete records in {path}")
    s_values = tuple(sorted(set(raw_s)))
    groups = []
    for name in list(continuous) + list(categorical):
        if name in continuous:
            groups.append(FeatureGroup(name, "continuous"))
        else:
            cats = tuple(dict.fromkeys(r[name] for r in rows))
            groups.append(FeatureGroup(name, "categorical", categories=cats))
    schema = FeatureSchema(tuple(groups), (ProtectedAttribute(protected, s_values),), label,
                           ("other", positive_label))
    schema = _fit_continuous(schema, rows)
    s = [s_values.index(v) for v in raw_s]
    return Dataset(schema, schema.encode(rows), ys, s, {"source_hash": _sha256_files([path]), "role": "full"})


# -- splits and subsamples -----------------------------------------------------


def refit_schema(X: np.ndarray, schema: FeatureSchema) -> tuple[FeatureSchema, dict[str, list[str]]]:
    """Schema with continuous statistics taken from ``X``.

    Categories that never occur in ``X`` are merged with the rarest occurring
    category of their group into an ``other`` bucket; the merges are returned
    and logged.
    """
    sl = schema.slices()
    raw = schema.raw_continuous(X)
    groups, merges = [], {}
    for g in schema.groups:
        if g.kind == "continuous":
            v = raw[g.name]
            sd = float(v.std()) if len(v) else 1.0
            if sd == 0.0:
                log.warning("continuous feature %s is constant on this split", g.name)
                sd = 1.0
            groups.append(replace(g, mean=float(v.mean()) if len(v) else 0.0, std=sd))
            continue
        counts = X[:, sl[g.name]].sum(axis=0)
        dead = [c for c, n in zip(g.categories, counts) if n == 0]
        live = [(n, i) for i, n in enumerate(counts) if n > 0]
        if dead and len(live) > 1:
            rarest = g.categories[min(live)[1]]
            merged = set(dead) | {rarest}
            cats = tuple(c for c in g.categories if c not in merged) + ("other",)
            merges[g.name] = sorted(merged)
            log.warning("merged empty %s categories %s (with %s) into 'other'", g.name, dead, rarest)
            groups.append(replace(g, categories=cats))
        else:
            if dead:
                log.warning("%s has a single occurring category; its columns stay constant", g.name)
            groups.append(g)
    return replace(schema, groups=tuple(groups)), merges


def reencode(X: np.ndarray, old: FeatureSchema, new: FeatureSchema, merges: Mapping[str, list[str]]) -> np.ndarray:
    """Map an encoded matrix from ``old`` to ``new`` statistics and category buckets."""
    out = np.zeros((X.shape[0], new.total_dims))
    osl, nsl = old.slices(), new.slices()
    for og, ng in zip(old.groups, new.groups):
        o, n = osl[og.name], nsl[ng.name]
        if og.kind == "continuous":
            out[:, n.start] = (X[:, o.start] * og.std + og.mean - ng.mean) / ng.std
        else:
            bucket = set(merges.get(og.name, ()))
            target = {c: ng.categories.index("other" if c in bucket else c) for c in og.categories}
            for j, c in enumerate(og.categories):
                out[:, n.start + target[c]] += X[:, o.start + j]
    return out


def split(ds: Dataset, test_n: int, seed: int, repeat: int | None = None) -> tuple[Dataset, Dataset]:
    """Uniform random train/test split; both parts are re-encoded with train statistics."""
    n = len(ds)
    if not 0 <= test_n < n:
        raise ContractViolation(f"test_n must be in [0, {n}), got {test_n}")
    perm = np.random.default_rng(seed).permutation(n)
    test_idx = np.sort(perm[:test_n])
    train_idx = np.sort(perm[test_n:])
    new_schema, merges = refit_schema(ds.X[train_idx], ds.schema)
    base = {**ds.provenance, "parent": ds.fingerprint(), "split_seed": seed}
    if repeat is not None:
        base["repeat"] = repeat
    train = Dataset(new_schema, reencode(ds.X[train_idx], ds.schema, new_schema, merges),
                    ds.y[train_idx], ds.s[train_idx], {**base, "role": "train"})
    test = Dataset(new_schema, reencode(ds.X[test_idx], ds.schema, new_schema, merges),
                   ds.y[test_idx], ds.s[test_idx], {**base, "role": "test", "train": train.fingerprint()})
    return train, test


def _stratified_pick(ds: Dataset, members: np.ndarray, count: int, rng: np.random.Generator) -> np.ndarray:
    y = ds.y[members]
    pos, neg = members[y == 1], members[y == 0]
    want_pos = int(round(count * len(pos) / len(members))) if len(members) else 0
    want_pos = min(want_pos, len(pos))
    want_neg = count - want_pos
    if want_neg > len(neg):
        want_neg, want_pos = len(neg), count - len(neg)
    # Prefix of one permutation per stratum: growing counts give nested samples.
    pos_pick = pos[rng.permutation(len(pos))[:want_pos]]
    neg_pick = neg[rng.permutation(len(neg))[:want_neg]]
    return np.concatenate([pos_pick, neg_pick])


def subsample_group(ds: Dataset, group: int, count: int, seed: int) -> Dataset:
    """Keep ``count`` records of protected group ``group``, stratified by label; others untouched."""
    members = np.flatnonzero(ds.s == group)
    if count < 0 or count > len(members):
        raise ContractViolation(f"group {group} has {len(members)} records, asked for {count}")
    picked = _stratified_pick(ds, members, count, np.random.default_rng(seed))
    keep = np.sort(np.concatenate([np.flatnonzero(ds.s != group), picked]))
    return ds.subset(keep, subsample={"group": int(group), "count": int(count), "seed": seed})


def minority_group(ds: Dataset) -> int:
    counts = np.bincount(ds.s, minlength=ds.schema.n_groups)
    present = [g for g in range(len(counts)) if counts[g] > 0]
    return min(present, key=lambda g: (counts[g], g))


def subsample_majority(ds: Dataset, minority_count: int, seed: int, minority: int | None = None) -> Dataset:
    """Imbalance subsample: the minority protected group is cut to ``minority_count`` records.

    Sampling is stratified by label so the group's positive rate is preserved to
    the nearest record, and the majority group is left as it is.
    """
    if minority is None:
        minority = minority_group(ds)
    return subsample_group(ds, minority, minority_count, seed)


# -- persistence ---------------------------------------------------------------


def save_dataset(ds: Dataset, out_dir, seed: int | None = None) -> tuple[Path, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path, schema_path = out_dir / "dataset.csv", out_dir / "schema.json"
    header = ds.schema.columns() + [ds.schema.protected_name, ds.schema.label_name]
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for x, s, y in zip(ds.X, ds.s, ds.y):
            w.writerow([repr(float(v)) for v in x] + [int(s), int(y)])
    meta = {
        "version": FORMAT_VERSION,
        **ds.schema.to_dict(),
        "seed": seed,
        "source_hash": ds.provenance.get("source_hash"),
        "records": len(ds),
    }
    schema_path.write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return csv_path, schema_path


def load_dataset(in_dir) -> Dataset:
    in_dir = Path(in_dir)
    meta = json.loads((in_dir / "schema.json").read_text())
    if meta.get("version") != FORMAT_VERSION:
        raise SchemaError(f"unsupported dataset format version {meta.get('version')}")
    schema = FeatureSchema.from_dict(meta)
    with open(in_dir / "dataset.csv", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header[:-2] != schema.columns():
            raise SchemaError("dataset.csv header does not match schema.json")
        rows = [[float(v) for v in row] for row in reader]
    data = np.array(rows) if rows else np.zeros((0, schema.total_dims + 2))
    prov = {"source_hash": meta.get("source_hash"), "role": "full"}
    return Dataset(schema, data[:, :-2], data[:, -1].astype(int), data[:, -2].astype(int), prov)
