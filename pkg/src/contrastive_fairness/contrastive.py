"""Contrastive examples: counterparts of real records with the protected value intervened.

Both generation routes (the translation network and nearest-neighbour
matching) emit a :class:`ContrastiveSet`, and both export to the same CSV
layout: the encoded feature columns followed by ``source_index``,
``target_s`` and ``inherited_y``.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from .data import Dataset, FeatureSchema
from .errors import ContractViolation, SchemaError

META_FIELDS = ("source_index", "target_s", "inherited_y")


@dataclass(frozen=True)
class ContrastiveExample:
    source_index: int
    target_s: int
    x_bar: np.ndarray
    inherited_y: int


@dataclass(frozen=True)
class ContrastiveSet:
    schema_hash: str
    source_index: np.ndarray
    target_s: np.ndarray
    x_bar: np.ndarray
    inherited_y: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in ("source_index", "target_s", "inherited_y"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=np.int64).reshape(-1))
        x = np.asarray(self.x_bar, dtype=np.float64)
        if x.ndim == 1:
            x = x.reshape(0, 0) if x.size == 0 else x.reshape(1, -1)
        object.__setattr__(self, "x_bar", x)
        n = len(self.source_index)
        if not (len(self.target_s) == len(self.inherited_y) == n and (n == 0 or x.shape[0] == n)):
            raise ContractViolation("contrastive set columns differ in length")

    def __len__(self) -> int:
        return len(self.source_index)

    def __iter__(self) -> Iterator[ContrastiveExample]:
        for i in range(len(self)):
            yield ContrastiveExample(int(self.source_index[i]), int(self.target_s[i]),
                                     self.x_bar[i], int(self.inherited_y[i]))

    @classmethod
    def empty(cls, schema: FeatureSchema) -> ContrastiveSet:
        return cls(schema.hash(), [], [], np.zeros((0, schema.total_dims)), [])

    @classmethod
    def from_examples(cls, schema: FeatureSchema, examples) -> ContrastiveSet:
        examples = list(examples)
        if not examples:
            return cls.empty(schema)
        return cls(schema.hash(), [e.source_index for e in examples], [e.target_s for e in examples],
                   np.stack([e.x_bar for e in examples]), [e.inherited_y for e in examples])

    def check_against(self, ds: Dataset) -> None:
        if self.schema_hash != ds.schema.hash():
            raise ContractViolation("contrastive set was built for a different schema")
        if len(self) and self.x_bar.shape[1] != ds.schema.total_dims:
            raise ContractViolation("contrastive width differs from schema")
        if len(self) and (self.source_index.min() < 0 or self.source_index.max() >= len(ds)):
            raise ContractViolation("contrastive source index outside the dataset")


def save_contrastives(cs: ContrastiveSet, schema: FeatureSchema, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(schema.columns() + list(META_FIELDS))
        for i in range(len(cs)):
            w.writerow([repr(float(v)) for v in cs.x_bar[i]]
                       + [int(cs.source_index[i]), int(cs.target_s[i]), int(cs.inherited_y[i])])
    sidecar = path.with_suffix(".json")
    sidecar.write_text(json.dumps({"schema_hash": cs.schema_hash, **cs.meta}, indent=2, sort_keys=True) + "\n")
    return path


def load_contrastives(path, schema: FeatureSchema) -> ContrastiveSet:
    path = Path(path)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != schema.columns() + list(META_FIELDS):
            raise SchemaError(f"{path} columns do not match the dataset schema")
        rows = [[float(v) for v in row] for row in reader]
    data = np.array(rows) if rows else np.zeros((0, schema.total_dims + 3))
    sidecar = path.with_suffix(".json")
    meta = json.loads(sidecar.read_text()) if sidecar.exists() else {}
    schema_hash = meta.pop("schema_hash", schema.hash())
    d = schema.total_dims
    return ContrastiveSet(schema_hash, data[:, d].astype(int), data[:, d + 1].astype(int),
                          data[:, :d], data[:, d + 2].astype(int), meta)
