"""CSV readers and writers for datasets and curve sets.

Dataset files carry the header ``id,time,event,x1,...,xd``; curve files carry
``id,t1,...,tK`` where each ``tk`` header cell is the numeric grid time.
Floats are written with ``repr`` so files round-trip exactly.
"""
import csv

import numpy as np

from .core_types import CensoredDataset, SurvivalCurveSet, TimeGrid, validate_dataset
from .errors import ValidationError


def fmt(x):
    return repr(float(x))


def read_dataset_csv(path) -> CensoredDataset:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise ValidationError(f"{path}: empty file")
        if header[:3] != ["id", "time", "event"]:
            raise ValidationError(f"{path}: header must start with id,time,event", field="header")
        rows = []
        for line in reader:
            if not line or all(not c.strip() for c in line):
                continue
            if len(line) != len(header):
                rid = line[0] if line else None
                raise ValidationError(
                    f"expected {len(header)} columns, got {len(line)}", record_id=rid, field="covariates"
                )
            rows.append((line[0].strip(), line[3:], line[1], line[2].strip()))
    return validate_dataset(rows)


def write_dataset_csv(data: CensoredDataset, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "time", "event"] + [f"x{j + 1}" for j in range(data.dimension)])
        for rid, t, e, x in zip(data.ids, data.time, data.event, data.covariates):
            w.writerow([rid, fmt(t), int(e)] + [fmt(v) for v in x])


def read_curves_csv(path) -> SurvivalCurveSet:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ValidationError(f"{path}: empty file")
        if not header or header[0].strip() != "id":
            raise ValidationError(f"{path}: header must start with id", field="header")
        try:
            times = np.array([float(h) for h in header[1:]])
        except ValueError:
            raise ValidationError(f"{path}: grid times in header must be numeric", field="header")
        grid = TimeGrid(times)
        ids, values = [], []
        for line in reader:
            if not line:
                continue
            rid = line[0].strip()
            if len(line) != len(header):
                raise ValidationError("wrong number of curve values", record_id=rid, field="values")
            try:
                row = np.array([float(v) for v in line[1:]])
            except ValueError:
                raise ValidationError("non-numeric curve value", record_id=rid, field="values")
            if np.any(~np.isfinite(row)) or np.any(row < 0) or np.any(row > 1):
                raise ValidationError("curve values must lie in [0, 1]", record_id=rid, field="values")
            if np.any(np.diff(row) > 0):
                raise ValidationError("curve values must be nonincreasing", record_id=rid, field="values")
            ids.append(rid)
            values.append(row)
    return SurvivalCurveSet(np.array(ids, dtype=object), grid, np.array(values).reshape(len(ids), len(grid)))


def write_curves_csv(curves: SurvivalCurveSet, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id"] + [fmt(t) for t in curves.grid.times])
        for rid, row in zip(curves.ids, curves.values):
            w.writerow([rid] + [fmt(v) for v in row])
