"""Reading and writing model, dataset, edge-list, trace and histogram files.

Model file: one JSON object ``{"cardinalities": [...], "policy": ...,
"features": [{"states": [[var, val], ...], "weight": w}, ...]}`` with features
in canonical order. Dataset file: JSON Lines, line 1 is the header
``{"cardinalities": [...]}``, then one ``{"values": [...], "hidden": [var, ...]}``
per instance.
"""
import csv
import json
import logging
from pathlib import Path
from typing import Any, Dict, Iterable, List, Sequence, Tuple, Union

import numpy as np

from backend.model import (CandidatePolicy, Dataset, Feature, Instance, Model,
                           SchemaError, State, VariableSchema)

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]


class DataFormatError(RuntimeError):
    """Raised when a model or dataset file cannot be read or is malformed."""
    pass


def _dump_line(obj: Any) -> str:
    # repr-based float output round-trips exactly
    return json.dumps(obj, separators=(",", ":"), sort_keys=False)


def format_float(x: float) -> str:
    return "%.17g" % x


def model_to_dict(model: Model) -> Dict[str, Any]:
    order = sorted(range(model.n_features), key=lambda i: model.features[i])
    return {
        "cardinalities": list(model.schema.cardinalities),
        "policy": model.policy.value,
        "features": [
            {"states": [[s.variable, s.value] for s in model.features[i].states],
             "weight": float(model.weights[i])}
            for i in order
        ],
    }


def model_from_dict(data: Dict[str, Any]) -> Model:
    try:
        schema = VariableSchema(tuple(data["cardinalities"]))
        features = []
        weights = []
        for entry in data.get("features", []):
            features.append(Feature(tuple(State(int(v), int(x)) for v, x in entry["states"])))
            weights.append(float(entry["weight"]))
        policy = CandidatePolicy(data.get("policy", CandidatePolicy.NON_REFERENCE.value))
        return Model(schema, tuple(features), np.array(weights, dtype=np.float64), policy)
    except (KeyError, TypeError, ValueError) as e:
        # SchemaError and FeatureError are ValueErrors too
        raise DataFormatError(f"malformed model: {e}") from e


def write_model(model: Model, path: PathLike) -> Path:
    path = Path(path)
    path.write_text(json.dumps(model_to_dict(model), indent=1) + "\n", encoding="utf-8")
    return path


def read_model(path: PathLike) -> Model:
    try:
        with open(path, "r", encoding="utf-8") as f:
            data = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise DataFormatError(f"cannot read model file {path}: {e}") from e
    return model_from_dict(data)


def write_dataset(data: Dataset, path: PathLike) -> Path:
    path = Path(path)
    with open(path, "w", encoding="utf-8") as f:
        f.write(_dump_line({"cardinalities": list(data.schema.cardinalities)}) + "\n")
        for inst in data.instances:
            f.write(_dump_line({"values": list(inst.values), "hidden": inst.hidden_vars}) + "\n")
    return path


def read_dataset(path: PathLike) -> Dataset:
    try:
        with open(path, "r", encoding="utf-8") as f:
            lines = [line for line in f.read().splitlines() if line.strip()]
    except OSError as e:
        raise DataFormatError(f"cannot read dataset file {path}: {e}") from e
    if not lines:
        raise DataFormatError(f"dataset file {path} is empty")
    try:
        header = json.loads(lines[0])
        schema = VariableSchema(tuple(header["cardinalities"]))
        instances = []
        for lineno, line in enumerate(lines[1:], start=2):
            row = json.loads(line)
            values = tuple(int(v) for v in row["values"])
            hidden = [False] * len(values)
            for k in row.get("hidden", []):
                if not 0 <= int(k) < len(values):
                    raise SchemaError(f"line {lineno}: hidden variable {k} out of range")
                hidden[int(k)] = True
            instances.append(Instance(values, tuple(hidden)))
        return Dataset(schema, tuple(instances))
    except (KeyError, TypeError, ValueError) as e:
        raise DataFormatError(f"malformed dataset {path}: {e}") from e


def check_compatible(model: Model, data: Dataset) -> None:
    if model.schema.cardinalities != data.schema.cardinalities:
        raise SchemaError(
            f"model has {model.schema.n_vars} variables {model.schema.cardinalities[:8]}..., "
            f"dataset has {data.schema.n_vars} variables {data.schema.cardinalities[:8]}...")


def write_edges(edges: Iterable[Tuple[int, int, float]], path: PathLike) -> Path:
    path = Path(path)
    with open(path, "w", encoding="utf-8", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["varA", "varB", "weight"])
        for a, b, weight in edges:
            w.writerow([a, b, format_float(weight)])
    return path


def read_edges(path: PathLike) -> List[Tuple[int, int, float]]:
    try:
        with open(path, "r", encoding="utf-8", newline="") as f:
            return [(int(r["varA"]), int(r["varB"]), float(r["weight"])) for r in csv.DictReader(f)]
    except (OSError, KeyError, ValueError) as e:
        raise DataFormatError(f"cannot read edge list {path}: {e}") from e


def write_jsonl(rows: Iterable[Dict[str, Any]], path: PathLike) -> Path:
    path = Path(path)
    with open(path, "w", encoding="utf-8") as f:
        for row in rows:
            f.write(_dump_line(row) + "\n")
    return path


def write_json(obj: Any, path: PathLike) -> Path:
    path = Path(path)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def write_csv(header: Sequence[str], rows: Iterable[Sequence[Any]], path: PathLike) -> Path:
    path = Path(path)
    with open(path, "w", encoding="utf-8", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(list(header))
        for row in rows:
            w.writerow([format_float(x) if isinstance(x, float) else x for x in row])
    return path
