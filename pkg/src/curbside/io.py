"""JSON and CSV persistence for models, noise bounds, scenarios, traces and reports.

Every JSON document carries ``schema_version`` and ``kind``; readers reject a
mismatch on either.
"""

from __future__ import annotations

import csv
import json
import math
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np

from .core import (
    SCHEMA_VERSION,
    STATE_NAMES,
    DynamicsModel,
    NoiseModel,
    Scenario,
    SchemaError,
    VolumeScale,
)


def _clean(obj: Any) -> Any:
    # JSON has no NaN or infinity; numpy scalars and arrays become plain Python
    if isinstance(obj, Mapping):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (np.integer, bool, np.bool_)):
        return obj.item() if isinstance(obj, np.generic) else obj
    if isinstance(obj, (float, np.floating)):
        value = float(obj)
        return value if math.isfinite(value) else None
    return obj


def dumps(kind: str, payload: Mapping[str, Any]) -> str:
    doc = {"schema_version": SCHEMA_VERSION, "kind": kind, **payload}
    return json.dumps(_clean(doc), indent=2, sort_keys=False, allow_nan=False) + "\n"


def write_json(path: str | Path, kind: str, payload: Mapping[str, Any]) -> Path:
    path = Path(path)
    path.write_text(dumps(kind, payload), encoding="utf-8")
    return path


def loads(text: str, kind: str, source: str = "<string>") -> dict[str, Any]:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{source}: not valid JSON ({exc})") from exc
    if not isinstance(doc, dict):
        raise SchemaError(f"{source}: expected a JSON object")
    version = doc.get("schema_version")
    if version != SCHEMA_VERSION:
        raise SchemaError(f"{source}: schema_version {version!r}, expected {SCHEMA_VERSION}")
    if doc.get("kind") != kind:
        raise SchemaError(f"{source}: kind {doc.get('kind')!r}, expected {kind!r}")
    return doc


def read_json(path: str | Path, kind: str) -> dict[str, Any]:
    path = Path(path)
    return loads(path.read_text(encoding="utf-8"), kind, str(path))


# ------------------------------------------------------------------ model


def model_to_dict(model: DynamicsModel) -> dict[str, Any]:
    report = model.fit_report
    return {
        "a": model.a.tolist(),
        "b": model.b.tolist(),
        "eq_mask": model.eq_mask.astype(int).tolist(),
        "sign_mask": model.sign_mask.astype(int).tolist(),
        "volume_scale": model.volume_scale.to_dict(),
        "fit_report": report.to_dict() if hasattr(report, "to_dict") else None,
    }


def model_from_dict(data: Mapping[str, Any]) -> DynamicsModel:
    from .sysid import FitReport

    try:
        report = data.get("fit_report")
        return DynamicsModel(
            a=np.array(data["a"], dtype=float),
            b=np.array(data["b"], dtype=float),
            eq_mask=np.array(data["eq_mask"], dtype=bool),
            sign_mask=np.array(data["sign_mask"], dtype=np.int8),
            volume_scale=VolumeScale.from_dict(data["volume_scale"]),
            fit_report=FitReport.from_dict(report) if report else None,
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise SchemaError(f"malformed model document: {exc}") from exc


def save_model(path: str | Path, model: DynamicsModel) -> Path:
    return write_json(path, "model", model_to_dict(model))


def load_model(path: str | Path) -> DynamicsModel:
    return model_from_dict(read_json(path, "model"))


# ------------------------------------------------------------------ noise


def save_noise(path: str | Path, noise: NoiseModel) -> Path:
    return write_json(path, "noise_model", {"bounds": noise_bounds(noise), "seed": noise.seed})


def noise_bounds(noise: NoiseModel) -> dict[str, list[float]]:
    return {name: [l, h] for name, l, h in zip(STATE_NAMES, noise.lo, noise.hi)}


def noise_from_dict(data: Mapping[str, Any]) -> NoiseModel:
    """Accepts ``{"bounds": {"df": [a, b], ...}}`` or ``{"lo": [...], "hi": [...]}``."""
    seed = int(data.get("seed", 0))
    try:
        if "bounds" in data:
            bounds = data["bounds"]
            lo = tuple(float(bounds[name][0]) for name in STATE_NAMES)
            hi = tuple(float(bounds[name][1]) for name in STATE_NAMES)
            return NoiseModel(lo, hi, seed)
        return NoiseModel(tuple(data["lo"]), tuple(data["hi"]), seed)
    except (KeyError, TypeError, IndexError) as exc:
        raise SchemaError(f"malformed noise document: {exc}") from exc


def load_noise(path: str | Path) -> NoiseModel:
    return noise_from_dict(read_json(path, "noise_model"))


# -------------------------------------------------------- scenarios, traces


def save_scenarios(path: str | Path, scenarios: Sequence[Scenario]) -> Path:
    return write_json(path, "scenarios", {"scenarios": [s.to_dict() for s in scenarios]})


def load_scenario_index(path: str | Path) -> list[dict[str, Any]]:
    return list(read_json(path, "scenarios")["scenarios"])


def save_trace(path: str | Path, trace: Any, timings: bool = True) -> Path:
    return write_json(path, "trace", trace.to_dict(timings=timings))


def save_report(path: str | Path, report: Any, extra: Mapping[str, Any] | None = None) -> Path:
    payload = dict(extra or {})
    payload.update(report.to_dict())
    return write_json(path, "campaign_report", payload)


def write_rows(path: str | Path, rows: Sequence[Mapping[str, Any]], columns: Sequence[str]) -> Path:
    """Plot-ready CSV; the first line is a ``# schema_version`` comment."""
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        fh.write(f"# schema_version={SCHEMA_VERSION}\n")
        writer = csv.DictWriter(fh, fieldnames=list(columns), lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({c: _fmt(row[c]) for c in columns})
    return path


def read_rows(path: str | Path) -> list[dict[str, str]]:
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        first = fh.readline().strip()
        if first != f"# schema_version={SCHEMA_VERSION}":
            raise SchemaError(f"{path}: missing or mismatched schema_version line")
        return list(csv.DictReader(fh))


def _fmt(value: Any) -> Any:
    if isinstance(value, float):
        return repr(value)
    return value
