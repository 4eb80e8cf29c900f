"""Long-format CSV datasets, flat config files and the JSON model format."""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np
import pandas as pd

from .exceptions import ConfigError, DataError, ModelFormatError
from .funcdata import CurvePanel, FpcBasis, Standardization, TimeGrid
from .selection import FittedModel, PipelineConfig
from .solver import SolverConfig

FEATURE_COLUMNS = ["instance_id", "feature_id", "t", "value"]
LABEL_COLUMNS = ["instance_id", "label"]
MODEL_FORMAT = "fsfc-model/1"
FLOAT_FORMAT = "%.17g"
GRID_TOL = 1e-9


@dataclass(frozen=True, eq=False)
class LongFormatDataset:
    """A panel plus the string ids of its rows and features.

    ``labels`` is ``None`` when no label file was read.
    """

    panel: CurvePanel
    labels: np.ndarray | None
    instance_ids: list
    feature_ids: list


def _csv_rows(mask) -> list[int]:
    # header is line 1, so data row i sits on line i + 2
    return (np.flatnonzero(np.asarray(mask)) + 2).tolist()


def _clip_list(items, limit=5) -> str:
    items = list(items)
    text = ", ".join(str(x) for x in items[:limit])
    return text + (f", ... ({len(items)} total)" if len(items) > limit else "")


def _read_csv(path, columns, dtypes) -> pd.DataFrame:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"{path}: file not found")
    try:
        df = pd.read_csv(path, dtype=dtypes, float_precision="round_trip", keep_default_na=False)
    except (ValueError, pd.errors.ParserError) as exc:
        raise DataError(f"{path}: could not parse CSV ({exc})") from exc
    if list(df.columns) != columns:
        raise DataError(f"{path}: expected header {','.join(columns)}, got {','.join(map(str, df.columns))}")
    return df


def read_features(path) -> tuple[CurvePanel, list, list]:
    """Assemble an ``(n, p, m)`` panel from a long-format feature CSV.

    Instances and features keep their first-appearance order.  The grid is
    the sorted set of distinct ``t`` values and must be uniform on
    ``[0, 1]`` to within ``1e-9``.
    """
    df = _read_csv(path, FEATURE_COLUMNS, {"instance_id": str, "feature_id": str})
    if df.empty:
        raise DataError(f"{path}: no data rows")
    for col in ("t", "value"):
        num = pd.to_numeric(df[col], errors="coerce")
        bad = num.isna() | ~np.isfinite(num.to_numpy(dtype=float, na_value=np.nan))
        if bad.any():
            raise DataError(f"{path}: non-numeric or non-finite {col} on rows {_clip_list(_csv_rows(bad))}")
        df[col] = num.astype(float)

    dup = df.duplicated(["instance_id", "feature_id", "t"], keep=False)
    if dup.any():
        raise DataError(f"{path}: duplicate (instance_id, feature_id, t) on rows {_clip_list(_csv_rows(dup))}")

    points = np.unique(df["t"].to_numpy())
    m = points.size
    if m < 2:
        raise DataError(f"{path}: the grid needs at least two distinct t values")
    expected = np.linspace(0.0, 1.0, m)
    off = np.abs(points - expected) > GRID_TOL
    if off.any():
        raise DataError(
            f"{path}: grid is not uniform on [0, 1] within {GRID_TOL:g}; "
            f"t={points[off][0]!r} should be {expected[off][0]!r}"
        )

    instances = list(pd.unique(df["instance_id"]))
    features = list(pd.unique(df["feature_id"]))
    inst_code = pd.Categorical(df["instance_id"], categories=instances).codes
    feat_code = pd.Categorical(df["feature_id"], categories=features).codes
    t_code = np.searchsorted(points, df["t"].to_numpy())

    counts = np.zeros((len(instances), len(features)), dtype=int)
    np.add.at(counts, (inst_code, feat_code), 1)
    if np.any(counts != m):
        i, j = np.argwhere(counts != m)[0]
        have = set(t_code[(inst_code == i) & (feat_code == j)].tolist())
        missing = [repr(float(points[s])) for s in range(m) if s not in have]
        n_gaps = int(np.sum(m - counts))
        raise DataError(
            f"{path}: instance {instances[i]!r}, feature {features[j]!r} is missing "
            f"t = {_clip_list(missing)} ({n_gaps} missing rows in total)"
        )

    values = np.empty((len(instances), len(features), m))
    values[inst_code, feat_code, t_code] = df["value"].to_numpy()
    # keep the file's own t values so a write/read cycle is exact
    points = points.copy()
    points[0], points[-1] = 0.0, 1.0
    return CurvePanel(values, TimeGrid(points)), instances, features


def read_labels(path, instance_ids) -> np.ndarray:
    """Labels aligned with ``instance_ids``; every instance needs exactly one."""
    df = _read_csv(path, LABEL_COLUMNS, {"instance_id": str})
    num = pd.to_numeric(df["label"], errors="coerce")
    bad = ~num.isin([-1, 1])
    if bad.any():
        raise DataError(f"{path}: labels must be -1 or 1; bad values on rows {_clip_list(_csv_rows(bad))}")
    dup = df["instance_id"].duplicated(keep=False)
    if dup.any():
        raise DataError(f"{path}: repeated instance_id on rows {_clip_list(_csv_rows(dup))}")
    known = set(instance_ids)
    unknown = ~df["instance_id"].isin(known)
    if unknown.any():
        raise DataError(
            f"{path}: instance ids not present in the features on rows {_clip_list(_csv_rows(unknown))}"
        )
    lookup = dict(zip(df["instance_id"], num.astype(float)))
    missing = [i for i in instance_ids if i not in lookup]
    if missing:
        raise DataError(f"{path}: no label for instances {_clip_list(missing)}")
    return np.array([lookup[i] for i in instance_ids])


def read_dataset(features_path, labels_path=None) -> LongFormatDataset:
    panel, instances, features = read_features(features_path)
    labels = read_labels(labels_path, instances) if labels_path is not None else None
    return LongFormatDataset(panel, labels, instances, features)


def default_ids(prefix: str, count: int) -> list[str]:
    width = len(str(max(count - 1, 0)))
    return [f"{prefix}{i:0{width}d}" for i in range(count)]


def write_dataset(panel: CurvePanel, features_path, labels=None, labels_path=None,
                  instance_ids=None, feature_ids=None) -> None:
    """Write ``panel`` (and optionally labels) in the long CSV layout."""
    instance_ids = list(instance_ids) if instance_ids is not None else default_ids("i", panel.n)
    feature_ids = list(feature_ids) if feature_ids is not None else default_ids("f", panel.p)
    if len(instance_ids) != panel.n or len(feature_ids) != panel.p:
        raise DataError("id lists do not match the panel shape")
    n, p, m = panel.values.shape
    df = pd.DataFrame({
        "instance_id": np.repeat(np.asarray(instance_ids, dtype=object), p * m),
        "feature_id": np.tile(np.repeat(np.asarray(feature_ids, dtype=object), m), n),
        "t": np.tile(panel.grid.points, n * p),
        "value": panel.values.ravel(),
    })
    df.to_csv(features_path, index=False, float_format=FLOAT_FORMAT)
    if labels is not None:
        if labels_path is None:
            raise ConfigError("labels given without a labels path")
        pd.DataFrame({"instance_id": instance_ids, "label": np.asarray(labels, dtype=int)}).to_csv(
            labels_path, index=False)


def write_frame(df: pd.DataFrame, path) -> None:
    df.to_csv(path, index=False, float_format=FLOAT_FORMAT)


# --- configuration ---------------------------------------------------------

_PIPELINE_KEYS = {f.name: f.type for f in fields(PipelineConfig) if f.name != "solver"}
_SOLVER_KEYS = {f.name: f.type for f in fields(SolverConfig)}
_ALIASES = {"grid_points": "n_lambda", "threads": "n_jobs"}


def _coerce(key, raw: str, annotation: str, lineno: int):
    kind = str(annotation)
    try:
        if kind.startswith("bool"):
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if kind.startswith("int"):
            return int(raw)
        if "None" in kind and raw.lower() in ("none", ""):
            return None
        return float(raw)
    except ValueError:
        raise ConfigError(f"line {lineno}: bad value {raw!r} for {key}") from None


def parse_config_text(text: str, source: str = "<config>") -> dict:
    """Parse ``key = value`` lines (``#`` starts a comment) into overrides."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        key = _ALIASES.get(key, key)
        if key in out:
            raise ConfigError(f"{source}:{lineno}: {key} set twice")
        if key in _PIPELINE_KEYS:
            out[key] = _coerce(key, raw, _PIPELINE_KEYS[key], lineno)
        elif key in _SOLVER_KEYS:
            out[key] = _coerce(key, raw, _SOLVER_KEYS[key], lineno)
        else:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
    return out


def build_config(overrides: dict | None = None, env=None) -> PipelineConfig:
    """Defaults, then file/flag ``overrides``, then ``FSFC_THREADS``."""
    overrides = dict(overrides or {})
    env = os.environ if env is None else env
    if env.get("FSFC_THREADS"):
        try:
            overrides["n_jobs"] = int(env["FSFC_THREADS"])
        except ValueError:
            raise ConfigError(f"FSFC_THREADS must be an integer, got {env['FSFC_THREADS']!r}") from None
    solver = {k: v for k, v in overrides.items() if k in _SOLVER_KEYS}
    pipeline = {k: v for k, v in overrides.items() if k in _PIPELINE_KEYS}
    return PipelineConfig(**pipeline, solver=SolverConfig(**solver))


def read_config(path, extra: dict | None = None, env=None) -> PipelineConfig:
    overrides = {}
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"{path}: config file not found")
        overrides = parse_config_text(path.read_text(), str(path))
    overrides.update({k: v for k, v in (extra or {}).items() if v is not None})
    return build_config(overrides, env)


# --- model files -------------------------------------------------------------

def _to_jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_to_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _to_jsonable(obj.tolist())
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def _canonical(payload) -> bytes:
    return json.dumps(payload, sort_keys=True, separators=(",", ":")).encode()


def model_payload(model: FittedModel) -> dict:
    return {
        "grid": model.grid.points.tolist(),
        "mean": model.standardization.mean.tolist(),
        "sd": model.standardization.sd.tolist(),
        "degenerate": model.standardization.degenerate.astype(int).tolist(),
        "eigenfunctions": [b.eigenfunctions.tolist() for b in model.bases],
        "eigenvalues": [b.eigenvalues.tolist() for b in model.bases],
        "variance_explained": [b.variance_explained for b in model.bases],
        "rank_deficient": [bool(b.rank_deficient) for b in model.bases],
        "B": model.B.tolist(),
        "weights": [None if np.isinf(w) else float(w) for w in model.weights],
        "active": model.active.tolist(),
        "lambda1": float(model.lambda1),
        "lambda2": float(model.lambda2),
        "metadata": _to_jsonable(model.metadata),
    }


def write_model(model: FittedModel, path) -> None:
    """Write a checksummed JSON document; floats use shortest round-trip repr."""
    payload = model_payload(model)
    doc = {
        "format": MODEL_FORMAT,
        "sha256": hashlib.sha256(_canonical(payload)).hexdigest(),
        "payload": payload,
    }
    Path(path).write_text(json.dumps(doc, indent=1) + "\n")


def read_model(path) -> FittedModel:
    path = Path(path)
    if not path.is_file():
        raise ModelFormatError(f"{path}: model file not found")
    text = path.read_text()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        where = f"line {exc.lineno}, column {exc.colno} (offset {exc.pos} of {len(text)})"
        raise ModelFormatError(f"{path}: truncated or malformed model file at {where}: {exc.msg}") from None
    if not isinstance(doc, dict) or "format" not in doc:
        raise ModelFormatError(f"{path}: not an fsfc model file")
    if doc["format"] != MODEL_FORMAT:
        raise ModelFormatError(f"{path}: unsupported model format {doc['format']!r}, expected {MODEL_FORMAT!r}")
    payload = doc.get("payload")
    if hashlib.sha256(_canonical(payload)).hexdigest() != doc.get("sha256"):
        raise ModelFormatError(f"{path}: checksum mismatch, the file was modified or corrupted")
    try:
        grid = TimeGrid(np.array(payload["grid"], dtype=float))
        stats = Standardization(
            np.array(payload["mean"], dtype=float),
            np.array(payload["sd"], dtype=float),
            np.array(payload["degenerate"], dtype=bool),
        )
        bases = [
            FpcBasis(j, np.array(e, dtype=float), np.array(v, dtype=float), float(ve), grid, bool(rd))
            for j, (e, v, ve, rd) in enumerate(zip(payload["eigenfunctions"], payload["eigenvalues"],
                                                    payload["variance_explained"], payload["rank_deficient"]))
        ]
        k = len(payload["B"][0]) if payload["B"] else (bases[0].k if bases else 0)
        B = np.array(payload["B"], dtype=float).reshape(-1, k)
        weights = np.array([np.inf if w is None else w for w in payload["weights"]], dtype=float)
        return FittedModel(
            grid=grid,
            standardization=stats,
            bases=bases,
            B=B,
            weights=weights,
            active=np.array(payload["active"], dtype=int),
            lambda1=float(payload["lambda1"]),
            lambda2=float(payload["lambda2"]),
            metadata=payload.get("metadata", {}),
        )
    except (KeyError, TypeError, ValueError, IndexError) as exc:
        raise ModelFormatError(f"{path}: incomplete model payload ({type(exc).__name__}: {exc})") from None
