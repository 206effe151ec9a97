"""Text file formats: point clouds, plans, key=value configs and JSON records."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .embedding import AttentionWeights
from .geometry import CorrespondenceSet, PointCloud, RigidTransform
from .ot import SolverConfig
from .registration import TEMPERATURE, PipelineConfig

FLOAT_FMT = "%.17g"
RESULT_FIELDS = ("scene_id", "rre_deg", "rte_m", "rmse_m", "rr", "n_corr", "runtime_ms")


class FormatError(ValueError):
    """Malformed input file; the message names the file and line."""


def _fmt_row(values):
    return " ".join(FLOAT_FMT % v for v in values)


# -- point clouds ------------------------------------------------------------

def _parse_floats(tokens, path, lineno, expected=None):
    if expected is not None and len(tokens) != expected:
        raise FormatError(f"{path}:{lineno}: expected {expected} values, got {len(tokens)}")
    try:
        vals = [float(t) for t in tokens]
    except ValueError as exc:
        raise FormatError(f"{path}:{lineno}: {exc}") from None
    return vals


def _check_finite_xyz(rows, path, first_line):
    for k, r in enumerate(rows):
        if not all(math.isfinite(v) for v in r[:3]):
            raise FormatError(f"{path}:{first_line + k}: non-finite coordinate")


def _read_ply(path, lines):
    if not lines or lines[0].strip() != "ply":
        raise FormatError(f"{path}:1: missing 'ply' magic")
    n_vertex, props, fmt, end = None, [], None, None
    for k, line in enumerate(lines[1:], start=2):
        tok = line.split()
        if not tok or tok[0] in ("comment", "obj_info"):
            continue
        if tok[0] == "format":
            fmt = tok[1] if len(tok) > 1 else None
        elif tok[0] == "element":
            if len(tok) != 3 or not tok[2].isdigit():
                raise FormatError(f"{path}:{k}: malformed element line")
            if tok[1] != "vertex":
                raise FormatError(f"{path}:{k}: unsupported element {tok[1]!r}")
            n_vertex = int(tok[2])
        elif tok[0] == "property":
            if len(tok) != 3 or tok[1] == "list":
                raise FormatError(f"{path}:{k}: unsupported property line")
            props.append(tok[2])
        elif tok[0] == "end_header":
            end = k
            break
        else:
            raise FormatError(f"{path}:{k}: unexpected header line {line.strip()!r}")
    if end is None:
        raise FormatError(f"{path}: missing end_header")
    if fmt != "ascii":
        raise FormatError(f"{path}: only ASCII PLY is supported")
    if n_vertex is None:
        raise FormatError(f"{path}: missing vertex element")
    for axis in ("x", "y", "z"):
        if axis not in props:
            raise FormatError(f"{path}: missing property {axis!r}")
    feat = sorted((p for p in props if p.startswith("f") and p[1:].isdigit()), key=lambda p: int(p[1:]))
    if feat and [int(p[1:]) for p in feat] != list(range(len(feat))):
        raise FormatError(f"{path}: feature properties must be f0..f{{b-1}}")
    body = [(k, l) for k, l in enumerate(lines[end:], start=end + 1) if l.strip()]
    if len(body) != n_vertex:
        raise FormatError(f"{path}: header declares {n_vertex} vertices, found {len(body)}")
    rows = [_parse_floats(l.split(), path, k, len(props)) for k, l in body]
    A = np.array(rows, dtype=np.float64).reshape(n_vertex, len(props))
    col = {p: i for i, p in enumerate(props)}
    pts = A[:, [col["x"], col["y"], col["z"]]]
    bad = np.flatnonzero(~np.isfinite(pts).all(axis=1))
    if len(bad):
        raise FormatError(f"{path}:{body[bad[0]][0]}: non-finite coordinate")
    F = A[:, [col[p] for p in feat]] if feat else None
    O = A[:, col["overlap"]] if "overlap" in col else None
    return PointCloud(pts, F, O)


def _read_xyz(path, lines):
    rows, first = [], None
    width = None
    for k, line in enumerate(lines, start=1):
        s = line.strip()
        if not s or s.startswith("#"):
            continue
        tok = s.split()
        if width is None:
            width = len(tok)
            if width < 3:
                raise FormatError(f"{path}:{k}: expected at least 3 columns")
        vals = _parse_floats(tok, path, k, width)
        if not all(math.isfinite(v) for v in vals[:3]):
            raise FormatError(f"{path}:{k}: non-finite coordinate")
        rows.append(vals)
        first = first or k
    A = np.array(rows, dtype=np.float64).reshape(-1, width or 3)
    return PointCloud(A[:, :3], A[:, 3:] if A.shape[1] > 3 else None)


def read_cloud(path):
    """Read an ASCII PLY (``x y z``, optional ``f0..``, optional ``overlap``) or XYZ file."""
    path = Path(path)
    ext = path.suffix.lower()
    if ext not in (".ply", ".xyz", ".txt"):
        raise FormatError(f"{path}: unsupported extension {ext!r}")
    lines = path.read_text().splitlines()
    if ext == ".ply":
        return _read_ply(path, lines)
    return _read_xyz(path, lines)


def write_cloud(cloud, path):
    path = Path(path)
    ext = path.suffix.lower()
    cols = [cloud.points]
    if ext == ".ply":
        names = ["x", "y", "z"]
        if cloud.features is not None:
            cols.append(cloud.features)
            names += [f"f{k}" for k in range(cloud.features.shape[1])]
        if cloud.overlap_scores is not None:
            cols.append(cloud.overlap_scores[:, None])
            names.append("overlap")
        header = ["ply", "format ascii 1.0", f"element vertex {len(cloud)}"]
        header += [f"property double {n}" for n in names] + ["end_header"]
    elif ext in (".xyz", ".txt"):
        if cloud.features is not None:
            cols.append(cloud.features)
        header = []
    else:
        raise FormatError(f"{path}: unsupported extension {ext!r}")
    A = np.hstack(cols)
    body = [_fmt_row(r) for r in A]
    path.write_text("\n".join(header + body) + "\n")


# -- plans -------------------------------------------------------------------

def write_matrix(M, path):
    """Dense matrix text: row count, column count, then one row per line."""
    M = np.atleast_2d(np.asarray(M, dtype=np.float64))
    lines = [str(M.shape[0]), str(M.shape[1])] + [_fmt_row(r) for r in M]
    Path(path).write_text("\n".join(lines) + "\n")


def read_matrix(path):
    path = Path(path)
    lines = [l for l in path.read_text().splitlines()]
    if len(lines) < 2:
        raise FormatError(f"{path}: missing 2-line header")
    try:
        n, m = int(lines[0]), int(lines[1])
    except ValueError:
        raise FormatError(f"{path}:1: header must hold the row and column counts") from None
    body = [(k, l) for k, l in enumerate(lines[2:], start=3) if l.strip()]
    if len(body) != n:
        raise FormatError(f"{path}: header declares {n} rows, found {len(body)}")
    rows = [_parse_floats(l.split(), path, k, m) for k, l in body]
    return np.array(rows, dtype=np.float64).reshape(n, m)


write_plan = write_matrix
read_plan = read_matrix


# -- embedding weights -------------------------------------------------------

def write_weights(weights, path):
    np.savez(path, **weights.as_dict())


def read_weights(path):
    with np.load(path) as data:
        return AttentionWeights(**{k: data[k] for k in data.files})


# -- ground truth sidecars and result records -------------------------------

def write_ground_truth(path, gt, corr, meta=None):
    doc = {
        "rotation": gt.rotation.tolist(),
        "translation": gt.translation.tolist(),
        "correspondences": corr.pairs.tolist(),
        "meta": meta or {},
    }
    Path(path).write_text(json.dumps(doc, sort_keys=True) + "\n")


def read_ground_truth(path):
    doc = json.loads(Path(path).read_text())
    T = RigidTransform(np.array(doc["rotation"]), np.array(doc["translation"]))
    return T, CorrespondenceSet(np.array(doc["correspondences"], dtype=np.int64).reshape(-1, 2)), doc.get("meta", {})


def _json_float(x):
    return None if x is None or not math.isfinite(x) else round(float(x), 12)


def result_record(scene_id, result, runtime_ms=None):
    """JSON-lines record of a registration result."""
    return {
        "scene_id": scene_id,
        "rre_deg": _json_float(result.rre),
        "rte_m": _json_float(result.rte),
        "rmse_m": _json_float(result.rmse),
        "rr": result.rr_flag,
        "n_corr": len(result.correspondences),
        "runtime_ms": runtime_ms,
    }


def dumps_record(rec):
    return json.dumps(rec, sort_keys=True)


RESULT_SCHEMA = {
    "type": "object",
    "required": list(RESULT_FIELDS),
    "additionalProperties": False,
    "properties": {
        "scene_id": {"type": "string"},
        "rre_deg": {"type": ["number", "null"], "minimum": 0},
        "rte_m": {"type": ["number", "null"], "minimum": 0},
        "rmse_m": {"type": ["number", "null"], "minimum": 0},
        "rr": {"type": ["boolean", "null"]},
        "n_corr": {"type": "integer", "minimum": 0},
        "runtime_ms": {"type": ["number", "null"], "minimum": 0},
    },
}


# -- run configuration -------------------------------------------------------

FEATURE_PROVIDERS = ("descriptor", "oracle")
# cosine similarities of the two providers live on very different scales
PROVIDER_TEMPERATURE = {"descriptor": TEMPERATURE, "oracle": 1e-5}


@dataclass(frozen=True)
class RunConfig:
    solver: SolverConfig = field(default_factory=SolverConfig)
    pipeline: PipelineConfig = field(default_factory=PipelineConfig)
    features: str = "descriptor"
    descriptor_radius: float = 0.5
    feature_dim: int = 32
    seed: int = 0

    def __post_init__(self):
        if self.features not in FEATURE_PROVIDERS:
            raise ValueError(f"unknown feature provider {self.features!r}")


def read_config(path):
    """Flat ``key = value`` file; ``#`` starts a comment. Returns a dict of strings."""
    out = {}
    path = Path(path)
    for k, line in enumerate(path.read_text().splitlines(), start=1):
        s = line.split("#", 1)[0].strip()
        if not s:
            continue
        if "=" not in s:
            raise FormatError(f"{path}:{k}: expected key = value")
        key, value = (t.strip() for t in s.split("=", 1))
        if not key:
            raise FormatError(f"{path}:{k}: empty key")
        out[key] = value
    return out


def _coerce(cls_fields, values, where):
    out = {}
    for f in cls_fields:
        if f.name in values:
            raw = values[f.name]
            typ = type(f.default) if not callable(getattr(f, "default_factory", None)) else str
            try:
                out[f.name] = typ(raw) if typ is not bool else str(raw).lower() in ("1", "true", "yes")
            except (TypeError, ValueError):
                raise ValueError(f"{where}: bad value {raw!r} for {f.name}") from None
    return out


def build_run_config(values):
    """Assemble a :class:`RunConfig` from flat string values.

    Keys are the field names of :class:`SolverConfig`, :class:`PipelineConfig`
    and :class:`RunConfig` (``seed`` is shared). Unknown keys are rejected.
    """
    values = {k: v for k, v in values.items() if v is not None}
    known = {f.name for f in fields(SolverConfig)} | {f.name for f in fields(PipelineConfig)}
    known |= {f.name for f in fields(RunConfig)}
    unknown = set(values) - known - {"solver", "pipeline"}
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    run = _coerce([f for f in fields(RunConfig) if f.name not in ("solver", "pipeline")], values, "config")
    seed = int(run.get("seed", 0))
    features = run.get("features", "descriptor")
    solver = SolverConfig(**{**_coerce(fields(SolverConfig), values, "config"), "seed": seed})
    pipe_vals = _coerce([f for f in fields(PipelineConfig) if f.name != "solver"], values, "config")
    pipe_vals.setdefault("temperature", PROVIDER_TEMPERATURE.get(features, PipelineConfig.temperature))
    pipeline = replace(PipelineConfig(**pipe_vals), solver=solver, seed=seed)
    return RunConfig(solver=solver, pipeline=pipeline, **{**run, "seed": seed})
