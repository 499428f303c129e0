"""File formats: feature CSVs, flat ``key = value`` configs, JSON reports."""

from __future__ import annotations

import csv
import hashlib
import json
import math
from pathlib import Path

import numpy as np

from .glm import LossFamily, one_hot
from .nuisance import ShiftDataset


class ConfigError(ValueError):
    """Malformed or invalid configuration (CLI exit code 2)."""


class DataError(ValueError):
    """Malformed input data (CLI exit code 3)."""


class ConfigDoc(dict):
    """Parsed config: ``key -> raw string`` plus where each key was set."""

    def __init__(self, source: str = "<config>"):
        super().__init__()
        self.source = source
        self.lines = {}

    def where(self, key: str) -> str:
        line = self.lines.get(key)
        if line is None:
            return self.source
        return line if isinstance(line, str) else f"{self.source}:{line}"

    def error(self, key: str, msg: str) -> ConfigError:
        return ConfigError(f"{self.where(key)}: {key}: {msg}")

    def override(self, key: str, value: str, origin: str):
        """Set ``key`` from outside the file (e.g. a command-line flag)."""
        self[key] = value
        self.lines[key] = origin


def parse_config_text(text: str, source: str = "<config>") -> ConfigDoc:
    """Parse ``key = value`` lines; ``#`` starts a comment.

    Errors carry ``source:line`` anchors.
    """
    out = ConfigDoc(source)
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = (p.strip() for p in line.split("=", 1))
        if not key or not key.replace("_", "").isalnum():
            raise ConfigError(f"{source}:{lineno}: invalid key {key!r}")
        if key in out:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        out[key] = value
        out.lines[key] = lineno
    return out


def load_config(path) -> ConfigDoc:
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc
    return parse_config_text(text, str(path))


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()[:16]


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()[:16]


def fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


# ------------------------------------------------------------------ CSV ----


def write_dataset_csv(path, features, labels, domain: str, names=None):
    """Write rows with columns ``feature_*``, ``label`` (blank if None), ``domain``."""
    features = np.atleast_2d(np.asarray(features, dtype=float))
    names = names or [f"feature_{j}" for j in range(features.shape[1])]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(list(names) + ["label", "domain"])
        for i, row in enumerate(features):
            lab = "" if labels is None else fmt(labels[i])
            w.writerow([fmt(v) for v in row] + [lab, domain])


def read_rows(paths):
    """Read and concatenate CSVs sharing one header.

    Returns ``(feature_names, X, labels, domains)`` where missing labels are NaN.
    """
    header = None
    X, labels, domains = [], [], []
    for path in paths:
        try:
            fh = open(path, newline="")
        except OSError as exc:
            raise DataError(f"cannot read data file {path}: {exc.strerror}") from exc
        with fh:
            reader = csv.reader(fh)
            try:
                head = next(reader)
            except StopIteration:
                raise DataError(f"{path}: empty file") from None
            if header is None:
                header = head
            elif head != header:
                raise DataError(f"{path}: header differs from {paths[0]}")
            if "domain" not in head:
                raise DataError(f"{path}: missing required 'domain' column")
            feat_idx = [i for i, h in enumerate(head) if h.startswith("feature_")]
            if not feat_idx:
                raise DataError(f"{path}: no feature_* columns")
            dom_idx = head.index("domain")
            lab_idx = head.index("label") if "label" in head else None
            for lineno, row in enumerate(reader, start=2):
                if len(row) != len(head):
                    raise DataError(f"{path}:{lineno}: expected {len(head)} fields, got {len(row)}")
                try:
                    x = [float(row[i]) for i in feat_idx]
                except ValueError:
                    raise DataError(f"{path}:{lineno}: non-numeric feature value") from None
                if not all(math.isfinite(v) for v in x):
                    raise DataError(f"{path}:{lineno}: non-finite feature value")
                dom = row[dom_idx].strip()
                if dom not in ("P", "Q"):
                    raise DataError(f"{path}:{lineno}: domain must be P or Q, got {dom!r}")
                lab = row[lab_idx].strip() if lab_idx is not None else ""
                try:
                    labels.append(float(lab) if lab else math.nan)
                except ValueError:
                    raise DataError(f"{path}:{lineno}: non-numeric label {lab!r}") from None
                X.append(x)
                domains.append(dom)
    names = [header[i] for i in range(len(header)) if header[i].startswith("feature_")]
    return names, np.asarray(X, dtype=float), np.asarray(labels, dtype=float), np.asarray(domains)


def load_dataset(paths, family: LossFamily) -> ShiftDataset:
    """Build a :class:`ShiftDataset` from CSVs with a ``domain`` column.

    Target labels are kept only when every target row has one.  Multiclass
    labels are class indices and become one-hot rows.
    """
    names, X, y, dom = read_rows(list(paths))
    isP = dom == "P"
    isQ = dom == "Q"
    if isP.sum() < 2 or isQ.sum() < 2:
        raise DataError(f"need at least 2 source (P) and 2 target (Q) rows, got {isP.sum()} and {isQ.sum()}")
    yP = y[isP]
    if np.any(np.isnan(yP)):
        raise DataError("every source (P) row needs a label")
    yQ = y[isQ]
    yQ = None if np.any(np.isnan(yQ)) else yQ
    try:
        if family.kind == "multiclass":
            yP = one_hot(yP, family.K)
            yQ = None if yQ is None else one_hot(yQ, family.K)
        elif family.kind == "binary":
            for arr in (yP, yQ):
                if arr is not None and not np.all((arr == 0) | (arr == 1)):
                    raise ValueError("binary labels must be 0 or 1")
        elif family.kind == "seqgen":
            raise ValueError("sequence-generation data cannot be read from the flat CSV format")
        return ShiftDataset(X[isP], yP, X[isQ], yQ, names)
    except ValueError as exc:
        raise DataError(str(exc)) from exc


# ----------------------------------------------------------------- JSON ----


def _clean(obj):
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if math.isfinite(v) else None
    return obj


def dump_json(obj, path):
    Path(path).write_text(json.dumps(_clean(obj), sort_keys=True, indent=2) + "\n")


def load_json(path):
    return json.loads(Path(path).read_text())


def write_table_csv(path, columns, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([fmt(r.get(c)) if not isinstance(r.get(c), str) else r.get(c) for c in columns])
