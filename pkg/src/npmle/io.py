"""CSV and JSON formats used by the command-line tools."""
import json
from pathlib import Path

import numpy as np

from .errors import ConfigError, ParseError
from .model import Covariance, DiscreteDistribution

SCHEMA = "npmle.report"
SCHEMA_VERSION = 1


def fmt(v):
    """Round-trip safe text for a float (17 significant digits)."""
    return format(float(v), ".17g")


def read_csv_matrix(path, ncols=None):
    """Read comma-separated floats, one row per line.

    Lines starting with '#' are comments; blank lines are skipped. Raises
    ParseError with the 1-based line number on the first malformed line.
    """
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ParseError(f"cannot read file ({exc.strerror})", path) from exc
    rows = []
    width = ncols
    for lineno, line in enumerate(text.splitlines(), 1):
        s = line.strip()
        if not s or s.startswith("#"):
            continue
        fields = s.split(",")
        try:
            row = [float(f) for f in fields]
        except ValueError:
            raise ParseError(f"non-numeric field in {s[:40]!r}", path, lineno) from None
        if not all(np.isfinite(row)):
            raise ParseError("non-finite value", path, lineno)
        if width is None:
            width = len(row)
        elif len(row) != width:
            raise ParseError(f"expected {width} fields, found {len(row)}", path, lineno)
        rows.append(row)
    if not rows:
        raise ParseError("no data rows", path)
    return np.array(rows, dtype=float)


def write_csv_matrix(path, A, header=None):
    A = np.asarray(A, dtype=float)
    if A.ndim == 1:
        A = A[:, None]
    lines = []
    if header:
        lines.append("# " + header)
    for row in A:
        lines.append(",".join(fmt(v) for v in row))
    Path(path).write_text("\n".join(lines) + "\n")


def parse_cov(spec, n, d):
    """Covariance from ``iso:<v>``, ``diag:<path>`` or ``full:<path>``."""
    if spec is None:
        return Covariance.iso(1.0)
    kind, _, arg = spec.partition(":")
    if kind == "iso":
        try:
            v = float(arg) if arg else 1.0
        except ValueError:
            raise ConfigError(f"bad isotropic variance {arg!r}") from None
        return Covariance.iso(v)
    if kind == "diag":
        V = read_csv_matrix(arg)
        if V.shape != (n, d):
            raise ConfigError(f"diagonal covariance file has shape {V.shape}, data needs {(n, d)}")
        return Covariance.diag(V)
    if kind == "full":
        V = read_csv_matrix(arg)
        if V.shape != (n, d * d):
            raise ConfigError(f"full covariance file has shape {V.shape}, data needs {(n, d * d)}")
        return Covariance.full(V.reshape(n, d, d))
    raise ConfigError(f"unknown covariance spec {spec!r}")


def _jsonable(v):
    if isinstance(v, np.ndarray):
        return v.tolist()
    if isinstance(v, (np.floating,)):
        return float(v)
    if isinstance(v, (np.integer,)):
        return int(v)
    if isinstance(v, np.bool_):
        return bool(v)
    raise TypeError(f"not serializable: {type(v)}")


def write_report(path, report):
    """Write a report dict, stamping the schema name and version."""
    out = {"schema": SCHEMA, "version": SCHEMA_VERSION}
    out.update(report)
    Path(path).write_text(json.dumps(out, indent=2, default=_jsonable, allow_nan=True) + "\n")


def read_report(path):
    """Load a report; every field, known or not, is kept."""
    path = Path(path)
    try:
        rep = json.loads(path.read_text())
    except OSError as exc:
        raise ParseError(f"cannot read file ({exc.strerror})", path) from exc
    except json.JSONDecodeError as exc:
        raise ParseError(f"invalid JSON: {exc.msg}", path, exc.lineno) from None
    if not isinstance(rep, dict):
        raise ParseError("report must be a JSON object", path)
    if rep.get("schema", SCHEMA) != SCHEMA:
        raise ParseError(f"unexpected schema {rep.get('schema')!r}", path)
    if int(rep.get("version", SCHEMA_VERSION)) > SCHEMA_VERSION:
        raise ParseError(f"report version {rep['version']} is newer than supported", path)
    return rep


def prior_from_report(rep):
    if rep.get("atoms") is None:
        raise ConfigError("report has no atoms (fit from an explicit matrix)")
    return DiscreteDistribution(np.array(rep["atoms"], dtype=float), np.array(rep["weights"], dtype=float))
