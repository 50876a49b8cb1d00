"""Text formats shared by the library and the CLI.

Floats are rendered with 17 significant digits, enough to round-trip any
IEEE double exactly, so save -> load -> save reproduces files byte for
byte.

Matrix files: first line ``rows,cols``, then the row-major values as
comma-separated lines (one matrix row per line on write; readers accept
any line chunking).
"""

import json

import numpy as np

from latentalign.errors import InvalidInputError, ParamsSchemaError


def format_float(x):
    """17-significant-digit decimal rendering of a float."""
    return f"{float(x):.17g}"


def _render(obj, indent, level):
    pad = " " * (indent * level)
    inner = " " * (indent * (level + 1))
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        items = ",\n".join(
            f"{inner}{json.dumps(str(k))}: {_render(v, indent, level + 1)}"
            for k, v in obj.items())
        return "{\n" + items + "\n" + pad + "}"
    if isinstance(obj, (list, tuple)):
        if len(obj) == 0:
            return "[]"
        items = ",\n".join(f"{inner}{_render(v, indent, level + 1)}" for v in obj)
        return "[\n" + items + "\n" + pad + "]"
    if isinstance(obj, np.ndarray):
        return _render(obj.tolist(), indent, level)
    if isinstance(obj, bool) or obj is None:
        return json.dumps(obj)
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        if x != x:
            return "NaN"
        if x == float("inf"):
            return "Infinity"
        if x == float("-inf"):
            return "-Infinity"
        return format_float(x)
    if isinstance(obj, str):
        return json.dumps(obj)
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def dumps_json(obj, indent=2):
    """JSON text with deterministic 17-significant-digit floats."""
    return _render(obj, indent, 0) + "\n"


def loads_json(text):
    return json.loads(text)


def write_json(path, obj):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(dumps_json(obj))


def read_json(path):
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def dumps_matrix(mat):
    arr = np.asarray(mat, dtype=float)
    if arr.ndim == 1:
        arr = arr.reshape(1, -1)
    if arr.ndim != 2:
        raise InvalidInputError(f"matrix text format is 2-d, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise InvalidInputError("matrix text format requires finite entries")
    rows, cols = arr.shape
    lines = [f"{rows},{cols}"]
    for row in arr:
        lines.append(",".join(format_float(x) for x in row))
    return "\n".join(lines) + "\n"


def loads_matrix(text):
    lines = [ln.strip() for ln in text.strip().splitlines() if ln.strip()]
    if not lines:
        raise InvalidInputError("empty matrix file")
    header = lines[0].split(",")
    if len(header) != 2:
        raise InvalidInputError(f"matrix header must be 'rows,cols', got {lines[0]!r}")
    try:
        rows, cols = int(header[0]), int(header[1])
    except ValueError as exc:
        raise InvalidInputError(f"bad matrix header {lines[0]!r}") from exc
    values = []
    for ln in lines[1:]:
        for tok in ln.split(","):
            tok = tok.strip()
            if tok:
                try:
                    values.append(float(tok))
                except ValueError as exc:
                    raise InvalidInputError(f"bad matrix value {tok!r}") from exc
    if len(values) != rows * cols:
        raise InvalidInputError(
            f"matrix body has {len(values)} values, header says {rows}x{cols}")
    return np.array(values, dtype=float).reshape(rows, cols)


def write_matrix(path, mat):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(dumps_matrix(mat))


def read_matrix(path):
    with open(path, encoding="utf-8") as fh:
        return loads_matrix(fh.read())


def params_to_document(params):
    """Parameter set as a plain dict matching the on-disk JSON schema."""
    return {
        "latent_dim": params.latent_dim,
        "modalities": [
            {
                "id": m,
                "W": params.loadings[m],
                "mu": params.offsets[m],
                "sigma": params.noise_std[m],
            }
            for m in params.modality_ids
        ],
    }


def params_from_document(doc):
    from latentalign.latentmodel import GenerativeParams

    if not isinstance(doc, dict):
        raise ParamsSchemaError("parameter document must be a JSON object")
    for key in ("latent_dim", "modalities"):
        if key not in doc:
            raise ParamsSchemaError(f"missing field {key!r}", field=key)
    latent_dim = doc["latent_dim"]
    if not isinstance(latent_dim, int) or latent_dim < 1:
        raise ParamsSchemaError("latent_dim must be a positive integer",
                                field="latent_dim")
    mods = doc["modalities"]
    if not isinstance(mods, list) or not mods:
        raise ParamsSchemaError("modalities must be a nonempty list",
                                field="modalities")
    ids, loadings, offsets, noise = [], {}, {}, {}
    for entry in mods:
        for key in ("id", "W", "mu", "sigma"):
            if key not in entry:
                raise ParamsSchemaError(f"modality entry missing {key!r}", field=key)
        m = entry["id"]
        ids.append(m)
        try:
            loadings[m] = np.array(entry["W"], dtype=float)
            offsets[m] = np.array(entry["mu"], dtype=float)
        except (TypeError, ValueError) as exc:
            raise ParamsSchemaError(f"modality {m!r} has malformed arrays",
                                    field="W") from exc
        sigma = entry["sigma"]
        if not isinstance(sigma, (int, float)) or not sigma > 0:
            raise ParamsSchemaError(f"modality {m!r} has sigma <= 0", field="sigma")
        noise[m] = float(sigma)
    try:
        return GenerativeParams(latent_dim, tuple(ids), loadings, offsets, noise)
    except Exception as exc:
        raise ParamsSchemaError(f"invalid parameter set: {exc}") from exc


def save_params(path, params):
    write_json(path, params_to_document(params))


def load_params(path):
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ParamsSchemaError(f"not valid JSON: {exc}") from exc
    return params_from_document(doc)
