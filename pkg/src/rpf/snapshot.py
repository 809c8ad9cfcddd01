"""Named-array snapshots stored as JSON text.

Floats are written with ``repr`` precision by the json module, so a save and
load round trip reproduces every array bit for bit.
"""

import json
from pathlib import Path

import numpy as np

from .errors import DataError

FORMAT = "rpf-arrays"


def dump_arrays(arrays: dict, meta: dict | None = None) -> str:
    doc = {"format": FORMAT, "version": 1, "meta": meta or {}, "arrays": {}}
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        kind = "int" if np.issubdtype(arr.dtype, np.integer) else "float"
        data = arr.reshape(-1).tolist()
        doc["arrays"][name] = {"shape": list(arr.shape), "dtype": kind, "data": data}
    return json.dumps(doc, indent=1)


def load_arrays(text: str):
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise DataError(f"snapshot is not valid JSON: {exc}") from None
    if doc.get("format") != FORMAT:
        raise DataError("not an rpf array snapshot")
    arrays = {}
    for name, spec in doc["arrays"].items():
        dtype = np.int64 if spec["dtype"] == "int" else np.float64
        arrays[name] = np.array(spec["data"], dtype=dtype).reshape(spec["shape"])
    return arrays, doc.get("meta", {})


def save(path, arrays: dict, meta: dict | None = None):
    Path(path).write_text(dump_arrays(arrays, meta))


def load(path):
    return load_arrays(Path(path).read_text())
