"""Checkpoints: one ABT1 blob file plus a JSON index of name -> byte offset."""
import json
import os

import numpy as np

from .. import blobio

INDEX_VERSION = 1


def save(path, arrays, meta=None):
    """Write ``path + '.bin'`` and ``path + '.json'``; arrays are stored as float32/uint8."""
    index = {}
    chunks = []
    offset = 0
    for name, arr in arrays.items():
        a = np.asarray(arr)
        if a.dtype != np.uint8:
            a = a.astype(np.float32)
        blob = blobio.encode(a)
        index[name] = offset
        chunks.append(blob)
        offset += len(blob)
    tmp_bin, tmp_json = path + ".bin.tmp", path + ".json.tmp"
    with open(tmp_bin, "wb") as fh:
        fh.write(b"".join(chunks))
    with open(tmp_json, "w") as fh:
        json.dump({"version": INDEX_VERSION, "blob": os.path.basename(path) + ".bin",
                   "tensors": index, "meta": meta or {}}, fh, indent=1, sort_keys=False)
    os.replace(tmp_bin, path + ".bin")
    os.replace(tmp_json, path + ".json")


def load(path):
    """Returns ``(arrays, meta)``; raises :mod:`blobio` errors on corruption."""
    try:
        with open(path + ".json") as fh:
            index = json.load(fh)
        names = index["tensors"]
        blob = os.path.join(os.path.dirname(path), index["blob"])
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise blobio.MalformedManifest(f"{path}.json: {exc}") from exc
    if not os.path.exists(blob):
        raise blobio.MissingBlob(f"missing checkpoint blob {blob}")
    with open(blob, "rb") as fh:
        buf = fh.read()
    arrays = {}
    for name, off in names.items():
        arrays[name], _ = blobio.decode(buf, int(off))
    return arrays, index.get("meta", {})
