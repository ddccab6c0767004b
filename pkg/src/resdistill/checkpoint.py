"""Named-tensor archive: a byte-deterministic zip of .npy payloads plus JSON metadata.

Writes are atomic (temp file then rename) and carry a mandatory format version.
Entry timestamps are pinned so identical contents produce identical bytes,
which the reproducibility contract relies on.
"""

from __future__ import annotations

import io
import json
import os
import zipfile
from pathlib import Path
from typing import Mapping

import numpy as np

FORMAT_VERSION = 1
_META_ENTRY = "__meta__.json"
_EPOCH = (1980, 1, 1, 0, 0, 0)


def save_archive(path: Path, arrays: Mapping[str, np.ndarray], meta: dict) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = dict(meta)
    payload["format_version"] = FORMAT_VERSION
    tmp = path.with_suffix(path.suffix + ".tmp")
    with zipfile.ZipFile(tmp, "w", zipfile.ZIP_STORED) as zf:
        info = zipfile.ZipInfo(_META_ENTRY, date_time=_EPOCH)
        zf.writestr(info, json.dumps(payload, sort_keys=True, indent=1))
        for name in sorted(arrays):
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.ascontiguousarray(arrays[name]), allow_pickle=False)
            info = zipfile.ZipInfo(name + ".npy", date_time=_EPOCH)
            zf.writestr(info, buf.getvalue())
    os.replace(tmp, path)


def load_archive(path: Path) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    with zipfile.ZipFile(path) as zf:
        names = zf.namelist()
        if _META_ENTRY not in names:
            raise ValueError(f"{path} is not a tensor archive (missing {_META_ENTRY})")
        meta = json.loads(zf.read(_META_ENTRY))
        if "format_version" not in meta:
            raise ValueError(f"{path}: archive metadata lacks a format_version field")
        if meta["format_version"] > FORMAT_VERSION:
            raise ValueError(
                f"{path}: format_version {meta['format_version']} is newer than "
                f"supported {FORMAT_VERSION}"
            )
        arrays = {}
        for name in names:
            if name == _META_ENTRY:
                continue
            arrays[name[: -len(".npy")]] = np.lib.format.read_array(
                io.BytesIO(zf.read(name)), allow_pickle=False
            )
    return arrays, meta
