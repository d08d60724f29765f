"""Single-file checkpoint container shared by both engines.

The container is a zip archive with

* ``weights/<tensor name>.npy`` -- one array per state-dict entry,
* ``config.json`` -- the engine config snapshot,
* ``log.json`` -- the per-epoch training log,
* ``meta.json`` -- ``kind`` (``classifier`` or ``segmenter``), ``backbone_id``
  and ``format_version``.

Entries carry a fixed timestamp so identical content gives identical bytes.
"""

from __future__ import annotations

import io
import json
import os
import zipfile
from dataclasses import dataclass, field

import numpy as np

from .errors import CheckpointUnreadable

FORMAT_VERSION = 1
_EPOCH = (1980, 1, 1, 0, 0, 0)


@dataclass
class Checkpoint:
    kind: str
    backbone_id: str
    weights: dict[str, np.ndarray]
    config: dict
    log: list[dict] = field(default_factory=list)
    extra: dict = field(default_factory=dict)

    @property
    def backbone_weights(self) -> dict[str, np.ndarray]:
        return {k: v for k, v in self.weights.items() if k.startswith("backbone.")}

    @property
    def head_weights(self) -> dict[str, np.ndarray]:
        return {k: v for k, v in self.weights.items() if not k.startswith("backbone.")}

    def state_dict(self):
        import torch

        return {k: torch.from_numpy(np.array(v)) for k, v in self.weights.items()}


def _write(zf: zipfile.ZipFile, name: str, payload: bytes) -> None:
    info = zipfile.ZipInfo(name, date_time=_EPOCH)
    info.compress_type = zipfile.ZIP_DEFLATED
    info.external_attr = 0o644 << 16
    zf.writestr(info, payload)


def _json_bytes(obj) -> bytes:
    return (json.dumps(obj, indent=2, sort_keys=True) + "\n").encode("utf-8")


def save_checkpoint(ckpt: Checkpoint, path: str | os.PathLike) -> None:
    with zipfile.ZipFile(path, "w") as zf:
        for name in sorted(ckpt.weights):
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.asarray(ckpt.weights[name]), allow_pickle=False)
            _write(zf, f"weights/{name}.npy", buf.getvalue())
        _write(zf, "config.json", _json_bytes(ckpt.config))
        _write(zf, "log.json", _json_bytes(ckpt.log))
        meta = {"kind": ckpt.kind, "backbone_id": ckpt.backbone_id, "format_version": FORMAT_VERSION, **ckpt.extra}
        _write(zf, "meta.json", _json_bytes(meta))


def load_checkpoint(path: str | os.PathLike) -> Checkpoint:
    try:
        with zipfile.ZipFile(path) as zf:
            meta = json.loads(zf.read("meta.json"))
            config = json.loads(zf.read("config.json"))
            log = json.loads(zf.read("log.json"))
            weights = {}
            for name in zf.namelist():
                if name.startswith("weights/") and name.endswith(".npy"):
                    with zf.open(name) as fh:
                        weights[name[len("weights/") : -len(".npy")]] = np.lib.format.read_array(
                            io.BytesIO(fh.read()), allow_pickle=False
                        )
    except (OSError, KeyError, ValueError, zipfile.BadZipFile) as exc:
        raise CheckpointUnreadable(f"cannot read checkpoint {path}: {exc}") from exc
    kind = meta.pop("kind", "")
    backbone_id = meta.pop("backbone_id", "")
    meta.pop("format_version", None)
    return Checkpoint(kind, backbone_id, weights, config, log, meta)


def state_to_numpy(state_dict) -> dict[str, np.ndarray]:
    return {k: v.detach().cpu().numpy().copy() for k, v in state_dict.items()}
