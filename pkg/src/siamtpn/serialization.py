"""Weight files: a text manifest followed by a little-endian float32 payload.

Layout::

    SIAMTPN-WEIGHTS
    <manifest length in bytes>
    <manifest JSON: format_version, config, tensors[name, shape, offset, count], payload_bytes>
    <payload>

Offsets and counts are in float32 elements from the start of the payload.
"""
from __future__ import annotations

import json
import os
from pathlib import Path

import numpy as np

from .errors import ConfigMismatchError, ManifestError, TruncatedPayloadError, VersionMismatchError
from .model import ModelConfig, SiamTPN

MAGIC = b"SIAMTPN-WEIGHTS\n"
FORMAT_VERSION = 1
_DTYPE = np.dtype("<f4")


def save_weights(model: SiamTPN, path) -> None:
    params = model.named_parameters()
    tensors, offset = [], 0
    for name, p in params.items():
        tensors.append({"name": name, "shape": list(p.shape), "offset": offset, "count": int(p.data.size)})
        offset += int(p.data.size)
    manifest = {
        "format_version": FORMAT_VERSION,
        "config": model.cfg.to_dict(),
        "tensors": tensors,
        "payload_bytes": offset * _DTYPE.itemsize,
    }
    text = json.dumps(manifest, indent=1).encode("utf-8")
    payload = b"".join(np.ascontiguousarray(p.data, dtype=_DTYPE).tobytes() for p in params.values())
    tmp = Path(f"{path}.tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(f"{len(text)}\n".encode("ascii"))
        fh.write(text)
        fh.write(payload)
    os.replace(tmp, path)


def read_manifest(path) -> tuple[dict, bytes]:
    """Parse the header; returns (manifest, payload bytes)."""
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise ManifestError(f"cannot read {path}: {exc}") from exc
    if not blob.startswith(MAGIC):
        raise ManifestError(f"{path}: not a weight file (bad magic line)")
    rest = blob[len(MAGIC):]
    nl = rest.find(b"\n")
    try:
        size = int(rest[:nl].decode("ascii")) if nl > 0 else -1
    except (UnicodeDecodeError, ValueError):
        size = -1
    if size < 0 or nl + 1 + size > len(rest):
        raise ManifestError(f"{path}: bad manifest length")
    try:
        manifest = json.loads(rest[nl + 1: nl + 1 + size].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ManifestError(f"{path}: manifest is not valid JSON ({exc})") from exc
    if not isinstance(manifest, dict) or not {"format_version", "config", "tensors", "payload_bytes"} <= set(manifest):
        raise ManifestError(f"{path}: manifest is missing required fields")
    return manifest, rest[nl + 1 + size:]


def load_weights(path, expected: ModelConfig | None = None) -> SiamTPN:
    """Rebuild a model from ``path``; ``expected`` (if given) must equal the stored config."""
    manifest, payload = read_manifest(path)
    if manifest["format_version"] != FORMAT_VERSION:
        raise VersionMismatchError(f"{path}: format version {manifest['format_version']}, expected {FORMAT_VERSION}")
    try:
        cfg = ModelConfig.from_dict(manifest["config"])
    except (TypeError, ValueError) as exc:
        raise ManifestError(f"{path}: invalid config echo ({exc})") from exc
    if expected is not None and expected != cfg:
        diff = sorted(k for k, v in expected.to_dict().items() if cfg.to_dict().get(k) != v)
        raise ConfigMismatchError(f"{path}: stored config differs in {diff}")
    if len(payload) < manifest["payload_bytes"]:
        raise TruncatedPayloadError(f"{path}: payload has {len(payload)} bytes, manifest declares {manifest['payload_bytes']}")
    if len(payload) > manifest["payload_bytes"]:
        raise ManifestError(f"{path}: {len(payload) - manifest['payload_bytes']} unexpected trailing bytes")
    model = SiamTPN(cfg)
    params = model.named_parameters()
    entries = {t.get("name"): t for t in manifest["tensors"] if isinstance(t, dict)}
    if set(entries) != set(params):
        missing, extra = sorted(set(params) - set(entries)), sorted(set(entries) - set(params))
        raise ConfigMismatchError(f"{path}: tensor names differ (missing {missing[:3]}, unexpected {extra[:3]})")
    values = np.frombuffer(payload, dtype=_DTYPE)
    for name, p in params.items():
        t = entries[name]
        if list(t["shape"]) != list(p.shape) or t["count"] != p.data.size:
            raise ConfigMismatchError(f"{path}: tensor {name} has shape {t['shape']}, model expects {list(p.shape)}")
        lo, hi = t["offset"], t["offset"] + t["count"]
        if lo < 0 or hi > values.size:
            raise TruncatedPayloadError(f"{path}: tensor {name} runs past the payload")
        p.data = values[lo:hi].astype(np.float64).reshape(p.shape)
    return model
