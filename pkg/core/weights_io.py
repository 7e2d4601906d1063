"""
Weights IO - Versioned tensor container used for models, probes and embedding maps
A text manifest at <path> and one raw little-endian float32 blob at <path>.bin
"""

import json
import logging
import os
from typing import Dict, Tuple

import numpy as np

from core.errors import ArtifactIOError, ConfigError, FormatError
from core.model import ModelConfig, Weights, expected_shapes

logger = logging.getLogger("VerifScope.WeightsIO")

MAGIC = "VSCOPE1"
BLOB_DTYPE = np.dtype("<f4")


def blob_path(path: str) -> str:
    return f"{path}.bin"


def write_container(path: str, tensors: Dict[str, np.ndarray], meta: dict) -> None:
    """
    Write named tensors and a JSON metadata record

    Args:
        path: Manifest path; the blob goes next to it
        tensors: Ordered mapping of tensor name to array
        meta: JSON-serialisable metadata
    """
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    lines = [MAGIC, "endian little", "meta " + json.dumps(meta, sort_keys=True)]
    offset = 0
    with open(blob_path(path), "wb") as blob:
        for name, tensor in tensors.items():
            if " " in name:
                raise FormatError(f"Tensor name may not contain spaces: {name!r}")
            data = np.ascontiguousarray(tensor, dtype=BLOB_DTYPE)
            shape = ",".join(str(s) for s in data.shape) or "-"
            lines.append(f"tensor {name} f4 {shape} {offset} {data.size}")
            blob.write(data.tobytes())
            offset += data.nbytes
    with open(path, "w", encoding="utf-8") as f:
        f.write("\n".join(lines) + "\n")
    logger.debug(f"Wrote {len(tensors)} tensors ({offset} bytes) to {path}")


def read_manifest(path: str) -> Tuple[dict, Dict[str, Tuple[Tuple[int, ...], int, int]]]:
    """Parse a manifest into (meta, {name: (shape, offset, count)})."""
    if not os.path.exists(path):
        raise FileNotFoundError(path)
    with open(path, "r", encoding="utf-8") as f:
        lines = [line.rstrip("\n") for line in f if line.strip()]
    if not lines or lines[0] != MAGIC:
        raise FormatError(f"{path}: missing {MAGIC} header")
    if len(lines) < 3 or lines[1] != "endian little":
        raise FormatError(f"{path}: unsupported endianness marker {lines[1] if len(lines) > 1 else ''!r}")
    if not lines[2].startswith("meta "):
        raise FormatError(f"{path}: missing meta line")
    try:
        meta = json.loads(lines[2][len("meta "):])
    except json.JSONDecodeError as e:
        raise FormatError(f"{path}: malformed meta record: {e}") from e

    entries = {}
    for line in lines[3:]:
        parts = line.split(" ")
        if len(parts) != 6 or parts[0] != "tensor":
            raise FormatError(f"{path}: malformed tensor line {line!r}")
        _, name, dtype, shape_text, offset, count = parts
        if dtype != "f4":
            raise FormatError(f"{path}: tensor {name} has unsupported dtype {dtype}")
        try:
            shape = () if shape_text == "-" else tuple(int(s) for s in shape_text.split(","))
            offset_i, count_i = int(offset), int(count)
        except ValueError as e:
            raise FormatError(f"{path}: tensor {name} has a malformed shape or offset") from e
        if int(np.prod(shape, dtype=np.int64)) != count_i:
            raise FormatError(f"{path}: tensor {name} shape {shape} does not match count {count_i}")
        entries[name] = (shape, offset_i, count_i)
    return meta, entries


def read_container(path: str) -> Tuple[Dict[str, np.ndarray], dict]:
    """
    Read every tensor of a container

    Returns:
        (tensors, meta)

    Raises:
        FormatError: malformed manifest
        ArtifactIOError: blob shorter than the manifest requires
    """
    meta, entries = read_manifest(path)
    bpath = blob_path(path)
    if not os.path.exists(bpath):
        raise ArtifactIOError(f"Missing blob {bpath}")
    raw = np.fromfile(bpath, dtype=np.uint8)
    tensors = {}
    for name, (shape, offset, count) in entries.items():
        end = offset + count * BLOB_DTYPE.itemsize
        if end > raw.size:
            raise ArtifactIOError(f"{bpath}: blob truncated inside tensor {name}", chunk=name)
        data = raw[offset:end].view(BLOB_DTYPE).astype(np.float32)
        tensors[name] = data.reshape(shape)
    return tensors, meta


def save_weights(weights: Weights, path: str, digest: str = "") -> None:
    """Save model weights with their configuration in the manifest meta record."""
    meta = {"kind": "model", "config": weights.config.to_dict(), "digest": digest}
    write_container(path, dict(weights.items()), meta)


def load_weights(path: str) -> Weights:
    """
    Load model weights

    Raises:
        FormatError: the manifest disagrees with its own configuration; the
            message names the offending tensor
    """
    meta, entries = read_manifest(path)
    if meta.get("kind") != "model" or "config" not in meta:
        raise FormatError(f"{path}: not a model container")
    known = {k: v for k, v in meta["config"].items() if k in ModelConfig.__dataclass_fields__}
    config = ModelConfig(**known)
    shapes = expected_shapes(config)
    for name, shape in shapes.items():
        if name not in entries:
            raise FormatError(f"{path}: missing tensor {name}")
        if entries[name][0] != shape:
            raise FormatError(f"{path}: tensor {name} has shape {entries[name][0]}, config expects {shape}")
    try:
        config.validate()
    except ConfigError as e:
        raise FormatError(f"{path}: {e}") from e
    tensors, _ = read_container(path)
    return Weights(config, tensors)


def weights_digest(path: str) -> str:
    """Config digest recorded in a container, empty when absent."""
    meta, _ = read_manifest(path)
    return str(meta.get("digest", ""))
