"""
Trace Store - Persistent per-sample activation traces
Each sample is a YAML manifest plus a chunk blob; chunks are named
layer{l}.{field} so single layers load without reading the rest
"""

import logging
import os
import zlib
from typing import Dict, Iterable, List, Optional, Tuple

import numpy as np
import yaml

from core.errors import ArtifactIOError, DataError, DependencyError, FormatError
from traces.trace import ActivationTrace

INDEX_FILE = "index.yaml"
CHUNK_DTYPE = np.dtype("<f4")

# Trace attribute behind each chunk field
FIELD_ATTRS = {
    "hidden": "hidden",
    "resid": "resid_mid",
    "attention": "attention",
    "glu": "glu",
}


def chunk_name(layer: int, field: str) -> str:
    return f"layer{layer}.{field}"


def _manifest_path(directory: str, sample_id: str) -> str:
    return os.path.join(directory, f"{sample_id}.manifest.yaml")


def _blob_path(directory: str, sample_id: str) -> str:
    return os.path.join(directory, f"{sample_id}.chunks")


def save_trace(directory: str, sample_id: str, trace: ActivationTrace) -> int:
    """
    Write one trace as manifest plus chunk blob

    Returns:
        Bytes written to the blob
    """
    os.makedirs(directory, exist_ok=True)
    chunks = []
    offset = 0
    n_layers = None
    with open(_blob_path(directory, sample_id), "wb") as blob:
        for layer_count_source in FIELD_ATTRS.values():
            data = getattr(trace, layer_count_source)
            if data is not None:
                n_layers = data.shape[0]
                break
        for layer in range(n_layers or 0):
            for field, attr in FIELD_ATTRS.items():
                data = getattr(trace, attr)
                if data is None:
                    continue
                raw = np.ascontiguousarray(data[layer], dtype=CHUNK_DTYPE).tobytes()
                blob.write(raw)
                chunks.append({
                    "name": chunk_name(layer, field),
                    "offset": offset,
                    "nbytes": len(raw),
                    "shape": list(data[layer].shape),
                    "crc32": zlib.crc32(raw),
                })
                offset += len(raw)
    manifest = {
        "sample_id": sample_id,
        "tokens": [int(t) for t in trace.tokens],
        "n_layers": int(n_layers or 0),
        "dtype": "f4",
        "chunks": chunks,
        "meta": trace.meta,
    }
    with open(_manifest_path(directory, sample_id), "w", encoding="utf-8") as f:
        yaml.safe_dump(manifest, f, sort_keys=True)
    return offset


class TraceStore:
    """
    Directory of captured traces with an index of samples.

    Keeps read counters in stats so callers can see how much of the store a
    query touched.
    """

    def __init__(self, directory: str):
        """
        Args:
            directory: Store directory (created on first write)
        """
        self.directory = directory
        self.logger = logging.getLogger("VerifScope.TraceStore")
        self.stats = {"chunks_read": 0, "bytes_read": 0, "samples_written": 0}
        self._manifests: Dict[str, dict] = {}

    # ------------------------------------------------------------------
    # Index
    # ------------------------------------------------------------------

    def write_index(self, samples: List[dict], digest: str = "", extra: Optional[dict] = None) -> None:
        """Write index.yaml; each sample entry carries at least an "id"."""
        os.makedirs(self.directory, exist_ok=True)
        index = {"digest": digest, "samples": samples}
        if extra:
            index.update(extra)
        with open(os.path.join(self.directory, INDEX_FILE), "w", encoding="utf-8") as f:
            yaml.safe_dump(index, f, sort_keys=True)
        self.logger.info(f"Indexed {len(samples)} samples in {self.directory}")

    def read_index(self) -> dict:
        path = os.path.join(self.directory, INDEX_FILE)
        if not os.path.exists(path):
            raise DependencyError(path, "capture")
        with open(path, "r", encoding="utf-8") as f:
            return yaml.safe_load(f) or {}

    def sample_ids(self) -> List[str]:
        return [s["id"] for s in self.read_index().get("samples", [])]

    # ------------------------------------------------------------------
    # Samples
    # ------------------------------------------------------------------

    def add(self, sample_id: str, trace: ActivationTrace) -> None:
        nbytes = save_trace(self.directory, sample_id, trace)
        self._manifests.pop(sample_id, None)
        self.stats["samples_written"] += 1
        self.logger.debug(f"Stored trace {sample_id} ({nbytes} bytes)")

    def manifest(self, sample_id: str) -> dict:
        if sample_id not in self._manifests:
            path = _manifest_path(self.directory, sample_id)
            if not os.path.exists(path):
                raise DependencyError(path, "capture")
            with open(path, "r", encoding="utf-8") as f:
                manifest = yaml.safe_load(f)
            if not isinstance(manifest, dict) or "chunks" not in manifest:
                raise FormatError(f"{path}: not a trace manifest")
            self._manifests[sample_id] = manifest
        return self._manifests[sample_id]

    def _read_chunks(self, sample_id: str, wanted: Iterable[dict]) -> Dict[str, np.ndarray]:
        manifest = self.manifest(sample_id)
        path = _blob_path(self.directory, sample_id)
        if not os.path.exists(path):
            raise ArtifactIOError(f"Missing chunk blob {path}")
        size = os.path.getsize(path)
        ordered = sorted(manifest["chunks"], key=lambda c: c["offset"])
        complete = [c["name"] for c in ordered if c["offset"] + c["nbytes"] <= size]
        out = {}
        with open(path, "rb") as blob:
            for chunk in wanted:
                if chunk["offset"] + chunk["nbytes"] > size:
                    last = complete[-1] if complete else None
                    raise ArtifactIOError(
                        f"{path} is truncated; last complete chunk is {last or 'none'}", chunk=last
                    )
                blob.seek(chunk["offset"])
                raw = blob.read(chunk["nbytes"])
                self.stats["chunks_read"] += 1
                self.stats["bytes_read"] += len(raw)
                if zlib.crc32(raw) != chunk["crc32"]:
                    raise ArtifactIOError(f"{path}: chunk {chunk['name']} fails its checksum", chunk=chunk["name"])
                out[chunk["name"]] = np.frombuffer(raw, dtype=CHUNK_DTYPE).astype(np.float32).reshape(chunk["shape"])
        return out

    def load_layer(self, sample_id: str, layer: int, field: str) -> np.ndarray:
        """
        Load one chunk

        Raises:
            DataError: the trace has no such layer or field
        """
        name = chunk_name(layer, field)
        matches = [c for c in self.manifest(sample_id)["chunks"] if c["name"] == name]
        if not matches:
            raise DataError(f"Trace {sample_id} has no chunk {name}")
        return self._read_chunks(sample_id, matches)[name]

    def load(self, sample_id: str) -> ActivationTrace:
        """Load a whole trace."""
        manifest = self.manifest(sample_id)
        data = self._read_chunks(sample_id, manifest["chunks"])
        trace = ActivationTrace(tokens=list(manifest["tokens"]), meta=dict(manifest.get("meta") or {}))
        for field, attr in FIELD_ATTRS.items():
            layers = [data.get(chunk_name(l, field)) for l in range(manifest["n_layers"])]
            if layers and all(x is not None for x in layers):
                setattr(trace, attr, np.stack(layers))
        return trace

    def tokens(self, sample_id: str) -> List[int]:
        return list(self.manifest(sample_id)["tokens"])

    def has_field(self, sample_id: str, field: str) -> bool:
        return any(c["name"].endswith("." + field) for c in self.manifest(sample_id)["chunks"])


def load_trace(directory: str, sample_id: str) -> ActivationTrace:
    return TraceStore(directory).load(sample_id)
