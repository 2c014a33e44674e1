"""Directory-based dataset container.

A dataset is a directory holding manifest.json plus raw little-endian
float32 blobs:

    manifest.json   dims, plds, model constants, sigma, seed, generator,
                    time_convention, format_version = 1
    data.raw        V*N*M float32, voxel-major then PLD then repetition
    mask.raw        V bytes, 0/1
    truth_f.raw     optional truth maps (phantoms only)
    truth_att.raw
    t1_map.raw      optional per-voxel true T1 used at generation time

Storage is 32-bit and round-trips bit-exactly; computation everywhere else
is 64-bit.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError, IoFailure, SizeMismatch, VersionUnsupported
from .kinetic import Protocol

FORMAT_VERSION = 1

_MANIFEST_KEYS = ("dims", "plds", "tau", "alpha", "m0b", "lambda_bt", "t1b",
                  "sigma", "seed", "generator", "time_convention",
                  "format_version")


@dataclass
class VoxelDataset:
    """In-memory mirror of the on-disk container.

    On disk the data are always float32; in memory float64 is also
    accepted (noiseless phantoms keep full precision so that exactness
    properties hold). write_dataset quantizes to float32.
    """

    data: np.ndarray                 # (V, N, M) float32 or float64
    mask: np.ndarray                 # (V,) bool
    manifest: dict
    truth_f: np.ndarray | None = None
    truth_att: np.ndarray | None = None
    t1_map: np.ndarray | None = None

    def __post_init__(self):
        if self.data.dtype not in (np.float32, np.float64):
            self.data = np.asarray(self.data, dtype=np.float32)
        self.data = np.ascontiguousarray(self.data)
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.data.ndim != 3:
            raise ValueError(f"data must be (V, N, M), got {self.data.shape}")
        if self.mask.shape != (self.data.shape[0],):
            raise ValueError("mask length must equal the voxel count")
        for name in ("truth_f", "truth_att", "t1_map"):
            arr = getattr(self, name)
            if arr is not None and np.asarray(arr).shape != (self.data.shape[0],):
                raise ValueError(f"{name} length must equal the voxel count")

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.data.shape

    def protocol(self) -> Protocol:
        return protocol_from_manifest(self.manifest)

    def take_reps(self, m: int) -> "VoxelDataset":
        """Restrict to the first m repetitions (acquisition order)."""
        if not 1 <= m <= self.dims[2]:
            raise ValueError(f"m must be in [1, {self.dims[2]}], got {m}")
        manifest = dict(self.manifest)
        manifest["dims"] = [self.dims[0], self.dims[1], m]
        return VoxelDataset(self.data[:, :, :m].copy(), self.mask, manifest,
                            self.truth_f, self.truth_att, self.t1_map)

    def restrict_plds(self, indices) -> "VoxelDataset":
        """Keep only the PLDs at the given (sorted) indices."""
        indices = np.asarray(indices, dtype=int)
        manifest = dict(self.manifest)
        plds = [self.manifest["plds"][i] for i in indices]
        manifest["plds"] = plds
        manifest["dims"] = [self.dims[0], len(plds), self.dims[2]]
        return VoxelDataset(self.data[:, indices, :].copy(), self.mask,
                            manifest, self.truth_f, self.truth_att,
                            self.t1_map)


def manifest_for(protocol: Protocol, dims, seed: int, generator: str,
                 has_t1_map: bool = False) -> dict:
    manifest = {
        "format_version": FORMAT_VERSION,
        "dims": list(int(d) for d in dims),
        "plds": list(protocol.plds),
        "tau": protocol.tau,
        "alpha": protocol.alpha,
        "m0b": protocol.m0b,
        "lambda_bt": protocol.lambda_bt,
        "t1b": protocol.t1b,
        "t1_tissue": protocol.t1_tissue,
        "sigma": protocol.sigma,
        "seed": int(seed),
        "generator": generator,
        "time_convention": protocol.time_convention,
    }
    if has_t1_map:
        manifest["t1_map"] = "t1_map.raw"
    return manifest


def protocol_from_manifest(manifest: dict) -> Protocol:
    try:
        return Protocol(
            plds=tuple(manifest["plds"]),
            tau=float(manifest["tau"]),
            sigma=float(manifest["sigma"]),
            alpha=float(manifest["alpha"]),
            m0b=float(manifest["m0b"]),
            lambda_bt=float(manifest["lambda_bt"]),
            t1b=float(manifest["t1b"]),
            t1_tissue=float(manifest["t1_tissue"]),
            time_convention=manifest.get("time_convention", "pld_is_time"),
        )
    except KeyError as exc:
        raise FormatError(f"manifest missing field {exc.args[0]!r}") from exc
    except (TypeError, ValueError) as exc:
        raise FormatError(f"manifest field invalid: {exc}") from exc


def _write_blob(path: Path, array: np.ndarray, dtype) -> None:
    try:
        path.write_bytes(np.ascontiguousarray(array, dtype=dtype).tobytes())
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


def write_dataset(dataset: VoxelDataset, directory) -> None:
    """Serialize the dataset; read_dataset(write_dataset(d)) is bit-exact."""
    directory = Path(directory)
    try:
        directory.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IoFailure(f"cannot create {directory}: {exc}") from exc
    manifest = dict(dataset.manifest)
    manifest["dims"] = list(dataset.dims)
    if dataset.t1_map is not None:
        manifest["t1_map"] = "t1_map.raw"
    try:
        (directory / "manifest.json").write_text(
            json.dumps(manifest, indent=2, sort_keys=True) + "\n",
            encoding="utf-8")
    except OSError as exc:
        raise IoFailure(f"cannot write {directory / 'manifest.json'}: {exc}") from exc
    _write_blob(directory / "data.raw", dataset.data, "<f4")
    _write_blob(directory / "mask.raw", dataset.mask.astype(np.uint8), "u1")
    for name, arr in (("truth_f", dataset.truth_f),
                      ("truth_att", dataset.truth_att),
                      ("t1_map", dataset.t1_map)):
        if arr is not None:
            _write_blob(directory / f"{name}.raw", arr, "<f4")


def _read_blob(path: Path, dtype, count: int, what: str) -> np.ndarray:
    if not path.is_file():
        raise FormatError(f"{path.name} missing")
    raw = path.read_bytes()
    expected = count * np.dtype(dtype).itemsize
    if len(raw) != expected:
        raise SizeMismatch(
            f"{path.name} holds {len(raw)} bytes, expected {expected} for {what}")
    return np.frombuffer(raw, dtype=dtype).copy()


def read_dataset(directory) -> VoxelDataset:
    """Load and validate a dataset directory.

    Raises FormatError naming the offending field, SizeMismatch for blob
    length disagreements and VersionUnsupported for unknown versions.
    """
    directory = Path(directory)
    mpath = directory / "manifest.json"
    if not mpath.is_file():
        raise FormatError("manifest.json missing")
    try:
        manifest = json.loads(mpath.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise FormatError(f"manifest.json unreadable: {exc}") from exc

    version = manifest.get("format_version")
    if version != FORMAT_VERSION:
        raise VersionUnsupported(
            f"format_version {version!r} unsupported (expected {FORMAT_VERSION})")
    for key in _MANIFEST_KEYS:
        if key not in manifest:
            raise FormatError(f"manifest missing field {key!r}")
    dims = manifest["dims"]
    if (not isinstance(dims, list) or len(dims) != 3
            or any((not isinstance(d, int)) or d < 0 for d in dims)):
        raise FormatError(f"manifest field 'dims' invalid: {dims!r}")
    v, n, m = dims
    plds = manifest["plds"]
    if not isinstance(plds, list) or len(plds) != n:
        raise FormatError(
            f"manifest field 'plds' has {len(plds)} entries, dims say N={n}")
    protocol_from_manifest(manifest)  # validates the physical fields

    data = _read_blob(directory / "data.raw", "<f4", v * n * m,
                      f"dims {v}x{n}x{m}").reshape(v, n, m)
    if not np.all(np.isfinite(data)):
        raise FormatError("data.raw contains non-finite values")
    mask_raw = _read_blob(directory / "mask.raw", "u1", v, f"{v} voxels")
    if np.any(mask_raw > 1):
        raise FormatError("mask.raw holds values other than 0/1")

    def optional(name):
        path = directory / f"{name}.raw"
        if not path.is_file():
            return None
        return _read_blob(path, "<f4", v, f"{v} voxels")

    return VoxelDataset(data=data, mask=mask_raw.astype(bool),
                        manifest=manifest, truth_f=optional("truth_f"),
                        truth_att=optional("truth_att"),
                        t1_map=optional("t1_map"))
