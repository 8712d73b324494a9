"""Binary grid files, patch extraction, splits and manifests.

RMG layout (little-endian)::

    magic   4 bytes  b"RMG1"
    version u16      (currently 1)
    planes  u16
    height  u32
    width   u32
    names   planes x 16 bytes, ASCII, NUL padded
    payload planes x height x width float32, row-major
"""

from __future__ import annotations

import hashlib
import logging
import os
import struct
from dataclasses import dataclass, field

import numpy as np

logger = logging.getLogger(__name__)

RMG_MAGIC = b"RMG1"
RMG_VERSION = 1
_HEADER = struct.Struct("<4sHHII")
_NAME_LEN = 16
SPLITS = ("train", "val", "test")


class RmgError(ValueError):
    code = "rmg_error"


class BadMagicError(RmgError):
    code = "bad_magic"


class VersionMismatchError(RmgError):
    code = "version_mismatch"


class TruncatedPayloadError(RmgError):
    code = "truncated_payload"


class PlaneCountError(RmgError):
    code = "plane_count"


@dataclass
class RmgFile:
    names: list[str]
    planes: np.ndarray  # float32 (P, H, W)
    version: int = RMG_VERSION

    def as_dict(self) -> dict[str, np.ndarray]:
        return dict(zip(self.names, self.planes))


def write_rmg(path, planes, names=None) -> None:
    """Write planes given as ``{name: (H, W)}`` or as a ``(P, H, W)`` array plus ``names``."""
    if isinstance(planes, dict):
        if names is not None and list(names) != list(planes):
            raise PlaneCountError("explicit names disagree with the plane mapping")
        names = list(planes)
        arr = np.stack([np.asarray(v) for v in planes.values()]) if planes else np.zeros((0, 0, 0))
    else:
        arr = np.asarray(planes)
        if arr.ndim == 2:
            arr = arr[None]
        if names is None:
            raise PlaneCountError("plane names are required")
        names = list(names)
    if arr.ndim != 3:
        raise ValueError(f"planes must be (P, H, W), got shape {arr.shape}")
    if len(names) != arr.shape[0]:
        raise PlaneCountError(f"header declares {len(names)} planes but {arr.shape[0]} were provided")
    tags = []
    for n in names:
        b = n.encode("ascii")
        if len(b) > _NAME_LEN:
            raise ValueError(f"plane name {n!r} exceeds {_NAME_LEN} bytes")
        tags.append(b.ljust(_NAME_LEN, b"\0"))
    p, h, w = arr.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(RMG_MAGIC, RMG_VERSION, p, h, w))
        fh.write(b"".join(tags))
        fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def read_rmg(path) -> RmgFile:
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 4 or data[:4] != RMG_MAGIC:
        raise BadMagicError(f"{path}: not an RMG file")
    if len(data) < _HEADER.size:
        raise TruncatedPayloadError(f"{path}: header truncated")
    _, version, p, h, w = _HEADER.unpack_from(data)
    if version != RMG_VERSION:
        raise VersionMismatchError(f"{path}: version {version}, expected {RMG_VERSION}")
    names_end = _HEADER.size + p * _NAME_LEN
    expected = names_end + p * h * w * 4
    if len(data) < expected:
        raise TruncatedPayloadError(f"{path}: payload has {len(data) - names_end} bytes, expected {p * h * w * 4}")
    if len(data) > expected:
        raise PlaneCountError(f"{path}: {len(data) - expected} bytes beyond the declared {p} planes")
    names = [
        data[_HEADER.size + k * _NAME_LEN : _HEADER.size + (k + 1) * _NAME_LEN].rstrip(b"\0").decode("ascii")
        for k in range(p)
    ]
    planes = np.frombuffer(data, dtype="<f4", count=p * h * w, offset=names_end).reshape(p, h, w).astype(np.float32)
    return RmgFile(names, planes, version)


# -- key-value sidecars ---------------------------------------------------


def write_sidecar(path, items: dict) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for k, v in items.items():
            fh.write(f"{k}={v}\n")


def read_sidecar(path) -> dict[str, str]:
    out = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            k, _, v = line.partition("=")
            out[k.strip()] = v.strip()
    return out


# -- patches ----------------------------------------------------------------


@dataclass(frozen=True)
class PatchConstraints:
    min_building_frac: float = 0.05
    max_building_frac: float = 0.60
    min_accessible_frac: float = 0.5
    min_road_cells: int = 0
    """Accessible road cells a crop must contain; raised to 1 when road sampling is requested."""

    def satisfied(self, occupancy_crop: np.ndarray, road_crop: np.ndarray | None = None) -> bool:
        occ = occupancy_crop > 0.5
        b = float(np.mean(occ))
        ok = self.min_building_frac <= b <= self.max_building_frac and 1.0 - b >= self.min_accessible_frac
        if ok and self.min_road_cells > 0:
            road = np.zeros_like(occ) if road_crop is None else np.asarray(road_crop) > 0.5
            ok = int((road & ~occ).sum()) >= self.min_road_cells
        return ok


@dataclass
class PatchRecord:
    patch_id: str
    scene_id: str
    bs_id: int
    origin: tuple[int, int]
    size: int
    split: str = ""
    files: list[str] = field(default_factory=list)
    variants: dict[str, str] = field(default_factory=dict)
    """Sampling tag -> relative path of the observation planes."""


class PatchExtractionError(RuntimeError):
    pass


def extract_patches(
    scene,
    bs,
    gain_map=None,
    priors=None,
    count: int = 160,
    size: int = 128,
    constraints: PatchConstraints | None = None,
    seed: int = 0,
    scene_id: str = "scene",
    max_attempts: int | None = None,
) -> list[PatchRecord]:
    """Seeded rejection sampling of distinct crop origins satisfying the constraints.

    ``gain_map`` and ``priors`` are accepted so callers can pass the full bundle;
    validity depends only on the scene geometry.
    """
    cons = constraints or PatchConstraints()
    h, w = scene.shape
    if size > h or size > w:
        raise ValueError(f"patch size {size} exceeds the scene grid {scene.shape}")
    rng = np.random.default_rng(int(seed))
    attempts = max_attempts if max_attempts is not None else 50 * count
    occ = np.asarray(scene.occupancy)
    road = np.asarray(scene.road_mask)
    seen: set[tuple[int, int]] = set()
    records = []
    for _ in range(attempts):
        if len(records) >= count:
            break
        r = int(rng.integers(0, h - size + 1))
        c = int(rng.integers(0, w - size + 1))
        if (r, c) in seen:
            continue
        seen.add((r, c))
        if not cons.satisfied(occ[r : r + size, c : c + size], road[r : r + size, c : c + size]):
            continue
        pid = f"{scene_id}/{bs.id}/{r}-{c}"
        records.append(PatchRecord(pid, scene_id, int(bs.id), (r, c), size))
    if not records:
        raise PatchExtractionError(f"no crop of {scene_id} satisfies {cons}")
    if len(records) < count:
        logger.warning("%s/bs%d: only %d of %d patches satisfy the constraints", scene_id, bs.id, len(records), count)
    return records


def build_splits(identities, ratios=(0.70, 0.15, 0.15), seed: int = 0) -> dict[str, str]:
    """Assign each patch identity to train/val/test by a seeded shuffle."""
    ids = sorted(set(identities))
    if len(ids) < 3:
        raise ValueError("need at least 3 patch identities to split")
    if not np.isclose(sum(ratios), 1.0):
        raise ValueError("split ratios must sum to 1")
    perm = np.random.default_rng(int(seed)).permutation(len(ids))
    n = len(ids)
    n_train = int(round(ratios[0] * n))
    n_val = int(round(ratios[1] * n))
    out = {}
    for rank, k in enumerate(perm):
        out[ids[k]] = "train" if rank < n_train else ("val" if rank < n_train + n_val else "test")
    return out


def config_digest(cfg) -> str:
    text = ";".join(f"{k}={v}" for k, v in sorted(vars(cfg).items()))
    return hashlib.sha1(text.encode("utf-8")).hexdigest()[:12]


MANIFEST_HEADER = "#patch_id\tsplit\tfiles\tsampling_digest"


@dataclass(frozen=True)
class ManifestRow:
    patch_id: str
    split: str
    files: tuple[str, ...]
    digest: str


def write_manifest(path, rows: list[ManifestRow]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(MANIFEST_HEADER + "\n")
        for r in rows:
            fh.write(f"{r.patch_id}\t{r.split}\t{','.join(r.files)}\t{r.digest}\n")


def read_manifest(path) -> list[ManifestRow]:
    if not os.path.exists(path):
        raise FileNotFoundError(f"manifest not found: {path}")
    rows = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.rstrip("\n")
            if not line or line.startswith("#"):
                continue
            pid, split, files, digest = line.split("\t")
            if split not in SPLITS:
                raise ValueError(f"manifest row {pid}: unknown split {split!r}")
            rows.append(ManifestRow(pid, split, tuple(files.split(",")), digest))
    return rows
