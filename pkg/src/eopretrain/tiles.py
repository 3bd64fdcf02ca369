"""Tile data model, modality registry, binary tile container and dataset index."""

from __future__ import annotations

import datetime as dt
import hashlib
import json
import os
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

DW_CLASSES = (
    "water", "trees", "grass", "flooded_vegetation", "crops",
    "shrub_and_scrub", "built", "bare", "snow_and_ice",
)
ESA_CLASSES = (
    "tree_cover", "shrubland", "grassland", "cropland", "built_up", "bare_sparse",
    "snow_ice", "permanent_water", "herbaceous_wetland", "mangroves", "moss_lichen",
)
DW_WATER = DW_CLASSES.index("water")
ESA_WATER = ESA_CLASSES.index("permanent_water")

GEOMORPHON_FORMS = (
    "flat", "peak", "ridge", "shoulder", "spur", "slope", "hollow", "footslope", "valley", "pit",
)

S2_BANDS = ("B1", "B2", "B3", "B4", "B5", "B6", "B7", "B8", "B8A", "B9", "B11", "B12")
S1_CHANNELS = ("VV", "VH", "HH", "HV")

# Protocol metadata recorded with every tile; never used to filter synthetic data.
ROI_METERS = 1280
GSD_METERS = 10
RETRIEVAL_WINDOW_DAYS = 15
MAX_CLOUD_COVER = 0.10


class ConfigurationError(ValueError):
    pass


@dataclass(frozen=True)
class ModalitySpec:
    name: str
    kind: str  # "continuous" | "categorical"
    channels: int  # channel count, or class count for categorical maps
    loss_weight: float = 1.0
    offset: tuple[float, ...] = (0.0,)
    scale: tuple[float, ...] = (1.0,)

    def __post_init__(self):
        if self.kind not in ("continuous", "categorical"):
            raise ConfigurationError(f"modality {self.name}: unknown kind {self.kind!r}")
        if self.kind == "continuous" and self.channels < 1:
            raise ConfigurationError(f"modality {self.name}: needs at least one channel")
        if self.kind == "categorical" and self.channels < 2:
            raise ConfigurationError(f"modality {self.name}: needs at least two classes")
        if self.loss_weight < 0:
            raise ConfigurationError(f"modality {self.name}: negative loss weight")

    @property
    def categorical(self) -> bool:
        return self.kind == "categorical"

    def normalize(self, x: np.ndarray) -> np.ndarray:
        off = np.asarray(self.offset, dtype=np.float64).reshape(-1, 1, 1)
        sc = np.asarray(self.scale, dtype=np.float64).reshape(-1, 1, 1)
        return (x.astype(np.float64) - off) / sc


# Fixed per-channel standardisation constants, measured on the generator's output.
MODALITIES = (
    ModalitySpec("s2", "continuous", 12,
                 offset=(0.13, 0.15, 0.17, 0.17, 0.2, 0.27, 0.3, 0.31, 0.32, 0.11, 0.22, 0.15),
                 scale=(0.21, 0.21, 0.2, 0.21, 0.2, 0.17, 0.17, 0.17, 0.16, 0.07, 0.13, 0.11)),
    ModalitySpec("s1", "continuous", 4, offset=(-8.0, -15.7, -5.9, -16.5), scale=(3.6, 4.2, 3.8, 4.1)),
    ModalitySpec("dem", "continuous", 1, offset=(950.0,), scale=(1000.0,)),
    ModalitySpec("canopy", "continuous", 1, offset=(4.3,), scale=(6.4,)),
    ModalitySpec("dw", "categorical", len(DW_CLASSES)),
    ModalitySpec("esa", "categorical", len(ESA_CLASSES)),
)
MODALITY_BY_NAME = {m.name: m for m in MODALITIES}


@dataclass
class StructuredAttributes:
    dominant_class: int
    dominant_fraction: float
    class_fractions: tuple[float, ...]
    water_fraction: float
    terrain_class: int
    elevation_min: float
    elevation_max: float
    elevation_mean: float
    geo_tags: dict[str, list[str]] = field(default_factory=dict)

    @property
    def dominant_name(self) -> str:
        return DW_CLASSES[self.dominant_class]

    @property
    def terrain_name(self) -> str:
        return GEOMORPHON_FORMS[self.terrain_class]

    @property
    def relief(self) -> float:
        return self.elevation_max - self.elevation_min

    def top_classes(self, n: int = 3) -> list[int]:
        fr = np.asarray(self.class_fractions)
        order = sorted(range(len(fr)), key=lambda k: (-fr[k], k))
        return [k for k in order[:n] if fr[k] > 0]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["class_fractions"] = list(self.class_fractions)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "StructuredAttributes":
        d = dict(d)
        d["class_fractions"] = tuple(d["class_fractions"])
        return cls(**d)


@dataclass
class TileSample:
    tile_id: str
    s2: np.ndarray
    s1: np.ndarray
    dem: np.ndarray
    canopy: np.ndarray
    dw: np.ndarray
    esa: np.ndarray
    anchor_date: dt.date
    latlon: tuple[float, float]
    caption: str = ""
    attributes: StructuredAttributes | None = None
    metadata: dict = field(default_factory=dict)

    RASTERS = ("s2", "s1", "dem", "canopy", "dw", "esa")

    @property
    def geometry(self) -> tuple[int, int]:
        return self.dw.shape[-2], self.dw.shape[-1]

    def raster(self, name: str) -> np.ndarray:
        return getattr(self, name)

    def equals(self, other: "TileSample") -> bool:
        if not isinstance(other, TileSample):
            return False
        for name in self.RASTERS:
            a, b = self.raster(name), other.raster(name)
            if a.dtype != b.dtype or a.shape != b.shape or a.tobytes() != b.tobytes():
                return False
        attrs_a = self.attributes.to_dict() if self.attributes else None
        attrs_b = other.attributes.to_dict() if other.attributes else None
        return (self.tile_id == other.tile_id and self.anchor_date == other.anchor_date
                and tuple(self.latlon) == tuple(other.latlon) and self.caption == other.caption
                and attrs_a == attrs_b and self.metadata == other.metadata)


# ---------------------------------------------------------------------------
# binary container
#
#   magic "EOTILE\x00\x01" | u16 version | u32 header_len | header (UTF-8 JSON)
#   | raster payloads (little-endian, in header table order)
#   | u32 caption_len | caption (UTF-8) | sha256 over everything before it

TILE_MAGIC = b"EOTILE\x00\x01"
TILE_VERSION = 1
_DIGEST = 32


class TileFormatError(Exception):
    pass


class BadMagicError(TileFormatError):
    pass


class UnsupportedVersionError(TileFormatError):
    pass


class ChecksumError(TileFormatError):
    pass


def tile_to_bytes(tile: TileSample) -> bytes:
    table = []
    payloads = []
    for name in TileSample.RASTERS:
        arr = np.ascontiguousarray(tile.raster(name))
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        raw = le.tobytes()
        table.append({"name": name, "dtype": le.dtype.str, "shape": list(arr.shape), "nbytes": len(raw)})
        payloads.append(raw)
    header = {
        "tile_id": tile.tile_id,
        "anchor_date": tile.anchor_date.isoformat(),
        "latlon": [float(tile.latlon[0]), float(tile.latlon[1])],
        "geometry": list(tile.geometry),
        "modalities": table,
        "attributes": tile.attributes.to_dict() if tile.attributes else None,
        "metadata": tile.metadata,
    }
    hdr = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    cap = tile.caption.encode("utf-8")
    body = b"".join([
        TILE_MAGIC, struct.pack("<HI", TILE_VERSION, len(hdr)), hdr, *payloads,
        struct.pack("<I", len(cap)), cap,
    ])
    return body + hashlib.sha256(body).digest()


def tile_from_bytes(blob: bytes) -> TileSample:
    if len(blob) < len(TILE_MAGIC):
        raise ChecksumError("file truncated before magic bytes")
    if blob[:len(TILE_MAGIC)] != TILE_MAGIC:
        raise BadMagicError(f"bad magic {blob[:len(TILE_MAGIC)]!r}")
    off = len(TILE_MAGIC)
    if len(blob) < off + 6 + _DIGEST:
        raise ChecksumError("file truncated inside the preamble")
    version, hdr_len = struct.unpack_from("<HI", blob, off)
    if version != TILE_VERSION:
        raise UnsupportedVersionError(f"container version {version}, expected {TILE_VERSION}")
    body, digest = blob[:-_DIGEST], blob[-_DIGEST:]
    if hashlib.sha256(body).digest() != digest:
        raise ChecksumError("sha256 mismatch (truncated or corrupted file)")
    off += 6
    header = json.loads(body[off:off + hdr_len].decode("utf-8"))
    off += hdr_len
    rasters = {}
    for entry in header["modalities"]:
        n = entry["nbytes"]
        arr = np.frombuffer(body[off:off + n], dtype=np.dtype(entry["dtype"])).reshape(entry["shape"])
        rasters[entry["name"]] = arr.astype(arr.dtype.newbyteorder("="))
        off += n
    (cap_len,) = struct.unpack_from("<I", body, off)
    off += 4
    caption = body[off:off + cap_len].decode("utf-8")
    attrs = header.get("attributes")
    return TileSample(
        tile_id=header["tile_id"],
        anchor_date=dt.date.fromisoformat(header["anchor_date"]),
        latlon=tuple(header["latlon"]),
        caption=caption,
        attributes=StructuredAttributes.from_dict(attrs) if attrs else None,
        metadata=header.get("metadata", {}),
        **rasters,
    )


def _atomic_write(path: Path, data: bytes) -> None:
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def write_tile(tile: TileSample, path) -> Path:
    path = Path(path)
    _atomic_write(path, tile_to_bytes(tile))
    return path


def read_tile(path) -> TileSample:
    return tile_from_bytes(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# dataset index: one tab-separated line per complete tile

INDEX_NAME = "index.tsv"


@dataclass(frozen=True)
class IndexEntry:
    tile_id: str
    path: str
    anchor_date: str
    dominant_class: str
    water_fraction: float

    def to_line(self) -> str:
        return "\t".join([self.tile_id, self.path, self.anchor_date, self.dominant_class,
                          repr(float(self.water_fraction))])

    @classmethod
    def from_line(cls, line: str) -> "IndexEntry":
        parts = line.rstrip("\n").split("\t")
        if len(parts) != 5:
            raise TileFormatError(f"index line has {len(parts)} fields, expected 5: {line!r}")
        return cls(parts[0], parts[1], parts[2], parts[3], float(parts[4]))


def index_entry(tile: TileSample, path: str) -> IndexEntry:
    a = tile.attributes
    return IndexEntry(tile.tile_id, path, tile.anchor_date.isoformat(),
                      DW_CLASSES[a.dominant_class], a.water_fraction)


def write_index(entries, path) -> None:
    _atomic_write(Path(path), "".join(e.to_line() + "\n" for e in entries).encode("utf-8"))


def read_index(path) -> list[IndexEntry]:
    text = Path(path).read_text(encoding="utf-8")
    return [IndexEntry.from_line(l) for l in text.splitlines() if l.strip()]


def load_dataset(index_path) -> list[TileSample]:
    """Read every tile listed in an index; relative paths resolve against the index directory."""
    index_path = Path(index_path)
    if index_path.is_dir():
        index_path = index_path / INDEX_NAME
    root = index_path.parent
    tiles = []
    for e in read_index(index_path):
        p = Path(e.path)
        tiles.append(read_tile(p if p.is_absolute() else root / p))
    return tiles
