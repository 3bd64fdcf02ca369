"""Synthetic aligned multimodal tiles with known cross-modal couplings.

All modalities are rendered from a shared set of latent fields on one pixel
grid, so there is no spatial offset between them. Land cover follows terrain
and moisture, optical reflectance follows land cover and illumination, SAR is
a fixed nonlinear function of the optical bands, and canopy height follows
tree cover and local relief.
"""

from __future__ import annotations

import datetime as dt

import numpy as np
from scipy import ndimage

from .tiles import (
    DW_CLASSES, DW_WATER, ESA_CLASSES, ESA_WATER, GEOMORPHON_FORMS, GSD_METERS, MAX_CLOUD_COVER,
    RETRIEVAL_WINDOW_DAYS, ROI_METERS, ConfigurationError, StructuredAttributes, TileSample,
)

DEFAULT_PATCH = 4
DEFAULT_GEOMETRY = (128, 128)
ANCHOR_YEARS = (2018, 2019, 2020, 2021)
ANCHOR_DAY = 15

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_MASK64 = 0xFFFFFFFFFFFFFFFF


def fnv1a64(text: str) -> int:
    h = _FNV_OFFSET
    for byte in text.encode("utf-8"):
        h ^= byte
        h = (h * _FNV_PRIME) & _MASK64
    return h


def temporal_anchor(tile_id: str) -> dt.date:
    if not tile_id:
        raise ValueError("tile_id must be non-empty")
    rng = np.random.default_rng(fnv1a64(tile_id))
    year = ANCHOR_YEARS[int(rng.integers(len(ANCHOR_YEARS)))]
    month = int(rng.integers(1, 13))
    return dt.date(year, month, ANCHOR_DAY)


# ---------------------------------------------------------------------------
# grounding signals

# (#lower, #higher) -> geomorphon form index; rows are the count of lower
# directions, columns the count of higher ones (Jasiewicz & Stepinski lookup).
_FORM_CODES = {
    0: [0, 0, 0, 7, 7, 8, 8, 8, 9],
    1: [0, 0, 7, 7, 7, 8, 8, 8],
    2: [0, 3, 5, 5, 6, 6, 8],
    3: [3, 3, 5, 5, 5, 6],
    4: [3, 3, 4, 5, 5],
    5: [2, 2, 4, 4],
    6: [2, 2, 2],
    7: [2, 2],
    8: [1],
}
GEOMORPHON_TABLE = np.full((9, 9), -1, dtype=np.int8)
for _lower, _row in _FORM_CODES.items():
    GEOMORPHON_TABLE[_lower, :len(_row)] = _row

COMPASS = ((-1, 0), (-1, 1), (0, 1), (1, 1), (1, 0), (1, -1), (0, -1), (-1, -1))


def ternary_counts(dem: np.ndarray, lookup_radius: int, flat_threshold_deg: float = 1.0):
    """Per-pixel counts of (lower, higher) compass directions.

    Elevations are rescaled to unit relief and horizontal distances to units of
    the lookup radius, so the flatness threshold is a relative-relief angle and
    the result does not change under dem -> a*dem + b with a > 0.
    """
    dem = np.asarray(dem, dtype=np.float64)
    if dem.ndim != 2:
        raise ConfigurationError(f"dem must be 2-D, got shape {dem.shape}")
    h, w = dem.shape
    if lookup_radius < 1 or lookup_radius > min(h, w) // 2:
        raise ConfigurationError(f"lookup_radius {lookup_radius} outside [1, {min(h, w) // 2}] for a {h}x{w} raster")
    lower = np.zeros((h, w), dtype=np.int64)
    higher = np.zeros((h, w), dtype=np.int64)
    relief = dem.max() - dem.min()
    if relief <= 0:
        return lower, higher
    z = (dem - dem.min()) / relief
    L = lookup_radius
    padded = np.pad(z, L, mode="constant", constant_values=np.nan)
    for dy, dx in COMPASS:
        step = np.hypot(dy, dx) / L
        top = np.full((h, w), -np.inf)
        bottom = np.full((h, w), np.inf)
        for k in range(1, L + 1):
            nb = padded[L + k * dy:L + k * dy + h, L + k * dx:L + k * dx + w]
            ang = np.degrees(np.arctan((nb - z) / (k * step)))
            top = np.fmax(top, ang)
            bottom = np.fmin(bottom, ang)
        valid = np.isfinite(top)
        balance = np.zeros((h, w))
        balance[valid] = top[valid] + bottom[valid]
        higher += balance > flat_threshold_deg
        lower += balance < -flat_threshold_deg
    return lower, higher


def geomorphon_classify(dem: np.ndarray, lookup_radius: int = 6, flat_threshold_deg: float = 1.0) -> np.ndarray:
    """Map each pixel to one of the ten geomorphon forms (indices into GEOMORPHON_FORMS)."""
    lower, higher = ternary_counts(dem, lookup_radius, flat_threshold_deg)
    return GEOMORPHON_TABLE[lower, higher].astype(np.uint8)


def water_consensus(dw: np.ndarray, esa: np.ndarray) -> tuple[np.ndarray, float]:
    dw, esa = np.asarray(dw), np.asarray(esa)
    if dw.shape != esa.shape:
        raise ValueError(f"land-cover maps differ in shape: {dw.shape} vs {esa.shape}")
    mask = (dw == DW_WATER) & (esa == ESA_WATER)
    return mask, float(mask.sum()) / mask.size


# ---------------------------------------------------------------------------
# synthetic tile generator

# mean reflectance per Dynamic World class, bands B1..B12
_SIGNATURES = np.array([
    [0.08, 0.07, 0.06, 0.04, 0.03, 0.02, 0.02, 0.02, 0.02, 0.01, 0.01, 0.01],  # water
    [0.03, 0.04, 0.06, 0.03, 0.08, 0.25, 0.30, 0.32, 0.33, 0.10, 0.15, 0.07],  # trees
    [0.05, 0.06, 0.09, 0.07, 0.14, 0.25, 0.28, 0.30, 0.31, 0.10, 0.25, 0.14],  # grass
    [0.04, 0.05, 0.07, 0.05, 0.09, 0.16, 0.19, 0.20, 0.21, 0.06, 0.10, 0.05],  # flooded vegetation
    [0.05, 0.07, 0.10, 0.09, 0.16, 0.30, 0.35, 0.38, 0.39, 0.12, 0.27, 0.16],  # crops
    [0.06, 0.08, 0.11, 0.12, 0.16, 0.21, 0.23, 0.25, 0.26, 0.09, 0.30, 0.20],  # shrub and scrub
    [0.10, 0.12, 0.14, 0.16, 0.18, 0.20, 0.21, 0.22, 0.22, 0.08, 0.26, 0.22],  # built
    [0.12, 0.15, 0.20, 0.26, 0.29, 0.31, 0.33, 0.34, 0.35, 0.12, 0.40, 0.33],  # bare
    [0.80, 0.82, 0.80, 0.78, 0.75, 0.72, 0.70, 0.68, 0.66, 0.30, 0.08, 0.06],  # snow and ice
])

# Dynamic World class -> ESA WorldCover class
_DW_TO_ESA = np.array([
    ESA_CLASSES.index("permanent_water"), ESA_CLASSES.index("tree_cover"),
    ESA_CLASSES.index("grassland"), ESA_CLASSES.index("herbaceous_wetland"),
    ESA_CLASSES.index("cropland"), ESA_CLASSES.index("shrubland"),
    ESA_CLASSES.index("built_up"), ESA_CLASSES.index("bare_sparse"),
    ESA_CLASSES.index("snow_ice"),
])

# base elevation range (m) for each tile regime
_REGIME_ELEVATION = {
    0: (0, 300), 1: (100, 1800), 2: (100, 1500), 3: (0, 200), 4: (0, 600),
    5: (200, 1800), 6: (0, 500), 7: (300, 2500), 8: (2600, 4200),
}

CANOPY_BY_CLASS = np.array([0.0, 14.0, 0.4, 1.2, 0.8, 2.0, 0.0, 0.0, 0.0])
CANOPY_RELIEF_GAIN = 1.0  # metres of canopy per unit of standardised pixel-scale relief


def _field(rng: np.random.Generator, shape, sigma: float) -> np.ndarray:
    f = ndimage.gaussian_filter(rng.standard_normal(shape), sigma, mode="wrap")
    return (f - f.mean()) / (f.std() + 1e-12)


def _dominant_fraction(cls_map: np.ndarray, n: int) -> np.ndarray:
    return np.bincount(cls_map.reshape(-1), minlength=n) / cls_map.size


def compute_attributes(dem, dw, esa, latlon, lookup_radius: int = 6) -> StructuredAttributes:
    fr = _dominant_fraction(dw, len(DW_CLASSES))
    dom = int(np.argmax(fr))
    _, water = water_consensus(dw, esa)
    forms = geomorphon_classify(dem[0] if dem.ndim == 3 else dem, lookup_radius)
    terrain = int(np.argmax(np.bincount(forms.reshape(-1), minlength=len(GEOMORPHON_FORMS))))
    elev = dem.astype(np.float64)
    attrs = StructuredAttributes(
        dominant_class=dom,
        dominant_fraction=float(fr[dom]),
        class_fractions=tuple(float(x) for x in fr),
        water_fraction=water,
        terrain_class=terrain,
        elevation_min=float(elev.min()),
        elevation_max=float(elev.max()),
        elevation_mean=float(elev.mean()),
    )
    attrs.geo_tags = geo_tags(dw, attrs, latlon)
    return attrs


_CENTER_TAGS = ("natural=water", "natural=wood", "landuse=meadow", "natural=wetland", "landuse=farmland",
                "natural=scrub", "landuse=residential", "natural=bare_rock", "natural=glacier")


def geo_tags(dw: np.ndarray, attrs: StructuredAttributes, latlon) -> dict[str, list[str]]:
    """Synthetic OSM-style tags at three levels: center point, surroundings, area."""
    h, w = dw.shape
    center = [_CENTER_TAGS[int(dw[h // 2, w // 2])]]
    fr = np.asarray(attrs.class_fractions)
    around = [k for k in np.argsort(-fr, kind="stable") if fr[k] >= 0.05 and _CENTER_TAGS[k] not in center]
    surrounding = [_CENTER_TAGS[k] for k in around[:3]]
    if attrs.terrain_name in ("peak", "ridge", "valley"):
        surrounding.append(f"natural={attrs.terrain_name}")
    lat = abs(latlon[0])
    zone = "tropical" if lat < 23.5 else "temperate" if lat < 50 else "boreal" if lat < 66.5 else "polar"
    area = [f"climate={zone}", f"region={elevation_band(attrs.elevation_mean)}"]
    return {"center": center, "surrounding": surrounding, "area": area}


def elevation_band(mean_elevation: float) -> str:
    if mean_elevation < 300:
        return "lowland"
    if mean_elevation < 1500:
        return "upland"
    if mean_elevation < 3000:
        return "highland"
    return "alpine"


def relief_band(relief: float) -> str:
    if relief < 30:
        return "gentle"
    if relief < 300:
        return "hilly"
    return "mountainous"


def generate_tile(tile_id: str, geometry: tuple[int, int] = DEFAULT_GEOMETRY, seed: int = 0,
                  patch: int = DEFAULT_PATCH, lookup_radius: int | None = None,
                  caption: bool = True) -> TileSample:
    h, w = geometry
    if h < 16 or w < 16:
        raise ConfigurationError(f"tile geometry {h}x{w} below the 16x16 minimum")
    if h % patch or w % patch:
        raise ConfigurationError(f"tile geometry {h}x{w} not divisible by patch size {patch}")
    if lookup_radius is None:
        lookup_radius = max(2, min(h, w) // 8)
    rng = np.random.default_rng([seed & _MASK64, fnv1a64(tile_id)])
    shape = (h, w)
    s = min(h, w)

    regime = int(rng.integers(len(DW_CLASSES)))
    lat = float(rng.uniform(-55, 70))
    if regime == 8:
        lat = float(np.sign(lat) * rng.uniform(35, 70)) if lat != 0 else 45.0
    lon = float(rng.uniform(-180, 180))

    f_large = _field(rng, shape, s / 5)
    f_small = _field(rng, shape, s / 18)
    f_moist = _field(rng, shape, s / 7)
    f_human = _field(rng, shape, s / 9)
    f_veg = _field(rng, shape, s / 10)
    f_noise = _field(rng, shape, 1.0)

    lo, hi = _REGIME_ELEVATION[regime]
    base = rng.uniform(lo, hi)
    amplitude = float(np.exp(rng.uniform(np.log(5.0), np.log(600.0))))
    terrain = 0.8 * f_large + 0.4 * f_small
    plain_odds = 0.5 if regime in (0, 3, 4, 6) else 0.2
    if rng.uniform() < plain_odds:
        # plains: broad flats with isolated rises
        terrain = np.sign(terrain) * np.maximum(np.abs(terrain) - 0.7, 0.0) + 0.002 * f_small
    dem = base + amplitude * (terrain + 0.005 * f_noise)  # faint micro-relief
    dem = dem - min(0.0, dem.min())
    rel = terrain / (terrain.std() + 1e-12)
    moist = f_moist - 0.6 * rel + rng.normal(0.0, 0.5)

    scores = np.stack([
        1.6 * moist - 1.2 * rel - 2.0,                # water
        1.0 * f_veg + 0.4 * moist,                    # trees
        -0.6 * f_veg + 0.2 * f_noise,                 # grass
        1.2 * moist - 0.8 * rel - 0.8 + 0.3 * f_veg,  # flooded vegetation
        0.9 * f_human - 0.3 * np.abs(rel),            # crops
        -0.5 * moist + 0.4 * f_veg - 0.2,             # shrub and scrub
        1.4 * f_human - 0.9,                          # built
        -0.9 * moist - 0.6 * f_veg - 0.3,             # bare
        0.0025 * (dem - 3000.0),                      # snow and ice
    ])
    scores += rng.normal(0.0, 0.35, size=(len(DW_CLASSES), 1, 1))
    scores[regime] += 1.8
    scores += 0.15 * rng.standard_normal(scores.shape)
    dw = np.argmax(scores, axis=0).astype(np.uint8)

    # ESA WorldCover mostly agrees with Dynamic World; it disagrees in a few
    # patches (runner-up class) and refines trees/bare by setting.
    esa = _DW_TO_ESA[dw].astype(np.uint8)
    runner_up = np.argsort(scores, axis=0)[-2]
    disagree = _field(rng, shape, 1.5) > 1.75
    esa[disagree] = _DW_TO_ESA[runner_up[disagree]]
    esa[(dw == 1) & (moist > 1.0) & (dem < 60) & (abs(lat) < 25)] = ESA_CLASSES.index("mangroves")
    esa[(dw == 7) & ((dem > 3000) | (abs(lat) > 60))] = ESA_CLASSES.index("moss_lichen")

    anchor = temporal_anchor(tile_id)
    # seasonal vegetation vigour, opposite phase across hemispheres
    phase = np.cos(2 * np.pi * (anchor.month - 7) / 12.0) * (1 if lat >= 0 else -1)
    vigour = 1.0 + 0.15 * phase

    # pixel-scale relief shared with the DEM keeps the two rasters co-registered
    local = dem - ndimage.gaussian_filter(dem, 1.0, mode="nearest")
    local = local / (local.std() + 1e-9)
    canopy = CANOPY_BY_CLASS[dw] * (1.0 + 0.25 * f_veg + 0.2 * local) + CANOPY_RELIEF_GAIN * (1.0 + local)
    canopy = np.clip(canopy, 0.0, None).astype(np.float32)

    gy, gx = np.gradient(dem, GSD_METERS)
    hill = np.clip(1.0 + 0.5 * (-gx * 0.6 - gy * 0.8) / np.sqrt(1 + gx * gx + gy * gy), 0.7, 1.3)
    sig = _SIGNATURES[dw]  # (h, w, 12)
    sig = np.moveaxis(sig, -1, 0)
    vegetated = np.isin(dw, (1, 2, 3, 4, 5))
    nir = np.zeros((12, 1, 1))
    nir[5:9] = 1.0
    s2 = sig * hill
    s2 = s2 * np.where(vegetated, 1.0 + nir * (vigour - 1.0 + 0.08 * f_veg), 1.0)
    s2 = s2 * (1.0 - 0.05 * np.tanh(moist))
    s2 = s2 + rng.normal(0.0, 0.01, size=s2.shape)
    s2 = np.clip(s2, 0.0, 1.0).astype(np.float32)

    s1 = sar_from_optical(s2.astype(np.float64))
    s1 = s1 + rng.normal(0.0, 0.6, size=s1.shape)
    s1 = np.clip(s1, -30.0, 5.0).astype(np.float32)

    dem = dem.astype(np.float32)[None]
    attrs = compute_attributes(dem, dw, esa, (lat, lon), lookup_radius)
    tile = TileSample(
        tile_id=tile_id, s2=s2, s1=s1, dem=dem, canopy=canopy[None], dw=dw, esa=esa,
        anchor_date=anchor, latlon=(lat, lon), attributes=attrs,
        metadata={
            "seed": int(seed), "patch": int(patch), "lookup_radius": int(lookup_radius),
            "roi_m": ROI_METERS, "gsd_m": GSD_METERS, "window_days": RETRIEVAL_WINDOW_DAYS,
            "max_cloud_cover": MAX_CLOUD_COVER,
        },
    )
    if caption:
        from .captions import caption_tile
        tile.caption = caption_tile(tile).final_caption
    return tile


def sar_from_optical(s2: np.ndarray) -> np.ndarray:
    """Backscatter-like dB channels (VV, VH, HH, HV) as a fixed nonlinear function of S2."""
    red, green, nir, swir = s2[3], s2[2], s2[7], s2[10]
    ndvi = (nir - red) / (nir + red + 1e-6)
    ndwi = (green - nir) / (green + nir + 1e-6)
    bright = s2.mean(axis=0)
    vv = -11.0 + 5.0 * ndvi - 12.0 * np.maximum(ndwi, 0.0) + 6.0 * bright + 8.0 * swir ** 2
    vh = vv - 6.5 - 2.5 * (1.0 - ndvi) ** 2
    hh = vv + 1.5 + 3.0 * bright
    hv = vh - 1.0 + 2.0 * ndvi * bright
    return np.stack([vv, vh, hh, hv])
