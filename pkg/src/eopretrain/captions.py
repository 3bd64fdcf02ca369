"""Rule-based captioning pipeline: orchestrate signals, generate candidates,
rank them against measured attributes, then verify and revise the winner.

Captions are built from a closed vocabulary. Every factual phrase the
templates can emit is listed in ``LEXICON`` together with the claim it makes,
which lets the evaluator and the verifier check claims exactly.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field

from .synth import elevation_band, relief_band
from .tiles import DW_CLASSES, GEOMORPHON_FORMS, TileSample

WATER_CLAIM_THRESHOLD = 0.02
DEFAULT_K = 4


class CaptionError(Exception):
    pass


class IncompleteSignalError(CaptionError):
    pass


class DegenerateCaptionError(CaptionError):
    pass


class CaptionConfigError(CaptionError, ValueError):
    pass


LANDCOVER_NOUNS = {
    0: "open water", 1: "forest", 2: "grassland", 3: "wetland", 4: "cropland",
    5: "shrubland", 6: "settlement", 7: "barren ground", 8: "snowfield",
}
TERRAIN_PHRASES = {
    0: "flat terrain", 1: "a peak", 2: "a ridge", 3: "a shoulder", 4: "a spur",
    5: "sloping terrain", 6: "a hollow", 7: "a footslope", 8: "a valley", 9: "a depression",
}
RELIEF_PHRASES = {"gentle": "gentle relief", "hilly": "hills", "mountainous": "mountains"}
ELEVATION_WORDS = {"lowland": "low-lying", "upland": "upland", "highland": "highland", "alpine": "alpine"}
ZONE_WORDS = ("tropical", "temperate", "boreal", "polar")

# claim = (kind, value)
_LEX: dict[str, list[tuple[str, object]]] = {}
for _cid, _noun in LANDCOVER_NOUNS.items():
    _LEX[_noun] = [("landcover", _cid)]
_LEX["open water"].append(("water", True))
for _tid, _phrase in TERRAIN_PHRASES.items():
    _LEX[_phrase] = [("terrain", _tid)]
for _band, _phrase in RELIEF_PHRASES.items():
    _LEX[_phrase] = [("relief", _band)]
_LEX["hilly"] = [("relief", "hilly")]
_LEX["mountainous"] = [("relief", "mountainous")]
for _band, _word in ELEVATION_WORDS.items():
    _LEX[_word] = [("elevation", _band)]
_LEX["lowland"] = [("elevation", "lowland")]
for _phrase in ("a lake", "lakes", "a river", "ponds", "small ponds", "surface water", "a reservoir", "streams"):
    _LEX[_phrase] = [("water", True)]
for _phrase in ("no surface water", "dry land"):
    _LEX[_phrase] = [("water", False)]
LEXICON = {tuple(k.split()): v for k, v in _LEX.items()}
_MAX_PHRASE = max(len(k) for k in LEXICON)

CLAIM_WEIGHTS = {"landcover": 2.0, "water": 1.5, "terrain": 1.0, "relief": 1.0, "elevation": 1.0}
RULE_IDS = {"water": "R1-water", "terrain": "R2-terrain", "landcover": "R3-landcover",
            "elevation": "R4-elevation", "relief": "R5-relief"}

_TOKEN_RE = re.compile(r"[a-z]+(?:-[a-z]+)*|[0-9]+|[.,;]")


def tokenize(text: str) -> list[str]:
    return _TOKEN_RE.findall(text.lower())


def detokenize(tokens: list[str]) -> str:
    out = ""
    for t in tokens:
        if t in ".,;":
            out += t
        else:
            out += (" " if out else "") + t
    return out


# ---------------------------------------------------------------------------
# orchestrator

@dataclass(frozen=True)
class CaptionSignals:
    dominant: int
    dominant_fraction: float
    top3: tuple[int, ...]
    class_fractions: tuple[float, ...]
    water_fraction: float
    terrain: int
    relief: str
    elevation: str
    elevation_stats: tuple[float, float, float]
    center_tags: tuple[str, ...]
    surrounding_tags: tuple[str, ...]
    area_tags: tuple[str, ...]

    @property
    def water_present(self) -> bool:
        return self.water_fraction >= WATER_CLAIM_THRESHOLD

    def records(self) -> list[tuple]:
        recs = [("dominant", LANDCOVER_NOUNS[self.dominant], self.dominant_fraction)]
        recs += [("top", LANDCOVER_NOUNS[c], self.class_fractions[c]) for c in self.top3]
        if self.water_present:
            recs.append(("water", "surface water", self.water_fraction))
        else:
            recs.append(("water", "no surface water", self.water_fraction))
        recs.append(("terrain", GEOMORPHON_FORMS[self.terrain]))
        recs.append(("relief", self.relief))
        recs.append(("elevation", self.elevation, *self.elevation_stats))
        recs += [("tag_center", t) for t in self.center_tags]
        recs += [("tag_surrounding", t) for t in self.surrounding_tags]
        recs += [("tag_area", t) for t in self.area_tags]
        return recs


def relief_descriptor(terrain: int, relief: float) -> str:
    return "gentle" if GEOMORPHON_FORMS[terrain] == "flat" else relief_band(relief)


def orchestrate(tile: TileSample) -> CaptionSignals:
    a = tile.attributes
    if a is None:
        raise IncompleteSignalError(f"tile {tile.tile_id} has no attributes")
    tags = a.geo_tags or {}
    missing = [k for k in ("center", "surrounding", "area") if k not in tags]
    if missing or not a.class_fractions:
        raise IncompleteSignalError(f"tile {tile.tile_id} is missing signals: {missing or ['class_fractions']}")
    return CaptionSignals(
        dominant=a.dominant_class,
        dominant_fraction=a.dominant_fraction,
        top3=tuple(a.top_classes(3)),
        class_fractions=tuple(a.class_fractions),
        water_fraction=a.water_fraction,
        terrain=a.terrain_class,
        relief=relief_descriptor(a.terrain_class, a.relief),
        elevation=elevation_band(a.elevation_mean),
        elevation_stats=(a.elevation_min, a.elevation_max, a.elevation_mean),
        center_tags=tuple(tags["center"]),
        surrounding_tags=tuple(tags["surrounding"]),
        area_tags=tuple(tags["area"]),
    )


# ---------------------------------------------------------------------------
# captioner

_TAG_CLASS = {
    "natural=water": 0, "natural=wood": 1, "landuse=meadow": 2, "natural=wetland": 3,
    "landuse=farmland": 4, "natural=scrub": 5, "landuse=residential": 6,
    "natural=bare_rock": 7, "natural=glacier": 8,
}


def _join(words: list[str]) -> str:
    if len(words) <= 1:
        return "".join(words)
    return ", ".join(words[:-1]) + " and " + words[-1]


def _lead(fraction: float) -> str:
    return "predominantly" if fraction >= 0.6 else "mostly" if fraction >= 0.4 else "a mix of"


def _recipe_landcover(s: CaptionSignals) -> str:
    dom = LANDCOVER_NOUNS[s.dominant]
    others = [LANDCOVER_NOUNS[c] for c in s.top3 if c != s.dominant and s.class_fractions[c] >= 0.05]
    tail = f"with {_join(others)}" if others else "with little else"
    return (f"{_lead(s.dominant_fraction)} {dom} {tail} on {ELEVATION_WORDS[s.elevation]} "
            f"{TERRAIN_PHRASES[s.terrain]}.")


def _recipe_terrain(s: CaptionSignals) -> str:
    lead = "among" if s.relief != "gentle" else "with"
    return (f"{TERRAIN_PHRASES[s.terrain]} {lead} {RELIEF_PHRASES[s.relief]} in "
            f"{ELEVATION_WORDS[s.elevation]} country, covered by {LANDCOVER_NOUNS[s.dominant]}.")


def _recipe_hydrology(s: CaptionSignals) -> str:
    # reads the single-product water share, as a captioner would from the imagery
    dw_water = s.class_fractions[0]
    if dw_water >= 0.10:
        water = "a lake"
    elif dw_water >= WATER_CLAIM_THRESHOLD:
        water = "small ponds"
    else:
        water = "no surface water"
    return f"{LANDCOVER_NOUNS[s.dominant]} landscape with {water}, on {TERRAIN_PHRASES[s.terrain]}."


def _recipe_tags(s: CaptionSignals) -> str:
    center = [_TAG_CLASS[t] for t in s.center_tags if t in _TAG_CLASS]
    around = [_TAG_CLASS[t] for t in s.surrounding_tags if t in _TAG_CLASS]
    around = [c for c in around if c != s.dominant and c not in center[:1]]
    zone = next((t.split("=")[1] for t in s.area_tags if t.startswith("climate=")), "temperate")
    parts = [f"{LANDCOVER_NOUNS[s.dominant]}"]
    if center and center[0] != s.dominant:
        parts.append(f"around {LANDCOVER_NOUNS[center[0]]}")
    if around:
        parts.append(f"near {_join([LANDCOVER_NOUNS[c] for c in around])}")
    return ", ".join(parts) + f", in a {zone} {ELEVATION_WORDS[s.elevation]} region."


def _recipe_elevation(s: CaptionSignals) -> str:
    return (f"{ELEVATION_WORDS[s.elevation]} {LANDCOVER_NOUNS[s.dominant]} with "
            f"{RELIEF_PHRASES[s.relief]} and {TERRAIN_PHRASES[s.terrain]}.")


RECIPES = (
    ("landcover-led", _recipe_landcover),
    ("terrain-led", _recipe_terrain),
    ("hydrology-led", _recipe_hydrology),
    ("tag-led", _recipe_tags),
    ("elevation-led", _recipe_elevation),
)


def generate_candidates(signals: CaptionSignals, k: int = DEFAULT_K) -> list[tuple[str, str]]:
    if k < 2:
        raise CaptionConfigError(f"need at least 2 candidates, got k={k}")
    if k > len(RECIPES):
        raise CaptionConfigError(f"k={k} exceeds the {len(RECIPES)} available recipes")
    return [(fn(signals), rid) for rid, fn in RECIPES[:k]]


# ---------------------------------------------------------------------------
# claims, evaluator and verifier

@dataclass(frozen=True)
class Claim:
    start: int
    end: int
    phrase: str
    kind: str
    value: object


def extract_claims(tokens: list[str]) -> list[Claim]:
    """Greedy longest-match scan of the lexicon over a token list."""
    claims = []
    i = 0
    while i < len(tokens):
        for n in range(min(_MAX_PHRASE, len(tokens) - i), 0, -1):
            key = tuple(tokens[i:i + n])
            if key in LEXICON:
                for kind, value in LEXICON[key]:
                    claims.append(Claim(i, i + n, " ".join(key), kind, value))
                i += n
                break
        else:
            i += 1
    return claims


def claim_holds(claim_kind: str, value, signals: CaptionSignals) -> bool:
    if claim_kind == "landcover":
        return value in signals.top3
    if claim_kind == "water":
        return bool(value) == signals.water_present
    if claim_kind == "terrain":
        return value == signals.terrain
    if claim_kind == "relief":
        return value == signals.relief
    if claim_kind == "elevation":
        return value == signals.elevation
    raise ValueError(f"unknown claim kind {claim_kind!r}")


def _evidence(kind: str, s: CaptionSignals) -> str:
    if kind == "landcover":
        return "top-3 classes: " + ", ".join(DW_CLASSES[c] for c in s.top3)
    if kind == "water":
        return f"water_fraction={s.water_fraction:.4f} (threshold {WATER_CLAIM_THRESHOLD})"
    if kind == "terrain":
        return f"geomorphon={GEOMORPHON_FORMS[s.terrain]}"
    if kind == "relief":
        return f"relief={s.elevation_stats[1] - s.elevation_stats[0]:.1f} m ({s.relief})"
    return f"mean elevation={s.elevation_stats[2]:.1f} m ({s.elevation})"


def score_caption(caption: str, signals) -> float:
    signals = _signals(signals)
    score = 0.0
    for c in extract_claims(tokenize(caption)):
        w = CLAIM_WEIGHTS[c.kind]
        score += w if claim_holds(c.kind, c.value, signals) else -w
    return score


def rank_candidates(tile, candidates) -> tuple[list[float], int]:
    signals = _signals(tile)
    texts = [c[0] if isinstance(c, tuple) else c for c in candidates]
    if not texts:
        raise CaptionError("no candidate captions to rank")
    scores = [score_caption(t, signals) for t in texts]
    best = max(range(len(scores)), key=lambda i: (scores[i], -i))
    return scores, best


def _replacement(kind: str, s: CaptionSignals) -> str | None:
    if kind == "water":
        return "surface water" if s.water_present else "dry land"
    if kind == "terrain":
        return TERRAIN_PHRASES[s.terrain]
    if kind == "relief":
        return RELIEF_PHRASES[s.relief]
    if kind == "elevation":
        return ELEVATION_WORDS[s.elevation]
    return None


_CONNECTORS = {"and", "with", "near", "around", "by"}
_PUNCT = {".", ",", ";"}


def _tidy(tokens: list[str]) -> list[str]:
    """Drop connectors and punctuation left dangling by a removal."""
    changed = True
    while changed:
        changed = False
        out = []
        for t in tokens:
            if out and t in _PUNCT and (out[-1] in _CONNECTORS or out[-1] in _PUNCT):
                out.pop()
                changed = True
            elif out and t == "and" and out[-1] in _CONNECTORS:
                changed = True
                continue
            out.append(t)
        while out and out[0] in _PUNCT:
            out.pop(0)
            changed = True
        if out and out[-1] in _CONNECTORS:
            out.pop()
            changed = True
        tokens = out
    return tokens


def _signals(tile_or_signals) -> CaptionSignals:
    if isinstance(tile_or_signals, CaptionSignals):
        return tile_or_signals
    return orchestrate(tile_or_signals)


def find_conflicts(caption: str, signals) -> list[tuple[str, str, str]]:
    signals = _signals(signals)
    out = []
    for c in extract_claims(tokenize(caption)):
        if not claim_holds(c.kind, c.value, signals):
            out.append((c.phrase, _evidence(c.kind, signals), RULE_IDS[c.kind]))
    return out


def verify_and_revise(tile, caption: str, max_rounds: int = 4):
    """Return (final caption, conflicts found in the input). ``tile`` may be a
    TileSample or its precomputed CaptionSignals."""
    signals = _signals(tile)
    if not caption or not caption.strip():
        raise DegenerateCaptionError("empty caption")
    conflicts = find_conflicts(caption, signals)
    if not conflicts:
        return caption, []
    tokens = tokenize(caption)
    for _ in range(max_rounds):
        claims = extract_claims(tokens)
        bad = [c for c in claims if not claim_holds(c.kind, c.value, signals)]
        if not bad:
            break
        good_cover = {c.value for c in claims if c.kind == "landcover" and claim_holds(c.kind, c.value, signals)}
        # edit right-to-left so earlier spans keep their offsets
        spans = {}
        for c in bad:
            spans.setdefault((c.start, c.end), []).append(c)
        for (start, end), cs in sorted(spans.items(), reverse=True):
            kinds = {c.kind for c in cs}
            if "landcover" in kinds:
                new = None if good_cover else LANDCOVER_NOUNS[signals.dominant]
                good_cover.add(signals.dominant)
            else:
                new = _replacement(cs[0].kind, signals)
            tokens[start:end] = new.split() if new else []
        tokens = _tidy(tokens)
    revised = detokenize(tokens)
    if not any(t.isalpha() for t in tokens) or find_conflicts(revised, signals):
        raise DegenerateCaptionError(f"caption could not be revised: {caption!r}")
    if not revised.endswith("."):
        revised += "."
    return revised, conflicts


@dataclass
class CaptionAudit:
    tile_id: str
    candidates: list[tuple[str, str]]
    scores: list[float]
    best_index: int
    conflicts: list[tuple[str, str, str]]
    final_caption: str
    revised: bool
    fallback: bool = False
    signals: list[tuple] = field(default_factory=list)

    def to_record(self) -> str:
        return json.dumps({
            "tile_id": self.tile_id,
            "candidates": [{"text": t, "recipe": r, "score": s}
                           for (t, r), s in zip(self.candidates, self.scores)],
            "best_index": self.best_index,
            "conflicts": [{"claim": c, "evidence": e, "rule": r} for c, e, r in self.conflicts],
            "final_caption": self.final_caption,
            "revised": self.revised,
            "fallback": self.fallback,
        }, sort_keys=True)


def caption_tile(tile: TileSample, k: int = DEFAULT_K) -> CaptionAudit:
    signals = orchestrate(tile)
    candidates = generate_candidates(signals, k)
    scores, best = rank_candidates(signals, candidates)
    fallback = False
    try:
        final, conflicts = verify_and_revise(signals, candidates[best][0])
    except DegenerateCaptionError:
        fallback = True
        final, conflicts = _recipe_landcover(signals), []
    return CaptionAudit(tile.tile_id, candidates, scores, best, conflicts, final,
                        revised=final != candidates[best][0], fallback=fallback,
                        signals=signals.records())


# ---------------------------------------------------------------------------
# contradiction injection (verifier test harness)

def inject_contradiction(tile, caption: str, variant: int) -> str:
    """Append exactly one claim that contradicts the tile's measured attributes."""
    signals = _signals(tile)
    body = caption.rstrip(". ")
    variant %= 5
    if variant == 0:
        clause = "with no surface water" if signals.water_present else "with a lake"
    elif variant == 1:
        wrong = next(t for t in TERRAIN_PHRASES if t != signals.terrain)
        clause = f"on {TERRAIN_PHRASES[wrong]}"
    elif variant == 2:
        wrong = next(b for b in ELEVATION_WORDS if b != signals.elevation)
        clause = f"in {ELEVATION_WORDS[wrong]} country"
    elif variant == 3:
        wrong = next(b for b in RELIEF_PHRASES if b != signals.relief)
        clause = f"among {RELIEF_PHRASES[wrong]}"
    else:
        wrong = next(c for c in LANDCOVER_NOUNS if c not in signals.top3 and c != 0)
        clause = f"and {LANDCOVER_NOUNS[wrong]}"
    return f"{body}, {clause}."


# ---------------------------------------------------------------------------
# vocabulary for the text encoder

SPECIALS = ("<pad>", "<bos>", "<eos>", "<unk>")


def _vocabulary() -> tuple[str, ...]:
    words = set()
    phrases = list(_LEX) + list(ZONE_WORDS) + [
        "predominantly", "mostly", "a mix of", "with little else", "on", "with", "and", "among", "in",
        "country", "covered by", "landscape", "around", "near", "a", "region", ".", ",", ";",
    ]
    for p in phrases:
        words.update(tokenize(p))
    return SPECIALS + tuple(sorted(words))


VOCAB = _vocabulary()
TOKEN_IDS = {w: i for i, w in enumerate(VOCAB)}
PAD, BOS, EOS, UNK = range(4)


def encode_text(caption: str, max_len: int = 40) -> list[int]:
    ids = [BOS] + [TOKEN_IDS.get(t, UNK) for t in tokenize(caption)][:max_len - 2] + [EOS]
    return ids + [PAD] * (max_len - len(ids))
