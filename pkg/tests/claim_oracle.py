"""Independent claim scoring for caption tests, built from the phrase tables and
raw tile attributes rather than from the verifier's own claim extractor."""

import re

from eopretrain.captions import ELEVATION_WORDS, LANDCOVER_NOUNS, RELIEF_PHRASES, TERRAIN_PHRASES
from eopretrain.synth import elevation_band, relief_band
from eopretrain.tiles import GEOMORPHON_FORMS

# phrase -> list of (kind, value) the phrase asserts
PHRASES = {**{n: [("landcover", c)] for c, n in LANDCOVER_NOUNS.items()},
           **{p: [("terrain", t)] for t, p in TERRAIN_PHRASES.items()},
           **{p: [("relief", b)] for b, p in RELIEF_PHRASES.items()},
           **{w: [("elevation", b)] for b, w in ELEVATION_WORDS.items()},
           "a lake": [("water", True)], "dry land": [("water", False)]}
PHRASES["open water"] = [("landcover", 0), ("water", True)]
PHRASES.update({"hilly": [("relief", "hilly")], "mountainous": [("relief", "mountainous")],
                "lowland": [("elevation", "lowland")], "no surface water": [("water", False)]})
for _p in ("lakes", "a river", "ponds", "small ponds", "surface water", "a reservoir", "streams"):
    PHRASES[_p] = [("water", True)]
WEIGHT = {"landcover": 2.0, "water": 1.5, "terrain": 1.0, "relief": 1.0, "elevation": 1.0}


def oracle_score(tile, phrases):
    a = tile.attributes
    top = sorted((k for k in range(9) if a.class_fractions[k] > 0), key=lambda k: (-a.class_fractions[k], k))[:3]
    relief = "gentle" if GEOMORPHON_FORMS[a.terrain_class] == "flat" else relief_band(a.relief)
    truth = {"landcover": lambda v: v in top, "water": lambda v: v == (a.water_fraction >= 0.02),
             "terrain": lambda v: v == a.terrain_class, "relief": lambda v: v == relief,
             "elevation": lambda v: v == elevation_band(a.elevation_mean)}
    return sum(WEIGHT[k] * (1 if truth[k](v) else -1) for p in phrases for k, v in PHRASES[p])


def find_phrases(caption):
    """Every non-overlapping phrase in ``caption``, longest match first at each word."""
    words = re.findall(r"[a-z-]+", caption.lower())
    table = {tuple(p.split()): p for p in PHRASES}
    longest = max(len(k) for k in table)
    found, i = [], 0
    while i < len(words):
        for n in range(min(longest, len(words) - i), 0, -1):
            hit = table.get(tuple(words[i:i + n]))
            if hit:
                found.append(hit)
                i += n
                break
        else:
            i += 1
    return found
