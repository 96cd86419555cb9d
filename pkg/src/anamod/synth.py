"""Deterministic synthetic moderation corpora for offline runs and tests.

Labels are balanced round-robin (category counts differ by at most one)
and every text names its own category verbatim, which is what lets the
scripted offline endpoints act on content alone.  Same seed and size,
same corpus, byte for byte.
"""

from __future__ import annotations

import random

from .errors import ConfigError, DatasetError
from .schema import LabelSchema, ModerationInstance

# filler vocabulary; deliberately free of the default category names
_TONES = (
    "calm",
    "urgent",
    "formal",
    "casual",
    "wry",
    "earnest",
    "clinical",
    "breathless",
)
_VENUES = (
    "forum thread",
    "comment section",
    "group chat",
    "public feed",
    "review board",
    "newsletter reply",
)


def _dominant_category(text: str, schema: LabelSchema) -> str | None:
    """Longest category name found in the text, matching the scan the
    scripted endpoints use."""
    lowered = text.casefold()
    for name in sorted(schema.categories, key=len, reverse=True):
        if name.casefold() in lowered:
            return name
    return None


def synth_corpus(n: int, schema: LabelSchema, seed: int = 0, id_prefix: str = "inst") -> list[ModerationInstance]:
    """Build ``n`` labeled instances with balanced categories.

    Each text mentions exactly its own category among the schema names, so
    a content-driven responder can recover the label without seeing it.
    """
    if n < len(schema.categories):
        raise ConfigError(
            [f"corpus size must cover every category: need >= {len(schema.categories)}, got {n}"]
        )
    rng = random.Random(seed)
    categories = schema.categories
    instances: list[ModerationInstance] = []
    for i in range(n):
        category = categories[i % len(categories)]
        tone = rng.choice(_TONES)
        venue = rng.choice(_VENUES)
        ref = rng.randrange(10**6)
        text = (
            f"Post {i + 1:04d} from a {venue}: a submission presenting {category} "
            f"material in a {tone} register, ref {ref:06d}."
        )
        found = _dominant_category(text, schema)
        if found != category:
            # only reachable with a schema whose names collide with the filler
            raise DatasetError(
                f"synthetic text for {category!r} scans as {found!r}; "
                "category names collide with the filler vocabulary"
            )
        instances.append(
            ModerationInstance(
                id=f"{id_prefix}-{i + 1:04d}",
                text=text,
                label=category,
                meta={},
            )
        )
    return instances
