"""Topic filter validation and matching (MQTT 3.1.1 rules, minus ``$`` topics)."""

from __future__ import annotations

from functools import lru_cache

from ..errors import InvalidFilter


def validate_filter(flt: str) -> None:
    if not flt:
        raise InvalidFilter("empty filter")
    levels = flt.split("/")
    for i, level in enumerate(levels):
        if "#" in level and (level != "#" or i != len(levels) - 1):
            raise InvalidFilter(f"'#' must be the whole last level: {flt!r}")
        if "+" in level and level != "+":
            raise InvalidFilter(f"'+' must occupy a whole level: {flt!r}")


@lru_cache(maxsize=4096)
def _split_filter(flt: str) -> tuple[str, ...]:
    validate_filter(flt)
    return tuple(flt.split("/"))


def topic_matches(flt: str, topic: str) -> bool:
    """True when ``topic`` matches ``flt``.

    ``+`` matches exactly one level; a trailing ``#`` matches any number of
    remaining levels, including none (so ``a/#`` matches ``a``).
    """
    f = _split_filter(flt)
    t = topic.split("/")
    for i, level in enumerate(f):
        if level == "#":
            return True
        if i >= len(t):
            return False
        if level != "+" and level != t[i]:
            return False
    return len(f) == len(t)
