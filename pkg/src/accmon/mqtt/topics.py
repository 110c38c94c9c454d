"""MQTT topic filter validation and matching.

Filters are /-separated levels. A level is either a literal, '+' (matches
exactly one level) or '#' (matches all remaining levels, including zero;
only allowed as the final level).
"""

from __future__ import annotations


class InvalidFilter(Exception):
    pass


def validate_filter(filter_: str) -> None:
    if not filter_:
        raise InvalidFilter("empty filter")
    levels = filter_.split("/")
    for i, level in enumerate(levels):
        if level == "#":
            if i != len(levels) - 1:
                raise InvalidFilter(f"'#' must be the final level in {filter_!r}")
        elif level == "+":
            continue
        elif "#" in level or "+" in level:
            raise InvalidFilter(f"wildcard inside level {level!r} in {filter_!r}")


def topic_matches(filter_: str, topic: str) -> bool:
    """Level-wise match of a concrete topic against a filter."""
    validate_filter(filter_)
    filter_levels = filter_.split("/")
    topic_levels = topic.split("/")
    for i, f in enumerate(filter_levels):
        if f == "#":
            # matches the remaining levels, including none: "acc/#"
            # matches "acc" itself.
            return True
        if i >= len(topic_levels):
            return False
        if f != "+" and f != topic_levels[i]:
            return False
    return len(topic_levels) == len(filter_levels)
