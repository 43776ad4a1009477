from enum import IntEnum


class MovingLabel(IntEnum):
    """Per-point moving object label. Stored as uint8 in label arrays."""

    STATIC = 0
    MOVING = 1
    IGNORE = 2
