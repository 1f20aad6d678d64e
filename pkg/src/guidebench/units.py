"""Fixed unit-normalization table for quantitative values.

Version 1 of the table. Lengths normalize to millimetres, durations to days,
masses to milligrams. The table is deliberately small and closed: comparing
values across items and rubric elements requires one stable convention, not
general-purpose unit algebra. Calendar months and years use the 30/365-day
convention.
"""

from __future__ import annotations

UNIT_TABLE_VERSION = "units/1"

# unit -> (base unit, multiplier)
_UNIT_TABLE: dict[str, tuple[str, float]] = {
    "mm": ("mm", 1.0),
    "cm": ("mm", 10.0),
    "m": ("mm", 1000.0),
    "day": ("day", 1.0),
    "days": ("day", 1.0),
    "week": ("day", 7.0),
    "weeks": ("day", 7.0),
    "month": ("day", 30.0),
    "months": ("day", 30.0),
    "year": ("day", 365.0),
    "years": ("day", 365.0),
    "mg": ("mg", 1.0),
    "g": ("mg", 1000.0),
    "mcg": ("mg", 0.001),
    "ug": ("mg", 0.001),
    "%": ("%", 1.0),
}


def known_units() -> tuple[str, ...]:
    return tuple(sorted(_UNIT_TABLE))


def normalize_value(quantity: float, unit: str) -> tuple[float, str]:
    """Convert (quantity, unit) to the base unit of its dimension.

    Unknown units pass through unchanged (lowercased) so that exotic units
    still compare consistently with themselves.
    """
    key = unit.strip().lower()
    if key in _UNIT_TABLE:
        base, factor = _UNIT_TABLE[key]
        return float(quantity) * factor, base
    return float(quantity), key


def value_key(quantity: float, unit: str) -> str:
    """Stable string key for a normalized (quantity, unit) pair."""
    q, u = normalize_value(quantity, unit)
    # repr of a float is stable in Python 3; strip trailing ".0" for readability
    text = repr(q)
    if text.endswith(".0"):
        text = text[:-2]
    return f"{text} {u}"
