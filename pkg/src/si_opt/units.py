"""SPICE-style numeric literals with engineering scale suffixes."""

import re

SCALE = {
    "t": 1e12,
    "g": 1e9,
    "meg": 1e6,
    "k": 1e3,
    "m": 1e-3,
    "u": 1e-6,
    "n": 1e-9,
    "p": 1e-12,
    "f": 1e-15,
}

# Unit labels tolerated after the scale suffix ("840ps", "101.6um", "10v").
UNITS = ("ohm", "hz", "s", "v", "a", "h", "m")

_NUMBER = re.compile(r"[+-]?(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?")
_SUFFIX = re.compile(r"(meg|[tgkmunpf])?(ohm|hz|[svahm])?$", re.IGNORECASE)


class UnitError(ValueError):
    pass


def split_number(text):
    """Return ``(mantissa_text, suffix_text)`` or None if ``text`` is not numeric."""
    m = _NUMBER.match(text)
    if m is None:
        return None
    return m.group(0), text[m.end():]


def parse_value(text):
    """Parse a SPICE literal such as ``57.6meg`` or ``840ps`` into a float.

    Scale suffixes are case-insensitive and ``m`` means milli.  An optional
    unit label may follow the scale; anything else is rejected.
    """
    parts = split_number(text.strip())
    if parts is None:
        raise UnitError(f"not a number: {text!r}")
    mantissa, tail = parts
    value = float(mantissa)
    if not tail:
        return value
    m = _SUFFIX.match(tail)
    if m is None or (m.group(1) is None and m.group(2) is None):
        raise UnitError(f"trailing garbage in numeric literal {text!r}")
    scale, unit = m.group(1), m.group(2)
    if scale is None and unit.lower() == "m":
        # a bare "m" is the milli scale, never a unit
        scale, unit = "m", None
    if scale is not None:
        value *= SCALE[scale.lower()]
    return value


def is_number(text):
    try:
        parse_value(text)
    except UnitError:
        return False
    return True


def render_value(x, suffix=""):
    """Render ``x`` with the given scale suffix so that it parses back to ``x``."""
    if not suffix:
        return repr(float(x))
    return repr(float(x) / SCALE[suffix.lower()]) + suffix


def format_eng(x, digits=4):
    """Engineering notation in the optimizer-table style, e.g. ``1.0000k``."""
    if x == 0 or x != x:
        return f"{x:.{digits}f}"
    mag = abs(x)
    for suffix, scale in (("g", 1e9), ("meg", 1e6), ("k", 1e3), ("", 1.0),
                          ("m", 1e-3), ("u", 1e-6), ("n", 1e-9), ("p", 1e-12),
                          ("f", 1e-15)):
        if mag >= scale * (1 - 0.5 * 10 ** -digits):
            return f"{x / scale:.{digits}f}{suffix}"
    return f"{x:.{digits}e}"
