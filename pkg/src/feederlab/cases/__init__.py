"""Bundled example feeders and profile data."""

from __future__ import annotations

from importlib import resources

from ..dssparse import parse_dss
from ..network import Network

CASES = ("ieee34", "ieee37", "synthetic-large")

_FILES = {
    "ieee34": "ieee34.dss",
    "ieee37": "ieee37.dss",
    "synthetic-large": "synthetic_large.dss",
}


def case_text(name: str) -> str:
    """Raw DSS text of a bundled case."""
    try:
        filename = _FILES[name]
    except KeyError:
        raise KeyError(f"unknown case {name!r}; available: {', '.join(CASES)}") from None
    return resources.files(__package__).joinpath(filename).read_text()


def load_case(name: str) -> Network:
    return parse_dss(case_text(name))


def profiles_text() -> str:
    """Bundled 30-day synthetic load/pv/wind profile CSV (percent of base)."""
    return resources.files(__package__).joinpath("profiles.csv").read_text()
