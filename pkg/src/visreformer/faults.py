"""Fault injection for exercising the verification harness.

Faults only switch on when ``VISREFORMER_ENABLE_FAULTS=1`` is set in the
environment, so a normal run can never activate one by accident.
"""
import os

KNOWN = ("rev_inverse", "lsh_dedup", "accumulation")

_active: set = set()


def enabled() -> bool:
    return os.environ.get("VISREFORMER_ENABLE_FAULTS") == "1"


def inject(name: str):
    if name not in KNOWN:
        raise ValueError(f"unknown fault {name!r}; known: {', '.join(KNOWN)}")
    if not enabled():
        raise PermissionError("fault injection requires VISREFORMER_ENABLE_FAULTS=1")
    _active.add(name)


def clear():
    _active.clear()


def active(name: str) -> bool:
    return name in _active
