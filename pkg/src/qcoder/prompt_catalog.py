"""Versioned prompt templates.

Templates live as text files next to this module so they are data, not
code; the catalog version is a content hash over all of them, recorded
in every run for auditability.
"""

from __future__ import annotations

import hashlib
from functools import lru_cache
from importlib import resources

_PROMPT_NAMES = (
    "apply_code",
    "distribute_code",
    "line_code",
    "condense",
    "parent_synthesis",
    "validate",
    "refine",
)


@lru_cache(maxsize=None)
def get_template(name: str) -> str:
    if name not in _PROMPT_NAMES:
        raise KeyError(name)
    return (resources.files("qcoder") / "prompts" / f"{name}.txt").read_text(
        encoding="utf-8"
    )


@lru_cache(maxsize=1)
def catalog_version() -> str:
    h = hashlib.sha256()
    for name in _PROMPT_NAMES:
        h.update(name.encode())
        h.update(get_template(name).encode("utf-8"))
    return h.hexdigest()[:12]


def render(__template: str, **fields: str) -> str:
    return get_template(__template).format(**fields)
