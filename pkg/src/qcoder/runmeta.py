"""Run identity and timestamps.

Run ids are content-derived (hash of config + inputs + seed) so a rerun
with identical inputs against a deterministic backend reproduces its
outputs byte for byte; timestamps freeze to the epoch in that case.
"""

from __future__ import annotations

import datetime
import hashlib
import json

EPOCH = "1970-01-01T00:00:00Z"


def make_run_id(kind: str, payload: dict) -> str:
    canonical = json.dumps({"kind": kind, **payload}, sort_keys=True, ensure_ascii=False)
    return f"{kind}-{hashlib.sha256(canonical.encode('utf-8')).hexdigest()[:10]}"


def timestamp(deterministic: bool) -> str:
    if deterministic:
        return EPOCH
    return (
        datetime.datetime.now(datetime.timezone.utc)
        .replace(microsecond=0)
        .isoformat()
        .replace("+00:00", "Z")
    )
