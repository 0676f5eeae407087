"""Provenance header shared by every file the package writes."""
from __future__ import annotations

import hashlib
import json

from . import __version__


def config_hash(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def provenance(config: dict) -> dict:
    return {"tool": "spinodoid", "version": __version__, "config_hash": config_hash(config)}
