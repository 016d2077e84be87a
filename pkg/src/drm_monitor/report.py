"""Run manifests and canonical report serialization."""

import hashlib
import json
import sys
import time

from . import __version__


def file_digest(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 16), b""):
            h.update(block)
    return h.hexdigest()


def params_digest(params):
    blob = json.dumps(params, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()


def manifest(subcommand, params, seed=None, input_digest=None, started=None,
             include_timing=True):
    """Provenance block attached to every report.

    Echoes only the semantic parameters (not the raw argv), so reports
    are byte-identical across --threads/--serial and output options.
    """
    out = {
        "tool": "drm-monitor",
        "version": __version__,
        "subcommand": subcommand,
        "parameters": params,
        "seed": seed,
        "input_digest": input_digest,
    }
    if include_timing and started is not None:
        out["timing_sec"] = round(time.perf_counter() - started, 6)
    return out


def write_report(obj, out, as_json=True):
    text = json.dumps(obj, sort_keys=True, indent=2) + "\n" if as_json else obj
    if out == "-":
        sys.stdout.write(text)
    else:
        with open(out, "w", encoding="utf-8") as fh:
            fh.write(text)
