"""Export pipeline: safetensors -> mapped, f32, engine-ready container.

The exporter never quantizes; ternarization belongs to the engine's
quantize command, keeping the bit-exact quantizer implementation in one
place. Export embeds the mapping into container meta under
"export_mapping" so verification needs only (source dir, container).
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass

import numpy as np

from .container_io import (
    ContainerError,
    expected_model_tensors,
    read_container,
    read_f32_tensor,
    write_f32_container,
)
from .mapping import MappingError, MappingSpec
from .safetensors_io import read_source_dir

REL_TOL = 1e-5  # f32 cast tolerance for sum/absmax agreement


class ExportError(Exception):
    pass


def _converted(rule, tensor, name: str) -> np.ndarray:
    arr = tensor.array
    if tensor.dtype != "F32":
        if not rule.cast:
            raise ExportError(
                f"rule {rule.source!r}: source {name!r} is {tensor.dtype} "
                "and the rule does not allow cast to f32"
            )
        arr = arr.astype(np.float32)
    else:
        arr = np.asarray(arr, dtype=np.float32)
    if rule.transpose:
        if arr.ndim != 2:
            raise ExportError(
                f"rule {rule.source!r}: transpose needs a 2-D tensor, "
                f"{name!r} has shape {arr.shape}"
            )
        arr = np.ascontiguousarray(arr.T)
    return arr


def export_checkpoint(source_dir, mapping: MappingSpec, config: dict, out_path) -> dict:
    """Write the mapped f32 container; returns a small summary dict."""
    sources = read_source_dir(source_dir)
    triples = mapping.resolve(sources.keys())
    required = expected_model_tensors(config)

    tensors: dict[str, np.ndarray] = {}
    for rule, src_name, dest in triples:
        arr = _converted(rule, sources[src_name], src_name)
        expected_shape = required.get(dest)
        if expected_shape is not None and tuple(arr.shape) != expected_shape:
            raise ExportError(
                f"rule {rule.source!r}: {dest!r} has shape {tuple(arr.shape)} "
                f"after transpose={rule.transpose}, config requires {expected_shape}"
            )
        tensors[dest] = arr

    missing = sorted(set(required) - set(tensors))
    if missing:
        raise ExportError(
            f"mapping is incomplete for the target config; first missing "
            f"destination: {missing[0]!r} ({len(missing)} total)"
        )

    meta = {"config": config, "export_mapping": mapping.to_json()}
    payload = write_f32_container(tensors, meta)
    tmp = os.fspath(out_path) + ".tmp"
    with open(tmp, "wb") as f:
        f.write(payload)
    os.replace(tmp, out_path)
    return {
        "tensors": len(tensors),
        "bytes": len(payload),
        "extra_destinations": sorted(set(tensors) - set(required)),
    }


@dataclass
class VerifyEntry:
    dest: str
    source: str
    ok: bool
    detail: str


def verify_export(source_dir, container_path) -> list[VerifyEntry]:
    """Compare every mapped tensor between source and container.

    Checks shape, per-tensor sum, and absmax within 1e-5 relative.
    Failures are report entries, not exceptions.
    """
    entries, data, meta = read_container(container_path)
    mapping = MappingSpec.from_json(meta.get("export_mapping", []))
    if not mapping.rules:
        return []
    sources = read_source_dir(source_dir)
    triples = mapping.resolve(sources.keys())

    report: list[VerifyEntry] = []
    for rule, src_name, dest in triples:
        if dest not in entries:
            report.append(VerifyEntry(dest, src_name, False, "missing from container"))
            continue
        try:
            got = read_f32_tensor(entries, data, dest)
        except ContainerError as e:
            report.append(VerifyEntry(dest, src_name, False, str(e)))
            continue
        want = sources[src_name].array.astype(np.float64)
        if rule.transpose:
            want = want.T
        if got.shape != want.shape:
            report.append(
                VerifyEntry(dest, src_name, False, f"shape {got.shape} != {want.shape}")
            )
            continue
        got64 = got.astype(np.float64)
        checks = []
        for label, a, b in (
            ("sum", float(got64.sum()), float(want.sum())),
            ("absmax", float(np.abs(got64).max(initial=0.0)), float(np.abs(want).max(initial=0.0))),
        ):
            scale = max(abs(a), abs(b), 1.0)
            if abs(a - b) > REL_TOL * scale:
                checks.append(f"{label} {a!r} != {b!r}")
        if checks:
            report.append(VerifyEntry(dest, src_name, False, "; ".join(checks)))
        else:
            report.append(VerifyEntry(dest, src_name, True, "ok"))
    return report


def load_config(path) -> dict:
    with open(path) as f:
        config = json.load(f)
    for key in ("vision", "projector", "decoder"):
        if key not in config:
            raise ExportError(f"config file lacks the {key!r} section")
    return config
