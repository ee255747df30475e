#!/usr/bin/env python3
"""Build the toy assets used by the demos: config JSON, f32 checkpoint,
quantized model, synthetic dataset, and a sample PPM image."""

import argparse
import json
import os
import sys

import numpy as np

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

from ternmm import container as cio
from ternmm.config import toy_config
from ternmm.model import init_params, params_to_records
from ternmm.ppm import write_ppm


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out-dir", default="toy_assets")
    ap.add_argument("--seed", type=int, default=7)
    args = ap.parse_args()

    os.makedirs(args.out_dir, exist_ok=True)
    cfg = toy_config()
    with open(os.path.join(args.out_dir, "config.json"), "w") as f:
        json.dump(cfg.to_dict(), f, indent=2)

    params = init_params(cfg, seed=args.seed)
    meta = {"config": cfg.to_dict()}
    f32_path = os.path.join(args.out_dir, "toy_f32.tmc")
    cio.write_container_file(f32_path, params_to_records(params), meta)

    tensors, meta = cio.read_container(f32_path)
    qtensors, qmeta, summary = cio.quantize_checkpoint(tensors, meta)
    cio.write_container_file(os.path.join(args.out_dir, "toy_model.tmc"), qtensors, qmeta)

    rng = np.random.default_rng(args.seed)
    s = cfg.vision.image_size
    dataset = {}
    for i in range(4):
        dataset[f"sample{i:04d}.image"] = cio.record_f32(
            rng.normal(0, 1, (3, s, s)).astype(np.float32)
        )
        dataset[f"sample{i:04d}.tokens"] = cio.record_f32(
            rng.integers(97, 123, 8).astype(np.float32)
        )
    cio.write_container_file(
        os.path.join(args.out_dir, "dataset.tmc"), dataset, {"dataset": {"count": 4}}
    )

    write_ppm(
        os.path.join(args.out_dir, "sample.ppm"),
        rng.integers(0, 256, (64, 96, 3), dtype=np.uint8),
    )

    tern = [r for r in summary if r["kind"] == "ternary"]
    saved = sum(r["f32_bytes"] - r["new_bytes"] for r in tern)
    print(f"wrote toy assets to {args.out_dir}/ ({len(tern)} ternary tensors, {saved} bytes saved)")
    return 0


if __name__ == "__main__":
    sys.exit(main())
