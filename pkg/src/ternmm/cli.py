"""Command-line entry points: quantize, generate, bench, train-toy.

stdout carries payload text, stderr carries diagnostics. Exit codes:
0 success, 2 unreadable/invalid input, 3 precision-map parse error,
4 bad PPM image, 5 context overflow, 6 phase/group mismatch. Output
files are written to a temp path and renamed, so failures leave no
partial files. All randomness flows from --seed (default 0).
"""

from __future__ import annotations

import argparse
import json
import sys

import numpy as np

from . import container as cio
from .config import GenerationParams, ModelConfig
from .errors import (
    CapacityError,
    ConfigError,
    DataError,
    FormatError,
    TernmmError,
)
from .kernels import KernelPlan, bench_kernels
from .model import load_model, params_to_records
from .pipeline import (
    Session,
    assemble_context,
    encode_image,
    generate,
    preprocess_image,
    project_features,
)
from .ppm import read_ppm
from .quant import QuantizedTokens, pack_matrix
from .tokenizer import detokenize, tokenize
from .train import TrainConfig, TrainSample, train_toy

EXIT_INPUT = 2
EXIT_PMAP = 3
EXIT_PPM = 4
EXIT_CAPACITY = 5
EXIT_PHASE = 6


def _fail(code: int, category: str, message: str) -> int:
    print(f"error: {category}: {message}", file=sys.stderr)
    return code


def cmd_quantize(args) -> int:
    pmap = None
    if args.pmap:
        try:
            with open(args.pmap) as f:
                raw = json.load(f)
            pmap = [(str(p), str(k)) for p, k in raw]
        except (OSError, ValueError, TypeError) as e:
            return _fail(EXIT_PMAP, "pmap", f"cannot parse {args.pmap}: {e}")
    try:
        tensors, meta = cio.read_container(getattr(args, "in"))
        qtensors, qmeta, summary = cio.quantize_checkpoint(tensors, meta, pmap)
    except FormatError as e:
        return _fail(EXIT_INPUT, "input", str(e))
    except OSError as e:
        return _fail(EXIT_INPUT, "input", f"cannot read {getattr(args, 'in')}: {e}")
    cio.write_container_file(args.out, qtensors, qmeta)
    tern = [row for row in summary if row["kind"] == "ternary"]
    for row in tern:
        print(
            f"{row['name']}: {row['f32_bytes']} -> {row['new_bytes']} bytes "
            f"({row['ratio']:.2f}x)"
        )
    if tern:
        total_f32 = sum(r["f32_bytes"] for r in tern)
        total_new = sum(r["new_bytes"] for r in tern)
        print(
            f"ternarized {len(tern)} tensors: {total_f32} -> {total_new} bytes "
            f"({total_f32 / total_new:.2f}x)"
        )
    else:
        print("no tensors matched a ternary rule")
    return 0


def cmd_generate(args) -> int:
    try:
        model = load_model(args.model)
    except (OSError, TernmmError) as e:
        return _fail(EXIT_INPUT, "input", f"cannot load model {args.model}: {e}")
    image_feats = None
    if args.image:
        try:
            pixels = read_ppm(args.image)
        except (OSError, DataError) as e:
            return _fail(EXIT_PPM, "ppm", f"{args.image}: {e}")
        pre = preprocess_image(pixels, size=model.config.vision.image_size)
        image_feats = project_features(model, encode_image(model, pre))
    params = GenerationParams(
        max_new_tokens=args.max_tokens,
        temperature=args.temperature,
        top_p=args.top_p,
        seed=args.seed,
    )
    try:
        params.validate()
    except ConfigError as e:
        return _fail(EXIT_INPUT, "input", str(e))
    plan = KernelPlan(threads=args.threads)
    session = Session(model=model, plan=plan)
    context = assemble_context(tokenize(args.prompt), image_feats, model.decoder.embed)
    try:
        ids = generate(session, context, params)
    except CapacityError as e:
        return _fail(EXIT_CAPACITY, "capacity", str(e))
    sys.stdout.write(detokenize(ids).decode("utf-8", errors="replace"))
    sys.stdout.write("\n")
    return 0


def cmd_bench(args) -> int:
    rng = np.random.default_rng(args.seed)
    if args.synthetic:
        o, k = args.synthetic
        if o < 1 or k < 1 or args.m < 1 or args.iters < 1:
            return _fail(EXIT_INPUT, "input", f"invalid bench sizes O={o} K={k} m={args.m}")
        trits = rng.integers(-1, 2, size=(o, k)).astype(np.int8)
        packed = pack_matrix(trits, 0.05)
        x = rng.standard_normal((args.m, k)).astype(np.float32)
        workloads = [(f"synthetic {o}x{k}", packed, x)]
    else:
        if not args.model:
            return _fail(EXIT_INPUT, "input", "provide --model or --synthetic O K")
        if args.m < 1 or args.iters < 1:
            return _fail(EXIT_INPUT, "input", f"invalid bench sizes m={args.m}")
        try:
            model = load_model(args.model)
        except (OSError, TernmmError) as e:
            return _fail(EXIT_INPUT, "input", f"cannot load model {args.model}: {e}")
        block = model.decoder.blocks[0]
        packed = block.wq.packed
        x = rng.standard_normal((args.m, packed.cols)).astype(np.float32)
        workloads = [("decoder block 0 wq", packed, x)]
    plan = KernelPlan(threads=args.threads)
    for label, packed, x in workloads:
        stats = bench_kernels(packed, x, iters=args.iters, plan=plan)
        print(f"{label}: kernel/oracle max diff {stats['max_abs_diff']:.2e} (<= 1e-4)")
        print(
            f"  ternary: {stats['ternary_elements_per_s'] / 1e6:.1f} Melem/s, "
            f"{stats['ternary_bytes_per_s'] / 1e9:.3f} GB/s weight traffic"
        )
        print(
            f"  dense oracle: {stats['dense_elements_per_s'] / 1e6:.1f} Melem/s, "
            f"{stats['dense_bytes_per_s'] / 1e9:.3f} GB/s weight traffic"
        )
        print(f"  speed ratio (dense/ternary): {stats['speed_ratio']:.2f}")
    return 0


def _load_dataset(path) -> list[TrainSample]:
    tensors, meta = cio.read_container(path)
    count = int(meta.get("dataset", {}).get("count", 0))
    if count < 1:
        raise FormatError("dataset container has no samples")
    samples = []
    for i in range(count):
        image = tensors[f"sample{i:04d}.image"].array
        tokens = tensors[f"sample{i:04d}.tokens"].array.astype(np.int64)
        samples.append(TrainSample(image=image, caption=[int(t) for t in tokens]))
    return samples


def cmd_train_toy(args) -> int:
    try:
        with open(args.config) as f:
            config = ModelConfig.from_dict(json.load(f))
    except (OSError, ValueError, ConfigError) as e:
        return _fail(EXIT_INPUT, "input", f"cannot load config {args.config}: {e}")
    try:
        dataset = _load_dataset(args.data)
    except (OSError, FormatError) as e:
        return _fail(EXIT_INPUT, "input", f"cannot load dataset {args.data}: {e}")

    if args.init:
        try:
            tensors, _meta = cio.read_container(args.init)
        except (OSError, FormatError) as e:
            return _fail(EXIT_INPUT, "input", f"cannot load init checkpoint {args.init}: {e}")
        params = {name: rec.array for name, rec in tensors.items() if rec.dtype == "f32"}
    else:
        from .model import init_params

        params = init_params(config, seed=args.seed)

    try:
        cfg = TrainConfig(
            phase=args.phase,
            peak_lr=args.lr,
            total_steps=args.steps,
            batch_size=args.batch_size,
            accumulation=args.accumulation,
            seed=args.seed,
        )
        history = train_toy(params, config, dataset, cfg)
    except ConfigError as e:
        return _fail(EXIT_PHASE, "phase", str(e))
    except (DataError, FormatError) as e:
        return _fail(EXIT_INPUT, "input", str(e))

    meta = {"config": config.to_dict()}
    cio.write_container_file(args.out, params_to_records(params), meta)
    csv_path = args.loss_csv or (args.out + ".loss.csv")
    lines = ["step,lr,loss"] + [
        f"{row['step']},{row['lr']:.10g},{row['loss']:.10g}" for row in history
    ]
    cio.write_bytes_atomic(csv_path, ("\n".join(lines) + "\n").encode())
    print(f"trained {len(history)} steps, final loss {history[-1]['loss']:.4f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ternmm", description="Ternary multimodal transformer toolkit"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    q = sub.add_parser("quantize", help="ternarize an f32 checkpoint container")
    q.add_argument("--in", dest="in", required=True, help="input f32 container")
    q.add_argument("--out", required=True, help="output quantized container")
    q.add_argument("--pmap", help="JSON [[pattern, ternary|dense], ...] precision map")
    q.set_defaults(func=cmd_quantize)

    g = sub.add_parser("generate", help="image+text -> text generation")
    g.add_argument("--model", required=True, help="quantized model container")
    g.add_argument("--prompt", required=True, help="text prompt")
    g.add_argument("--image", help="PPM P6 image file")
    g.add_argument("--max-tokens", type=int, default=32)
    g.add_argument("--temperature", type=float, default=0.0)
    g.add_argument("--top-p", type=float, default=1.0)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--threads", type=int, default=1)
    g.set_defaults(func=cmd_generate)

    b = sub.add_parser("bench", help="time ternary kernels against the dense oracle")
    b.add_argument("--model", help="quantized model container")
    b.add_argument("--synthetic", nargs=2, type=int, metavar=("O", "K"))
    b.add_argument("--m", type=int, default=16, help="token batch size")
    b.add_argument("--iters", type=int, default=10)
    b.add_argument("--threads", type=int, default=1)
    b.add_argument("--seed", type=int, default=0)
    b.set_defaults(func=cmd_bench)

    t = sub.add_parser("train-toy", help="toy-scale two-phase training")
    t.add_argument("--config", required=True, help="model config JSON")
    t.add_argument("--data", required=True, help="dataset container")
    t.add_argument("--phase", type=int, choices=(1, 2), required=True)
    t.add_argument("--out", required=True, help="output f32 checkpoint container")
    t.add_argument("--init", help="initial f32 checkpoint (defaults to seeded init)")
    t.add_argument("--steps", type=int, default=200)
    t.add_argument("--lr", type=float, default=1e-3)
    t.add_argument("--batch-size", type=int, default=4)
    t.add_argument("--accumulation", type=int, default=1)
    t.add_argument("--loss-csv", help="loss CSV path (default: OUT.loss.csv)")
    t.add_argument("--seed", type=int, default=0)
    t.set_defaults(func=cmd_train_toy)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except TernmmError as e:
        return _fail(EXIT_INPUT, "internal", str(e))


if __name__ == "__main__":
    sys.exit(main())
