"""Command-line surface: codec, training, generation, benchmark, cache report.

Exit codes: 0 success, 1 usage error (bad flags/arguments), 2 runtime error
(bad files, overflows, failed runs).
"""

from __future__ import annotations

import argparse
import logging
import os
import sys

import numpy as np

logger = logging.getLogger(__name__)

USAGE_EXIT = 1
RUNTIME_EXIT = 2


class _Parser(argparse.ArgumentParser):
    """argparse exits 2 on usage errors; this tool's contract says 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(USAGE_EXIT, f"{self.prog}: error: {message}\n")


def _add_sampling_flags(parser):
    parser.add_argument("--max-faces", type=int, default=800)
    parser.add_argument("--temperature", type=float, default=1.0)
    parser.add_argument("--top-k", type=int, default=50)
    parser.add_argument("--top-p", type=float, default=0.95)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--strict-grammar", action="store_true",
                        help="mask special tokens except [E] at face boundaries")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="iflame", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("tokenize", help="OBJ -> token stream")
    p.add_argument("--input", required=True, help="OBJ mesh path")
    p.add_argument("--out", required=True, help="token stream output path")
    p.add_argument("--bins", type=int, default=128)

    p = sub.add_parser("detokenize", help="token stream -> OBJ")
    p.add_argument("--input", required=True, help="token stream path")
    p.add_argument("--out", required=True, help="OBJ output path")

    p = sub.add_parser("train", help="train on a manifest of OBJ meshes")
    p.add_argument("--data", required=True, help="manifest: one OBJ path per line")
    p.add_argument("--config", help="key = value config file (model and training keys)")
    p.add_argument("--out", default="model.ckpt", help="checkpoint output path")
    p.add_argument("--log", help="per-step CSV log path")
    p.add_argument("--eval-out", help="post-training eval report CSV path")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--peak-lr", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--max-faces", type=int, default=800, help="dataset face-count filter")

    p = sub.add_parser("generate", help="sample a mesh from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True, help="OBJ output path")
    p.add_argument("--tokens-out", help="also write the raw token stream here")
    _add_sampling_flags(p)

    p = sub.add_parser("complete", help="continue a partial token stream")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True, help="token stream with at least the prefix")
    p.add_argument("--prefix-faces", type=int, required=True,
                   help="number of leading faces to keep as the prompt")
    p.add_argument("--out", required=True, help="OBJ output path")
    p.add_argument("--tokens-out", help="also write the raw token stream here")
    _add_sampling_flags(p)

    p = sub.add_parser("bench", help="time the decode loop for one or all variants")
    p.add_argument("--variant", default="all", help="full|linear|I|I+S|I+S+H|all")
    p.add_argument("--seq-len", type=int, required=True)
    p.add_argument("--batch", type=int, default=1)
    p.add_argument("--embed-dim", type=int, default=512)
    p.add_argument("--heads", type=int, default=16)
    p.add_argument("--layers", type=int, default=24)
    p.add_argument("--repeats", type=int, default=3)
    p.add_argument("--out", help="CSV output path (default: print rows)")

    p = sub.add_parser("inspect-cache", help="analytic cache footprint report")
    p.add_argument("--variant", required=True, help="full|linear|I|I+S|I+S+H")
    p.add_argument("--seq-len", type=int, required=True)
    p.add_argument("--embed-dim", type=int, default=512)
    p.add_argument("--heads", type=int, default=16)
    p.add_argument("--layers", type=int, default=24)
    p.add_argument("--bytes-per-element", type=int, default=4)
    p.add_argument("--csv", help="also write a one-row CSV here")

    return parser


def _cmd_tokenize(args) -> int:
    from . import mesh_codec
    cfg = mesh_codec.QuantizerConfig(bins=args.bins)
    mesh = mesh_codec.normalize(mesh_codec.load_obj(args.input))
    tokens = mesh_codec.tokenize(mesh, cfg)
    mesh_codec.write_tokens(args.out, tokens, cfg)
    print(f"wrote {len(tokens)} tokens ({(len(tokens) - 2) // 9} faces) to {args.out}")
    return 0


def _cmd_detokenize(args) -> int:
    from . import mesh_codec
    tokens, cfg = mesh_codec.read_tokens(args.input)
    mesh = mesh_codec.detokenize(tokens, cfg)
    mesh_codec.save_obj(mesh, args.out)
    print(f"wrote {mesh.num_vertices} vertices / {mesh.num_faces} faces to {args.out}")
    return 0


def _cmd_train(args) -> int:
    from . import checkpoint, configfile, mesh_codec, training
    from .hourglass import build_model
    pairs = configfile.parse_config_file(args.config) if args.config else {}
    unknown = configfile.unknown_keys(pairs)
    if unknown:
        logger.warning("config keys ignored: %s", ", ".join(sorted(unknown)))
    model_cfg = configfile.model_config_from(pairs)
    train_cfg = configfile.train_config_from(
        pairs, epochs=args.epochs, batch_size=args.batch_size,
        peak_lr=args.peak_lr, seed=args.seed,
    )
    qcfg = mesh_codec.QuantizerConfig(bins=model_cfg.bins)
    meshes = training.load_manifest(args.data)
    meshes = mesh_codec.filter_dataset(meshes, args.max_faces, qcfg)
    meshes = [m for m in meshes if m.num_faces > 0]
    if not meshes:
        raise ValueError(f"no usable meshes after the {args.max_faces}-face filter")
    longest = 2 + 9 * max(m.num_faces for m in meshes)
    if longest > model_cfg.max_context:
        raise ValueError(
            f"longest sequence ({longest} tokens) exceeds max_context {model_cfg.max_context}; "
            f"raise max_context in the config or lower --max-faces"
        )
    model = build_model(model_cfg, seed=train_cfg.seed)
    history = training.train(model, meshes, train_cfg, qcfg, log_path=args.log)
    checkpoint.save_checkpoint(model, args.out, extra={"final_loss": history[-1]["loss"]})
    print(f"trained {len(history)} steps, final loss {history[-1]['loss']:.4f}; checkpoint at {args.out}")
    if args.eval_out:
        seqs = [mesh_codec.tokenize(m, qcfg) for m in meshes]
        report = training.evaluate(model, seqs, qcfg, train_cfg.batch_size, split="train")
        with open(args.eval_out, "w", encoding="utf-8") as fh:
            fh.write(training.EVAL_CSV_HEADER + "\n")
            fh.write(report.csv_row() + "\n")
        print(f"train split: token_acc={report.token_acc:.4f} "
              f"face_acc={report.face_acc:.4f} ppl={report.ppl:.4f}")
    return 0


def _sampler_from(args):
    from .inference import SamplerConfig
    return SamplerConfig(temperature=args.temperature, top_k=args.top_k,
                         top_p=args.top_p, seed=args.seed,
                         strict_grammar=args.strict_grammar)


def _emit_mesh(tokens, qcfg, args) -> int:
    from . import mesh_codec
    if args.tokens_out:
        mesh_codec.write_tokens(args.tokens_out, tokens, qcfg)
    mesh = mesh_codec.detokenize(tokens, qcfg)
    mesh_codec.save_obj(mesh, args.out)
    print(f"wrote {mesh.num_vertices} vertices / {mesh.num_faces} faces to {args.out}")
    return 0


def _cmd_generate(args) -> int:
    from . import checkpoint, inference
    from .mesh_codec import QuantizerConfig
    model = checkpoint.load_checkpoint(args.checkpoint)
    tokens = inference.generate(model, _sampler_from(args), max_faces=args.max_faces)
    return _emit_mesh(tokens, QuantizerConfig(model.config.bins), args)


def _cmd_complete(args) -> int:
    from . import checkpoint, inference, mesh_codec
    model = checkpoint.load_checkpoint(args.checkpoint)
    qcfg = mesh_codec.QuantizerConfig(model.config.bins)
    stream, stream_cfg = mesh_codec.read_tokens(args.input)
    if stream_cfg.bins != qcfg.bins:
        raise ValueError(f"token stream uses bins={stream_cfg.bins}, checkpoint uses bins={qcfg.bins}")
    need = 1 + 9 * args.prefix_faces
    if args.prefix_faces < 1 or len(stream) < need:
        raise ValueError(f"stream has {len(stream)} tokens; {need} needed for {args.prefix_faces} prefix faces")
    prefix = np.asarray(stream[:need], dtype=np.int64)
    tokens = inference.complete(model, prefix, _sampler_from(args), max_faces=args.max_faces)
    return _emit_mesh(tokens, qcfg, args)


def _cmd_bench(args) -> int:
    from . import bench
    variants = bench.VARIANTS if args.variant == "all" else (args.variant,)
    for v in variants:
        if v not in bench.VARIANTS:
            raise ValueError(f"unknown variant {v!r}; expected one of {bench.VARIANTS} or all")
    reports = []
    for v in variants:
        report = bench.run_decode_bench(
            v, args.seq_len, args.batch, embed_dim=args.embed_dim,
            heads=args.heads, total_layers=args.layers, repeats=args.repeats,
        )
        reports.append(report)
        print(report.csv_row())
    if args.out:
        bench.write_bench_csv(args.out, reports)
        print(f"wrote {len(reports)} rows to {args.out}")
    return 0 if all(r.status == "ok" for r in reports) else RUNTIME_EXIT


def _cmd_inspect_cache(args) -> int:
    from . import bench, inference
    config = bench.variant_config(args.variant, embed_dim=args.embed_dim, heads=args.heads,
                                  max_context=args.seq_len, total_layers=args.layers)
    report = inference.cache_report(config, args.seq_len,
                                    bytes_per_element=args.bytes_per_element,
                                    label=args.variant)
    print(inference.format_cache_report(report))
    ratio = report.kv_positions / report.baseline_positions if report.baseline_positions else 0.0
    print(f"kv_position_ratio {ratio:.6f}")
    if args.csv:
        with open(args.csv, "w", encoding="utf-8") as fh:
            fh.write(inference.CACHE_CSV_HEADER + "\n")
            fh.write(inference.cache_csv_row(report) + "\n")
    return 0


_COMMANDS = {
    "tokenize": _cmd_tokenize,
    "detokenize": _cmd_detokenize,
    "train": _cmd_train,
    "generate": _cmd_generate,
    "complete": _cmd_complete,
    "bench": _cmd_bench,
    "inspect-cache": _cmd_inspect_cache,
}


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("IFLAME_LOG", "INFO"),
                        format="%(levelname)s %(name)s: %(message)s")
    threads = os.environ.get("IFLAME_THREADS")
    args = build_parser().parse_args(argv)
    try:
        if threads is not None:
            import torch
            torch.set_num_threads(int(threads))
        return _COMMANDS[args.command](args)
    except Exception as exc:  # noqa: BLE001 - the CLI boundary maps errors to exit codes
        print(f"iflame {args.command}: error: {exc}", file=sys.stderr)
        logger.debug("traceback", exc_info=True)
        return RUNTIME_EXIT


if __name__ == "__main__":
    sys.exit(main())
