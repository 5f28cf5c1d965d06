"""Command-line entry points.

Subcommands: synth, train, eval, ablate, retrieve, generate, serve.
Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np


class _Parser(argparse.ArgumentParser):
    """Usage errors exit with code 1 (argparse defaults to 2)."""

    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        sys.exit(1)


def _build_parser():
    parser = _Parser(prog="cornerkit",
                     description="corner-kick models: data, training, serving")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic labeled dataset")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    p = sub.add_parser("train", help="train one model")
    p.add_argument("--task", required=True, choices=["receiver", "shot", "generate"])
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--learning-rate", type=float, default=None)
    p.add_argument("--layer-count", type=int, default=None)
    p.add_argument("--base-layer", default="gatv2",
                   choices=["deepsets", "mpnn", "gatv2"])
    p.add_argument("--symmetry", default="group_convolution",
                   choices=["none", "frame_averaging", "group_convolution"])
    p.add_argument("--unconditional", action="store_true",
                   help="shot task: drop the receiver conditioning")
    p.add_argument("--team", choices=["attacking", "defending"], default=None,
                   help="generate task: which side to adjust")
    p.add_argument("--eval-data", default=None)
    p.add_argument("--quiet", action="store_true")

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--receiver-ckpt", default=None,
                   help="needed for conditional shot checkpoints")
    p.add_argument("--seed-tag", type=int, default=0, help="seed column in records")
    p.add_argument("--variant-tag", default="", help="variant column in records")

    p = sub.add_parser("ablate", help="run the ablation ladder")
    p.add_argument("--data", required=True)
    p.add_argument("--seeds", type=int, nargs="+", default=[1, 2, 3])
    p.add_argument("--steps", type=int, default=1200)
    p.add_argument("--layer-count", type=int, default=2)
    p.add_argument("--batch-size", type=int, default=128)
    p.add_argument("--receiver-variants", nargs="+", default=None)
    p.add_argument("--shot-variants", nargs="+", default=None)
    p.add_argument("--out", default=None, help="write line records here")

    p = sub.add_parser("retrieve", help="embed corners and query neighbors")
    p.add_argument("--ckpt", required=True, help="receiver checkpoint")
    p.add_argument("--data", required=True, help="corpus dataset")
    p.add_argument("--query-id", default=None)
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--side", default="attacking",
                   choices=["attacking", "defending", "both"])
    p.add_argument("--baseline", action="store_true",
                   help="use the raw-feature cosine baseline")
    p.add_argument("--export", default=None,
                   help="write {id, side, vector} records and exit")

    p = sub.add_parser("generate", help="sample guided adjustments for one corner")
    p.add_argument("--ckpt-dir", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--corner-id", required=True)
    p.add_argument("--team", required=True, choices=["attacking", "defending"])
    p.add_argument("--outcome", type=int, required=True, choices=[0, 1])
    p.add_argument("--n", type=int, default=1)
    p.add_argument("--seed", type=int, required=True)

    p = sub.add_parser("serve", help="start the HTTP service")
    p.add_argument("--port", type=int, default=None)
    p.add_argument("--checkpoint-dir", default=None)
    p.add_argument("--corpus", default=None)
    p.add_argument("--host", default="127.0.0.1")
    return parser


def _load_dataset(path):
    from .cornergraph import read_dataset
    return read_dataset(path)


def _cmd_synth(args):
    from .cornergraph import write_dataset
    from .synth import SynthConfig, generate
    corners = generate(SynthConfig(n_samples=args.n, seed=args.seed))
    write_dataset(args.out, corners)
    print(f"wrote {len(corners)} corners to {args.out}")


def _cmd_train(args):
    from . import harness
    from .checkpoint import save_checkpoint
    cfg_kwargs = dict(task=args.task, base_layer=args.base_layer,
                      symmetry_mode=args.symmetry,
                      conditional=not args.unconditional, team_side=args.team)
    for name in ("steps", "seed", "batch_size", "learning_rate", "layer_count"):
        v = getattr(args, name)
        if v is not None:
            cfg_kwargs[name] = v
    cfg = harness.TrainConfig(**cfg_kwargs)
    train_set = _load_dataset(args.data)
    eval_set = _load_dataset(args.eval_data) if args.eval_data else None
    log = None if args.quiet else (
        lambda step, loss: print(f"step {step}: eval loss {loss:.5f}", flush=True))
    ckpt = harness.train(cfg, train_set, eval_set, log=log)
    save_checkpoint(args.out, ckpt)
    print(f"saved {args.task} checkpoint (best step {ckpt.step}, "
          f"eval loss {ckpt.eval_loss:.5f}) to {args.out}")


def _cmd_eval(args):
    from . import harness
    from .checkpoint import load_checkpoint
    ckpt = load_checkpoint(args.ckpt)
    receiver = load_checkpoint(args.receiver_ckpt) if args.receiver_ckpt else None
    report = harness.evaluate(ckpt, _load_dataset(args.data), receiver_ckpt=receiver)
    for row in report.rows(args.variant_tag, args.seed_tag):
        print(json.dumps(row))


def _cmd_ablate(args):
    from . import harness
    rows, summary = harness.ablate(
        _load_dataset(args.data), seeds=args.seeds, steps=args.steps,
        receiver_variants=args.receiver_variants, shot_variants=args.shot_variants,
        layer_count=args.layer_count, batch_size=args.batch_size,
        log=lambda msg: print(msg, flush=True))
    lines = [json.dumps(r) for r in rows]
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write("\n".join(lines) + "\n")
    else:
        print("\n".join(lines))
    print(json.dumps({"summary": summary}, sort_keys=True))


def _cmd_retrieve(args):
    from . import retrieval
    from .checkpoint import load_checkpoint
    from .harness import model_from_checkpoint
    corpus = _load_dataset(args.data)
    model = model_from_checkpoint(load_checkpoint(args.ckpt))
    if args.export:
        retrieval.export_embeddings(args.export, corpus, model)
        print(f"wrote embeddings for {len(corpus)} corners to {args.export}")
        return
    if args.query_id is None:
        raise ValueError("--query-id is required unless --export is given")
    by_id = {c.id: c for c in corpus}
    if args.query_id not in by_id:
        raise ValueError(f"corner {args.query_id!r} not in {args.data}")
    query = by_id[args.query_id]
    if args.baseline:
        results, excluded = retrieval.cosine_baseline(query, corpus, k=args.k)
        for cid, sim in results:
            print(json.dumps({"id": cid, "similarity": sim}))
        if excluded:
            print(json.dumps({"excluded_zero_norm": excluded}))
    else:
        index = retrieval.EmbeddingIndex.build(corpus, model, side=args.side)
        results, truncated = retrieval.nearest(
            retrieval.embed(query, model, args.side), index, k=args.k)
        for cid, dist in results:
            print(json.dumps({"id": cid, "distance": dist}))
        if truncated:
            print(json.dumps({"truncated": True}))


def _cmd_generate(args):
    from . import heads
    from .service import load_model_set
    models = load_model_set(args.ckpt_dir)
    corpus = _load_dataset(args.data)
    by_id = {c.id: c for c in corpus}
    if args.corner_id not in by_id:
        raise ValueError(f"corner {args.corner_id!r} not in {args.data}")
    generator = models.generator(args.team)
    report = heads.generate_adjustment(
        by_id[args.corner_id], args.outcome, args.team, args.n, args.seed,
        generator, receiver_model=models.receiver, shot_model=models.shot)
    from .cornergraph import corner_to_record
    out = {
        "p_shot_before": report.shot_prob_before,
        "samples": [{"players": corner_to_record(c)["players"], "p_shot": p}
                    for c, p in report.samples],
    }
    print(json.dumps(out))


def _cmd_serve(args):
    import uvicorn

    from .service import build_app
    port = args.port or int(os.environ.get("CORNERKIT_PORT", "8008"))
    ckpt_dir = args.checkpoint_dir or os.environ.get("CORNERKIT_CHECKPOINT_DIR")
    corpus = args.corpus or os.environ.get("CORNERKIT_CORPUS")
    if not ckpt_dir:
        raise ValueError("--checkpoint-dir or CORNERKIT_CHECKPOINT_DIR is required")
    app = build_app(ckpt_dir, corpus_path=corpus)
    uvicorn.run(app, host=args.host, port=port, log_level="warning")


_COMMANDS = {
    "synth": _cmd_synth,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "ablate": _cmd_ablate,
    "retrieve": _cmd_retrieve,
    "generate": _cmd_generate,
    "serve": _cmd_serve,
}


def main(argv=None):
    args = _build_parser().parse_args(argv)
    try:
        _COMMANDS[args.command](args)
    except Exception as e:  # runtime failures -> exit 2 with a clean message
        print(f"cornerkit {args.command}: {type(e).__name__}: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
