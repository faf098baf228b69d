"""``encfree`` command line: tokenize, plan, profile, gradcheck, synth, train, eval, merge-sweep.

Exit codes: 0 success, 1 domain or contract error (JSON on stderr), 2 usage error.
``ENCFREE_OUT`` sets the default output directory.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import json
import os
import sys
from pathlib import Path

import numpy as np

from .errors import ContractError, EncFreeError

OUT_ENV = "ENCFREE_OUT"


def _out_dir(args, parser) -> Path:
    out = args.out or os.environ.get(OUT_ENV)
    if not out:
        parser.error(f"--out is required (or set {OUT_ENV})")
    return Path(out)


def _emit(text: str, out: Path | None = None) -> None:
    if out is not None:
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(text + "\n", encoding="utf-8")
    print(text)


# -- subcommands ------------------------------------------------------------------
def cmd_tokenize(args, parser) -> int:
    from .videotok import ResolutionPolicy, Tier, load_clip, resize_to_policy, stream_to_jsonl, tokenize

    base = ResolutionPolicy.preset(args.preset)
    policy = dataclasses.replace(base, patch_size=args.patch_size)
    clip = resize_to_policy(load_clip(args.input), policy, Tier(args.tier))
    stream = tokenize(clip, policy)
    out = args.out
    if out is None and os.environ.get(OUT_ENV):
        out = str(Path(os.environ[OUT_ENV]) / f"{clip.source_id}.tokens.jsonl")
    if out:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        stream_to_jsonl(stream, out, payload=not args.no_payload)
    print(json.dumps({"source": clip.source_id, "frames": clip.T, "height": clip.H, "width": clip.W,
                      "tokens": len(stream), "counts": stream.counts(), "output": out}))
    return 0


def cmd_plan(args, parser) -> int:
    from .hybridres import plan
    from .videotok import ResolutionPolicy

    frames = args.frames if args.frames is not None else args.high + args.low
    policy = dataclasses.replace(ResolutionPolicy.preset(args.preset), patch_size=args.patch_size)
    size = tuple(args.frame_size) if args.frame_size else None
    hp = plan(frames, args.high, args.low, policy, size, args.placement)
    print(hp.to_json() if args.json else hp.predicted_tokens)
    return 0


def cmd_profile(args, parser) -> int:
    from . import profiler as pf

    tc = pf.ScenarioTableConfig(cfg=pf.PRESETS[args.preset], text_len=args.text_len)
    rows = pf.scenario_table(args.frames, tc=tc)
    out = Path(args.out) if args.out else None
    _emit(pf.emit(rows, args.emit), out)
    if args.measure:
        from .backbone import BackboneParams
        from .merge import MergeConfig
        from . import numerics as nx

        cfg = pf.PRESETS["toy"]
        with nx.precision("float32"):
            params = BackboneParams.init(cfg, seed=args.seed)
            visual = pf.synthetic_visual(args.visual_frames, tuple(args.grid), cfg.dim, seed=args.seed)
        text = [int(v) for v in np.random.default_rng(args.seed).integers(0, 256, args.text_len_toy)]
        bench = {}
        for label, merge in (("no-merge", None), ("merge", MergeConfig(ratio=0.5))):
            with nx.precision("float32"):
                res = pf.measure_prefill(visual, text, params, pf.merge_variant(cfg, merge), runs=args.runs)
            bench[label] = res
        print(json.dumps(bench))
    return 0


def cmd_gradcheck(args, parser) -> int:
    from .trainer import pipeline_grad_check

    worst = 0.0
    for i in range(args.instances):
        worst = max(worst, pipeline_grad_check(args.seed + i, coords_per_param=args.coords))
    print(f"max relative error: {worst:.3e} over {args.instances} instances")
    return 0 if worst < args.tol else 1


def cmd_synth(args, parser) -> int:
    from .synth import make_corpus

    out = _out_dir(args, parser)
    manifest = make_corpus(out, args.n, args.stage, seed=args.seed, frames=args.frames,
                           size=args.size, workers=args.workers)
    print(json.dumps({"manifest": str(manifest), "samples": args.n, "stage": args.stage}))
    return 0


def cmd_train(args, parser) -> int:
    from .trainer import ModelState, StageConfig, run_stage

    out = _out_dir(args, parser)
    if args.config:
        cfg = StageConfig.from_text(Path(args.config).read_text(encoding="utf-8"))
        if cfg.stage != args.stage:
            raise ContractError(f"config is for stage {cfg.stage}, --stage is {args.stage}")
    else:
        cfg = StageConfig.toy(args.stage)
    overrides = {"seed": args.seed}
    if args.steps is not None:
        overrides["steps"] = args.steps
    if args.batch_size is not None:
        overrides["batch_size"] = args.batch_size
    cfg = dataclasses.replace(cfg, **overrides)
    if args.init:
        state = ModelState.load(args.init)
    elif args.stage == 1:
        state = ModelState.fresh(seed=args.seed)
    else:
        raise ContractError(f"stage {args.stage} needs --init with the stage-{args.stage - 1} checkpoint")
    state, log = run_stage(cfg, args.corpus, state, out_dir=out, log_every=args.log_every)
    first, last = log.records[0], log.records[-1]
    print(json.dumps({"stage": cfg.stage, "steps": len(log.records), "checkpoint": log.checkpoints[-1],
                      "hash": state.hash(), "l_gen_first": first["l_gen"], "l_gen_last": last["l_gen"]}))
    return 0


def cmd_eval(args, parser) -> int:
    from .trainer import ModelState, evaluate_toy

    state = ModelState.load(args.checkpoint)
    res = evaluate_toy(state, args.corpus, merge_enabled=not args.no_merge)
    if args.out:
        Path(args.out).write_text("\n".join(json.dumps(p) for p in res["predictions"]) + "\n")
    print(json.dumps({"accuracy": res["accuracy"], "n": res["n"]}))
    return 0


def cmd_merge_sweep(args, parser) -> int:
    from . import numerics as nx
    from .backbone import forward
    from .profiler import analytic_flops
    from .synth import corpus_specs, generate
    from .trainer import ModelState, encode, evaluate_toy, prepare
    from .synth import Sample

    state = ModelState.load(args.checkpoint) if args.checkpoint else ModelState.fresh(seed=args.seed)
    spec = corpus_specs(1, 3, args.seed, frames=args.frames, size=state.cfg.frame_size)[0]
    clip, cap = generate(spec)
    item = prepare([Sample("sweep", 3, spec, clip, cap)], state.cfg)[0]
    rows = []
    for r in args.ratios:
        merge = dataclasses.replace(state.cfg.merge, ratio=r, enabled=True,
                                    threshold=args.threshold or state.cfg.merge.threshold)
        cfg = dataclasses.replace(state.cfg, merge=merge)
        variant = ModelState(cfg, state.embed, state.backbone, state.head, state.stage_completed)
        with nx.precision("float32"), nx.no_grad():
            trace = forward(encode(item.stream, variant), item.text, variant.backbone, cfg.backbone(True))
        rep = analytic_flops(trace.visual_counts, cfg.backbone(True), trace.text_len)
        row = {"ratio": r, "visual_tokens_in": trace.visual_counts[0],
               "visual_tokens_out": trace.visual_counts[-1],
               "per_layer": " ".join(str(c) for c in trace.visual_counts),
               "macs": rep.total_macs, "flops": rep.total_flops, "accuracy": ""}
        if args.corpus:
            row["accuracy"] = evaluate_toy(variant, args.corpus)["accuracy"]
        rows.append(row)
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    _emit(buf.getvalue().rstrip("\n"), Path(args.out) if args.out else None)
    return 0


# -- parser -----------------------------------------------------------------------
def _ratio(text: str) -> float:
    v = float(text)
    if not 0.0 < v <= 1.0:
        raise argparse.ArgumentTypeError(f"ratio {v} outside (0, 1]")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="encfree", description=__doc__.splitlines()[0])
    p.add_argument("--seed", type=int, default=0, help="seed for every random choice")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("tokenize", help="tokenize a clip (PPM directory or ELVT tensor)")
    s.add_argument("input")
    s.add_argument("--preset", choices=["default", "low224", "table5"], default="default")
    s.add_argument("--tier", choices=["high", "low"], default="high")
    s.add_argument("--patch-size", type=int, default=28)
    s.add_argument("--out", help="token JSON-lines file")
    s.add_argument("--no-payload", action="store_true", help="omit pixel payloads from the output")
    s.set_defaults(func=cmd_tokenize)

    s = sub.add_parser("plan", help="hybrid-resolution plan and exact token count")
    s.add_argument("--frames", type=int)
    s.add_argument("--high", type=int, required=True)
    s.add_argument("--low", type=int, required=True)
    s.add_argument("--preset", choices=["default", "low224", "table5"], default="default")
    s.add_argument("--patch-size", type=int, default=28)
    s.add_argument("--frame-size", type=int, nargs=2, metavar=("H", "W"))
    s.add_argument("--placement", choices=["uniform", "first", "stride"], default="uniform")
    s.add_argument("--json", action="store_true", help="print the full plan instead of the count")
    s.set_defaults(func=cmd_plan)

    s = sub.add_parser("profile", help="analytic scenario table and optional prefill benchmark")
    s.add_argument("--frames", type=int, nargs="+", default=[8, 16, 32])
    s.add_argument("--emit", choices=["csv", "json", "table"], default="table")
    s.add_argument("--preset", choices=["toy", "7b"], default="7b")
    s.add_argument("--text-len", type=int, default=128)
    s.add_argument("--out")
    s.add_argument("--measure", action="store_true", help="time toy prefill with and without merging")
    s.add_argument("--visual-frames", type=int, default=64)
    s.add_argument("--grid", type=int, nargs=2, default=[8, 8])
    s.add_argument("--text-len-toy", type=int, default=16)
    s.add_argument("--runs", type=int, default=5)
    s.set_defaults(func=cmd_profile)

    s = sub.add_parser("gradcheck", help="finite-difference check of the full pipeline")
    s.add_argument("--tiny", action="store_true", help="miniature model (the only size offered)")
    s.add_argument("--instances", type=int, default=3)
    s.add_argument("--coords", type=int, default=2, help="sampled entries per parameter")
    s.add_argument("--tol", type=float, default=1e-4)
    s.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("synth", help="write a synthetic captioned corpus")
    s.add_argument("--n", type=int, default=64)
    s.add_argument("--stage", type=int, choices=[1, 2, 3], default=1)
    s.add_argument("--frames", type=int)
    s.add_argument("--size", type=int, default=32)
    s.add_argument("--workers", type=int, default=1)
    s.add_argument("--out")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("train", help="run one training stage")
    s.add_argument("--stage", type=int, choices=[1, 2, 3], required=True)
    s.add_argument("--corpus", required=True, help="manifest.jsonl of the stage's corpus")
    s.add_argument("--init", help="checkpoint directory of the previous stage")
    s.add_argument("--config", help="flat key = value stage config file")
    s.add_argument("--steps", type=int)
    s.add_argument("--batch-size", type=int)
    s.add_argument("--log-every", type=int)
    s.add_argument("--out")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="greedy exact-match QA accuracy")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--corpus", required=True)
    s.add_argument("--no-merge", action="store_true")
    s.add_argument("--out", help="per-sample predictions (JSON lines)")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("merge-sweep", help="token counts and FLOPs versus compression ratio (CSV)")
    s.add_argument("--ratios", type=_ratio, nargs="+", default=[0.1, 0.25, 0.5, 0.75, 1.0])
    s.add_argument("--frames", type=int, default=8)
    s.add_argument("--threshold", type=float, help="shallow-layer similarity threshold override")
    s.add_argument("--checkpoint")
    s.add_argument("--corpus", help="stage-3 manifest for accuracy per ratio")
    s.add_argument("--out")
    s.set_defaults(func=cmd_merge_sweep)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args, parser)
    except EncFreeError as exc:
        print(json.dumps({"error": exc.kind, "type": type(exc).__name__, "message": str(exc)}),
              file=sys.stderr)
        return 1
    except (OSError, ValueError) as exc:
        kind = "io" if isinstance(exc, OSError) else "value"
        print(json.dumps({"error": kind, "type": type(exc).__name__, "message": str(exc)}),
              file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
