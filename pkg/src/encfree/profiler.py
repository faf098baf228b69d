"""Prefill cost model, instrumented verification and wall-clock benchmarks.

Cost accounting per decoder layer over N tokens (multiply-adds):

    attention projections  4 * N * D^2
    attention scores       2 * N^2 * D      (QK^T and AV)
    feed-forward           2 * N * D * D_ff

plus N_text * D * V for the output head. FLOPs are twice the multiply-adds.
"""

from __future__ import annotations

import csv
import io
import json
import math
import statistics
import time
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from . import numerics as nx
from .backbone import BackboneConfig, BackboneParams, decode_step, forward
from .errors import ContractError
from .hybridres import plan as hybrid_plan
from .merge import MergeConfig
from .numerics import Tensor
from .patch_embed import FeatureSeq
from .videotok import ResolutionPolicy, TokenKind

# analytic-only width/depth preset shaped like a 7B decoder (Qwen2-7B public config)
PRESETS = {
    "toy": BackboneConfig(depth=4, dim=64, heads=4, ff_dim=256),
    "7b": BackboneConfig(depth=28, dim=3584, heads=28, ff_dim=18944, vocab=152064, max_len=1 << 20),
}


@dataclass
class LayerFlops:
    layer: int
    tokens: int
    attn_proj: int
    attn_scores: int
    ffn: int

    @property
    def macs(self) -> int:
        return self.attn_proj + self.attn_scores + self.ffn


def layer_macs(n: int, dim: int, ff_dim: int) -> tuple[int, int, int]:
    return 4 * n * dim * dim, 2 * n * n * dim, 2 * n * dim * ff_dim


@dataclass
class FlopsReport:
    scenario: str
    layers: list[LayerFlops]
    text_len: int
    head_macs: int
    encoder_macs: int = 0
    visual_tokens: int = 0
    measured_macs: int | None = None
    wall_times: list[float] | None = None

    @property
    def total_macs(self) -> int:
        return sum(l.macs for l in self.layers) + self.head_macs + self.encoder_macs

    @property
    def total_flops(self) -> int:
        return 2 * self.total_macs

    def to_dict(self) -> dict:
        return {
            "scenario": self.scenario,
            "visual_tokens": self.visual_tokens,
            "text_len": self.text_len,
            "layers": [dict(asdict(l), macs=l.macs) for l in self.layers],
            "head_macs": self.head_macs,
            "encoder_macs": self.encoder_macs,
            "total_macs": self.total_macs,
            "total_flops": self.total_flops,
            "measured_macs": self.measured_macs,
            "wall_times": self.wall_times,
        }


def analytic_flops(visual_counts: Sequence[int], cfg: BackboneConfig, text_len: int,
                   scenario: str = "encoder-free", encoder_macs: int = 0) -> FlopsReport:
    """Closed-form prefill cost given the visual token count entering each layer.

    ``visual_counts`` may carry one trailing entry (the final output length, as
    in ``ForwardTrace.visual_counts``); only the first ``depth`` are used.
    """
    counts = list(visual_counts)
    if len(counts) < cfg.depth:
        raise ContractError(f"{len(counts)} per-layer counts for depth {cfg.depth}")
    layers = []
    for l, nv in enumerate(counts[:cfg.depth]):
        n = int(nv) + text_len
        layers.append(LayerFlops(l, n, *layer_macs(n, cfg.dim, cfg.ff_dim)))
    return FlopsReport(scenario, layers, text_len, text_len * cfg.dim * cfg.vocab, encoder_macs,
                       int(counts[0]))


@dataclass
class MergeSchedule:
    """Analytic stand-in for the merge cascade.

    ``shallow_keep`` is the fraction of PATCH tokens the first threshold pass
    keeps (content dependent in reality; later threshold passes are assumed
    idempotent). Deep layers keep ``ratio`` of their input per layer. Neither
    can go below one token per tube.
    """

    ratio: float = 0.5
    shallow_keep: float = 0.5
    switch_layer: int | None = None
    ratio_mode: str = "per_layer"


def simulate_schedule(n_patches: int, n_markers: int, n_tubes: int, depth: int,
                      sched: MergeSchedule | None) -> list[int]:
    """Visual tokens entering each layer, plus the final output count (depth + 1 entries)."""
    counts = [n_patches + n_markers]
    if sched is None:
        return counts * (depth + 1)
    sw = depth // 2 if sched.switch_layer is None else sched.switch_layer
    patches = n_patches
    shallow_done = False
    for layer in range(depth):
        if layer < sw:
            if not shallow_done:
                patches = max(min(n_tubes, patches), math.ceil(round(sched.shallow_keep * patches, 9)))
                shallow_done = True
        else:
            base = n_patches if sched.ratio_mode == "cumulative" else patches
            patches = max(min(n_tubes, patches), math.ceil(round(sched.ratio * base, 9)))
        counts.append(patches + n_markers)
    return counts


@dataclass
class Scenario:
    label: str
    merge: MergeSchedule | None = None
    n_high: int | None = None  # None: every frame HIGH
    encoder_based: bool = False


def default_scenarios() -> list[Scenario]:
    return [
        Scenario("encoder-based-baseline", encoder_based=True),
        Scenario("encoder-free"),
        Scenario("+merge", MergeSchedule()),
        Scenario("+merge+hr", MergeSchedule(), n_high=-1),  # -1: half the frames HIGH
    ]


def _visual_structure(frames: int, n_high: int, policy: ResolutionPolicy,
                      frame_size: tuple[int, int] | None) -> tuple[int, int, int]:
    hp = hybrid_plan(frames, n_high, frames - n_high, policy, frame_size)
    patches = sum(r * c for r, c in hp.grids)
    tubes = sum(r * c for r, c in set(hp.grids))
    return patches, hp.predicted_tokens - patches, tubes


@dataclass
class ScenarioTableConfig:
    cfg: BackboneConfig = field(default_factory=lambda: PRESETS["7b"])
    text_len: int = 128
    policy: ResolutionPolicy = field(default_factory=lambda: ResolutionPolicy.preset("low224"))
    frame_size: tuple[int, int] | None = None
    encoder_tokens_per_frame: int = 144
    encoder_macs_per_frame: float | None = None  # None: calibrate to ``calibration``
    calibration: tuple[int, float] = (32, 75.0 / 260.0)  # frames, encoder-free / encoder-based


def scenario_report(frames: int, sc: Scenario, tc: ScenarioTableConfig,
                    encoder_macs_per_frame: float = 0.0) -> FlopsReport:
    cfg = tc.cfg
    if sc.encoder_based:
        counts = [frames * tc.encoder_tokens_per_frame] * (cfg.depth + 1)
        return analytic_flops(counts, cfg, tc.text_len, sc.label,
                              int(round(frames * encoder_macs_per_frame)))
    n_high = frames if sc.n_high is None else (frames // 2 if sc.n_high < 0 else sc.n_high)
    patches, markers, tubes = _visual_structure(frames, n_high, tc.policy, tc.frame_size)
    counts = simulate_schedule(patches, markers, tubes, cfg.depth, sc.merge)
    return analytic_flops(counts, cfg, tc.text_len, sc.label)


def calibrate_encoder_cost(tc: ScenarioTableConfig) -> float:
    """Per-frame encoder multiply-adds making encoder-free/encoder-based hit the anchor ratio."""
    frames, ratio = tc.calibration
    free = scenario_report(frames, Scenario("encoder-free"), tc).total_macs
    llm = scenario_report(frames, Scenario("b", encoder_based=True), tc).total_macs
    per_frame = (free / ratio - llm) / frames
    if per_frame < 0:
        raise ContractError("calibration anchor implies a negative encoder cost")
    return per_frame


def scenario_table(frame_counts: Sequence[int], scenarios: Sequence[Scenario] | None = None,
                   tc: ScenarioTableConfig | None = None) -> list[dict]:
    """Rows (frames, scenario, tokens, TFLOPs, reductions) in the given scenario order."""
    tc = tc or ScenarioTableConfig()
    scenarios = list(scenarios) if scenarios is not None else default_scenarios()
    enc = tc.encoder_macs_per_frame
    if enc is None and any(s.encoder_based for s in scenarios):
        enc = calibrate_encoder_cost(tc)
    rows = []
    for frames in frame_counts:
        reports = [scenario_report(frames, sc, tc, enc or 0.0) for sc in scenarios]
        free = next((r.total_flops for r in reports if r.scenario == "encoder-free"), None)
        prev = None
        for rep in reports:
            rows.append({
                "frames": frames,
                "scenario": rep.scenario,
                "visual_tokens": rep.visual_tokens,
                "tflops": rep.total_flops / 1e12,
                "reduction_vs_encoder_free": None if free is None else 1.0 - rep.total_flops / free,
                "reduction_vs_previous": None if prev is None else 1.0 - rep.total_flops / prev,
            })
            prev = rep.total_flops
    return rows


def emit(rows: list[dict], fmt: str = "table") -> str:
    if not rows:
        return ""
    keys = list(rows[0])
    if fmt == "json":
        return "\n".join(json.dumps(r) for r in rows)
    if fmt == "csv":
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=keys, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
        return buf.getvalue().rstrip("\n")
    if fmt != "table":
        raise ContractError(f"unknown output format {fmt!r}")

    def cell(v):
        if v is None:
            return "-"
        return f"{v:.4g}" if isinstance(v, float) else str(v)

    body = [[cell(r[k]) for k in keys] for r in rows]
    widths = [max(len(k), *(len(b[i]) for b in body)) for i, k in enumerate(keys)]
    lines = ["  ".join(k.ljust(w) for k, w in zip(keys, widths))]
    lines += ["  ".join(v.rjust(w) for v, w in zip(b, widths)) for b in body]
    return "\n".join(lines)


# -- measurement ---------------------------------------------------------------
def synthetic_visual(frames: int, grid: tuple[int, int], dim: int, seed: int = 0,
                     dtype=np.float32) -> FeatureSeq:
    """Stand-in embedded visual sequence with the tokenizer's layout and random features."""
    rows, cols = grid
    kind, t, r, c = [], [], [], []
    for f in range(frames):
        kind.append(int(TokenKind.FRAME_MARK)); t.append(f); r.append(-1); c.append(-1)
        for i in range(rows):
            for j in range(cols):
                kind.append(int(TokenKind.PATCH)); t.append(f); r.append(i); c.append(j)
            kind.append(int(TokenKind.LINE_MARK)); t.append(f); r.append(i); c.append(-1)
    n = len(kind)
    feats = np.random.default_rng(seed).normal(size=(n, dim)).astype(dtype)
    return FeatureSeq(Tensor(feats, dtype=dtype), kind, t, r, c, np.ones(n, dtype=np.int64),
                      np.arange(n), [grid] * frames)


def count_forward_macs(visual: FeatureSeq | None, text: list[int], params: BackboneParams,
                       cfg: BackboneConfig) -> tuple[int, FlopsReport]:
    """Instrumented multiply-adds of one prefill and the analytic report for the same trace."""
    with nx.no_grad(), nx.instrument() as counter:
        trace = forward(visual, text, params, cfg)
    report = analytic_flops(trace.visual_counts, cfg, len(text))
    report.measured_macs = counter.macs
    return counter.macs, report


def measure_prefill(visual: FeatureSeq | None, text: list[int], params: BackboneParams,
                    cfg: BackboneConfig, runs: int = 5, warmup: int = 2) -> dict:
    """Single-threaded prefill timing (median of ``runs`` after ``warmup``) plus TTFT."""
    if runs < 1:
        raise ContractError("need at least one timed run")
    times, ttfts = [], []
    with threadpool_limits(limits=1), nx.no_grad():
        for i in range(warmup + runs):
            t0 = time.perf_counter()
            trace = forward(visual, text, params, cfg, keep_cache=True)
            t1 = time.perf_counter()
            tok = int(np.argmax(trace.logits.data[-1])) if trace.logits is not None else 0
            decode_step(trace, tok, params, cfg)
            t2 = time.perf_counter()
            if i >= warmup:
                times.append(t1 - t0)
                ttfts.append(t2 - t0)
    macs, report = count_forward_macs(visual, text, params, cfg)
    median = statistics.median(times)
    out = {
        "median_prefill_s": median,
        "prefill_times_s": times,
        "median_ttft_s": statistics.median(ttfts),
        "measured_macs": macs,
        "analytic_macs": report.total_macs,
        "rel_error": abs(report.total_macs - macs) / macs if macs else 0.0,
        "visual_tokens": report.visual_tokens,
        "advisory": None,
    }
    if median < 1e-3:
        out["advisory"] = "prefill below 1 ms timer resolution; scale up the input"
    return out


def merge_variant(cfg: BackboneConfig, merge: MergeConfig | None) -> BackboneConfig:
    d = cfg.to_dict()
    d["merge"] = (merge or MergeConfig(enabled=False)).to_dict()
    return BackboneConfig.from_dict(d)
