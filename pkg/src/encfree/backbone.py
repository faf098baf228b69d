"""Toy decoder-only transformer over the mixed visual + text sequence.

Pre-norm blocks (causal multi-head attention with rotary positions, GELU MLP).
When merging is enabled, the configured merge runs on the PATCH tokens of the
block output; surviving tokens keep their original position ids.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .errors import CapacityError, ContractError
from .merge import MergeConfig, MergeState, ratio_merge, threshold_merge
from .numerics import Tensor
from .patch_embed import FeatureSeq, load_param_dir, save_param_dir
from .videotok import VOCAB_SIZE, TokenKind

_TEXT = int(TokenKind.TEXT)


@dataclass
class BackboneConfig:
    depth: int = 8
    dim: int = 128
    heads: int = 4
    ff_dim: int = 512
    vocab: int = VOCAB_SIZE
    max_len: int = 32768
    merge: MergeConfig = field(default_factory=lambda: MergeConfig(enabled=False))
    rope_base: float = 10000.0

    def __post_init__(self):
        if self.dim % self.heads:
            raise ContractError(f"width {self.dim} not divisible by {self.heads} heads")
        if (self.dim // self.heads) % 2:
            raise ContractError("rotary positions need an even head width")
        if self.depth < 2:
            raise ContractError("depth must be >= 2 so both merge policies can run")

    def to_dict(self) -> dict:
        return {"depth": self.depth, "dim": self.dim, "heads": self.heads, "ff_dim": self.ff_dim,
                "vocab": self.vocab, "max_len": self.max_len, "rope_base": self.rope_base,
                "merge": self.merge.to_dict()}

    @classmethod
    def from_dict(cls, d: dict) -> "BackboneConfig":
        d = dict(d)
        d["merge"] = MergeConfig(**d.get("merge", {"enabled": False}))
        return cls(**d)


class BackboneParams:
    def __init__(self, tensors: dict[str, Tensor]):
        self.tensors = tensors

    @classmethod
    def init(cls, cfg: BackboneConfig, seed: int = 0) -> "BackboneParams":
        rng = np.random.default_rng(seed)
        d, f = cfg.dim, cfg.ff_dim
        t: dict[str, np.ndarray] = {"tok_emb": rng.normal(0.0, 0.1, (cfg.vocab, d))}
        for layer in range(cfg.depth):
            p = f"l{layer}."
            t[p + "ln1.g"] = np.ones(d)
            t[p + "ln1.b"] = np.zeros(d)
            for name in ("wq", "wk", "wv", "wo"):
                t[p + name] = rng.normal(0.0, 1.0 / math.sqrt(d), (d, d))
            t[p + "ln2.g"] = np.ones(d)
            t[p + "ln2.b"] = np.zeros(d)
            t[p + "w1"] = rng.normal(0.0, 1.0 / math.sqrt(d), (d, f))
            t[p + "b1"] = np.zeros(f)
            t[p + "w2"] = rng.normal(0.0, 1.0 / math.sqrt(f), (f, d))
            t[p + "b2"] = np.zeros(d)
        t["lnf.g"] = np.ones(d)
        t["lnf.b"] = np.zeros(d)
        t["head"] = rng.normal(0.0, 0.02, (d, cfg.vocab))
        return cls({k: Tensor(v, requires_grad=True) for k, v in t.items()})

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def parameters(self) -> dict[str, Tensor]:
        return dict(self.tensors)

    def save(self, directory, cfg: BackboneConfig) -> None:
        save_param_dir(directory, self.tensors, {"backbone": cfg.to_dict()})

    @classmethod
    def load(cls, directory) -> tuple["BackboneParams", BackboneConfig]:
        tensors, config = load_param_dir(directory)
        return cls(tensors), BackboneConfig.from_dict(config["backbone"])


@dataclass
class ForwardTrace:
    counts: list[int]  # sequence length entering each layer, plus the final output length
    visual_counts: list[int]
    text_len: int
    hidden: FeatureSeq  # final-layer tokens (visual and text)
    logits: Tensor | None  # one row per TEXT position
    states: list[MergeState | None]
    origin: np.ndarray  # input row -> final row
    inputs: FeatureSeq  # layer-0 sequence (metadata reference)
    cache: list[tuple[np.ndarray, np.ndarray]] | None = None
    counters: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps({"counts": self.counts, "visual_counts": self.visual_counts,
                           "text_len": self.text_len, "counters": self.counters,
                           "kept_patches": [s.kept_patches if s else None for s in self.states]})


# -- attention helpers --------------------------------------------------------
def rope_tables(pos: np.ndarray, head_dim: int, base: float, dtype) -> tuple[np.ndarray, np.ndarray]:
    half = head_dim // 2
    inv = base ** (-np.arange(half, dtype=np.float64) / half)
    ang = np.asarray(pos, dtype=np.float64)[:, None] * inv[None, :]
    cos = np.concatenate([np.cos(ang), np.cos(ang)], axis=1).astype(dtype)
    sin = np.concatenate([np.sin(ang), np.sin(ang)], axis=1).astype(dtype)
    return cos, sin


def apply_rope(x: Tensor, cos: np.ndarray, sin: np.ndarray) -> Tensor:
    """Rotate (heads, N, dh) features by position; cos/sin are (N, dh)."""
    dh = x.shape[-1]
    half = dh // 2
    perm = np.concatenate([np.arange(half, dh), np.arange(half)])
    sign = np.concatenate([-np.ones(half), np.ones(half)]).astype(x.dtype)
    rotated = nx.take(x, perm, axis=-1) * Tensor(sign, dtype=x.dtype)
    return x * Tensor(cos, dtype=x.dtype) + rotated * Tensor(sin, dtype=x.dtype)


def _heads(x: Tensor, heads: int) -> Tensor:
    n, d = x.shape
    return nx.transpose(nx.reshape(x, (n, heads, d // heads)), (1, 0, 2))


def _block(x: Tensor, pos: np.ndarray, params: BackboneParams, layer: int, cfg: BackboneConfig,
           past: tuple[np.ndarray, np.ndarray] | None = None,
           cache: list | None = None) -> Tensor:
    p = f"l{layer}."
    n = x.shape[0]
    h, dh = cfg.heads, cfg.dim // cfg.heads
    a_in = nx.layer_norm(x, params[p + "ln1.g"], params[p + "ln1.b"])
    cos, sin = rope_tables(pos, dh, cfg.rope_base, x.dtype)
    q = apply_rope(_heads(a_in @ params[p + "wq"], h), cos, sin)
    k = apply_rope(_heads(a_in @ params[p + "wk"], h), cos, sin)
    v = _heads(a_in @ params[p + "wv"], h)
    if cache is not None:
        cache.append((k.data, v.data))
    mask = np.tril(np.ones((n, n), dtype=bool))
    if past is not None:
        k = nx.concat([Tensor(past[0], dtype=x.dtype), k], axis=1)
        v = nx.concat([Tensor(past[1], dtype=x.dtype), v], axis=1)
        mask = np.concatenate([np.ones((n, past[0].shape[1]), dtype=bool), mask], axis=1)
    scores = nx.matmul(q, nx.transpose(k, (0, 2, 1))) * (1.0 / math.sqrt(dh))
    attn = nx.softmax(scores, mask=mask)
    ctx = nx.reshape(nx.transpose(nx.matmul(attn, v), (1, 0, 2)), (n, cfg.dim))
    x = x + ctx @ params[p + "wo"]
    m_in = nx.layer_norm(x, params[p + "ln2.g"], params[p + "ln2.b"])
    hidden = nx.gelu(m_in @ params[p + "w1"] + params[p + "b1"])
    return x + (hidden @ params[p + "w2"] + params[p + "b2"])


def _text_seq(visual: FeatureSeq | None, text: list[int], params: BackboneParams,
              cfg: BackboneConfig) -> FeatureSeq:
    if any(not 0 <= tok < cfg.vocab for tok in text):
        raise ContractError(f"text token outside vocabulary of size {cfg.vocab}")
    parts, n_vis = [], 0
    if visual is not None and len(visual):
        parts.append(visual.features)
        n_vis = len(visual)
    if text:
        parts.append(nx.take(params["tok_emb"], np.asarray(text, dtype=np.int64)))
    if not parts:
        raise ContractError("forward needs at least one token")
    feats = nx.concat(parts, axis=0) if len(parts) > 1 else parts[0]
    nt = len(text)
    start = int(visual.pos.max()) + 1 if n_vis else 0
    if n_vis:
        v = visual
        meta = [np.concatenate([getattr(v, k), fill]) for k, fill in
                (("kind", np.full(nt, _TEXT)), ("t", np.full(nt, -1)), ("r", np.full(nt, -1)),
                 ("c", np.full(nt, -1)), ("count", np.ones(nt, dtype=np.int64)),
                 ("pos", start + np.arange(nt)))]
        layout = list(v.layout)
    else:
        meta = [np.full(nt, _TEXT), np.full(nt, -1), np.full(nt, -1), np.full(nt, -1),
                np.ones(nt, dtype=np.int64), np.arange(nt)]
        layout = []
    return FeatureSeq(feats, *meta, layout=layout)


def forward(visual: FeatureSeq | None, text: list[int], params: BackboneParams,
            cfg: BackboneConfig, keep_cache: bool = False) -> ForwardTrace:
    """Prefill over visual tokens followed by ``text``; logits for every TEXT position."""
    seq = _text_seq(visual, list(text), params, cfg)
    if len(seq) > cfg.max_len:
        raise CapacityError(f"sequence of {len(seq)} tokens exceeds max length {cfg.max_len}")
    inputs = seq
    origin = np.arange(len(seq))
    counts, vis_counts, states = [], [], []
    cache: list | None = [] if keep_cache else None
    merging = cfg.merge.enabled
    base = inputs.n_kind(TokenKind.PATCH)
    for layer in range(cfg.depth):
        counts.append(len(seq))
        vis_counts.append(len(seq) - seq.n_kind(TokenKind.TEXT))
        seq = seq.replace(_block(seq.features, seq.pos, params, layer, cfg, cache=cache))
        state = None
        if merging and seq.n_kind(TokenKind.PATCH):
            if cfg.merge.policy(layer, cfg.depth) == "threshold":
                seq, state = threshold_merge(seq, cfg.merge.threshold)
            else:
                ref = base if cfg.merge.ratio_mode == "cumulative" else None
                seq, state = ratio_merge(seq, cfg.merge.ratio, reference=ref)
            state.layer = layer
            origin = state.owner[origin]
        states.append(state)
    counts.append(len(seq))
    vis_counts.append(len(seq) - seq.n_kind(TokenKind.TEXT))
    text_rows = seq.indices(TokenKind.TEXT)
    logits = None
    if len(text_rows):
        final = nx.layer_norm(nx.take(seq.features, text_rows), params["lnf.g"], params["lnf.b"])
        logits = final @ params["head"]
    return ForwardTrace(counts, vis_counts, len(text_rows), seq, logits, states, origin, inputs,
                        cache)


def decode_step(trace: ForwardTrace, token: int, params: BackboneParams,
                cfg: BackboneConfig) -> np.ndarray:
    """Append one text token using the trace's key/value cache; returns its logits.

    The cache holds each layer's (merged) keys and values, so decoding attends
    to the compacted sequence.
    """
    if trace.cache is None:
        raise ContractError("forward(..., keep_cache=True) is required before decoding")
    pos = np.array([int(trace.hidden.pos.max()) + 1])
    with nx.no_grad():
        x = nx.take(params["tok_emb"], np.array([token]))
        for layer in range(cfg.depth):
            past = trace.cache[layer]
            fresh: list = []
            x = _block(x, pos, params, layer, cfg, past=past, cache=fresh)
            k, v = fresh[0]
            trace.cache[layer] = (np.concatenate([past[0], k], axis=1),
                                  np.concatenate([past[1], v], axis=1))
        final = nx.layer_norm(x, params["lnf.g"], params["lnf.b"])
        logits = (final @ params["head"]).data[0]
    trace.hidden = _extend_meta(trace.hidden, pos, x)
    return logits


def _extend_meta(hid: FeatureSeq, pos: np.ndarray, x: Tensor) -> FeatureSeq:
    feats = Tensor(np.concatenate([hid.features.data, x.data]), dtype=x.dtype)
    return FeatureSeq(feats, np.append(hid.kind, _TEXT), np.append(hid.t, -1), np.append(hid.r, -1),
                      np.append(hid.c, -1), np.append(hid.count, 1), np.append(hid.pos, pos),
                      list(hid.layout))


def visual_tail(trace: ForwardTrace) -> tuple[list[Tensor], Tensor]:
    """Final-layer surviving PATCH rows grouped per frame, and the FRAME-token vectors."""
    hid = trace.hidden
    frames = hid.indices(TokenKind.FRAME_MARK)
    if len(frames) == 0:
        raise ContractError("trace has no visual tokens")
    frames = frames[np.argsort(hid.t[frames], kind="stable")]
    groups = []
    for t in range(len(hid.layout)):
        rows = np.flatnonzero((hid.kind == int(TokenKind.PATCH)) & (hid.t == t))
        groups.append(nx.take(hid.features, rows))
    return groups, nx.take(hid.features, frames)


def patch_grid(trace: ForwardTrace) -> list[Tensor]:
    """Dense per-frame (rows*cols x D) patch features; merged tokens fill every member cell."""
    inp, hid = trace.inputs, trace.hidden
    out = []
    for t, (rows, cols) in enumerate(inp.layout):
        sel = np.flatnonzero((inp.kind == int(TokenKind.PATCH)) & (inp.t == t))
        order = sel[np.argsort(inp.r[sel] * cols + inp.c[sel], kind="stable")]
        if len(order) != rows * cols:
            raise ContractError(f"frame {t}: {len(order)} patches for a {rows}x{cols} grid")
        out.append(nx.take(hid.features, trace.origin[order]))
    return out
