"""Temporal token merging between transformer layers.

Only PATCH tokens merge, and only along time: a "tube" is the run of tokens
sharing a grid geometry and (row, col). Shallow layers use a similarity
threshold on consecutive tokens; deep layers merge the most similar adjacent
pairs until a target fraction of the incoming PATCH tokens is left.

Merged tokens take the features' arithmetic mean, the metadata and sequence
position of their earliest member (the anchor), and the summed merge count.
Survivors keep their relative order.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .errors import ContractError
from .patch_embed import FeatureSeq
from .videotok import TokenKind

_PATCH = int(TokenKind.PATCH)


@dataclass
class MergeConfig:
    threshold: float = 0.6
    ratio: float = 0.5
    switch_layer: int | None = None  # None -> depth // 2
    enabled: bool = True
    ratio_mode: str = "per_layer"  # or "cumulative": target relative to the layer-0 count

    def __post_init__(self):
        if not 0.0 < self.threshold < 1.0:
            raise ContractError(f"merge threshold must be in (0, 1), got {self.threshold}")
        if not 0.0 < self.ratio <= 1.0:
            raise ContractError(f"merge ratio must be in (0, 1], got {self.ratio}")
        if self.ratio_mode not in ("per_layer", "cumulative"):
            raise ContractError(f"unknown ratio mode {self.ratio_mode!r}")

    def boundary(self, depth: int) -> int:
        sw = depth // 2 if self.switch_layer is None else self.switch_layer
        if not 0 <= sw <= depth:
            raise ContractError(f"switch layer {sw} outside backbone depth {depth}")
        return sw

    def policy(self, layer: int, depth: int) -> str:
        return "threshold" if layer < self.boundary(depth) else "ratio"

    def to_dict(self) -> dict:
        return {"threshold": self.threshold, "ratio": self.ratio, "switch_layer": self.switch_layer,
                "enabled": self.enabled, "ratio_mode": self.ratio_mode}


@dataclass
class MergeState:
    policy: str
    incoming_patches: int
    kept_patches: int
    index: list[np.ndarray]  # per frame: 1 where the token at (t, grid cell) survives
    owner: np.ndarray  # incoming row -> output row
    chain_lengths: np.ndarray  # members per surviving PATCH token, in output order
    target: int | None = None
    shortfall: bool = False
    layer: int | None = None
    warnings: list[str] = field(default_factory=list)

    @property
    def achieved_ratio(self) -> float:
        return self.kept_patches / self.incoming_patches if self.incoming_patches else 1.0

    def matrix(self) -> np.ndarray:
        """T x G index matrix (frames must share a grid)."""
        if len({len(m) for m in self.index}) > 1:
            raise ContractError("index matrix is ragged for mixed-resolution frames")
        return np.stack(self.index) if self.index else np.zeros((0, 0), dtype=np.int64)

    def to_json(self) -> str:
        return json.dumps({
            "layer": self.layer,
            "policy": self.policy,
            "incoming_patches": self.incoming_patches,
            "kept_patches": self.kept_patches,
            "target": self.target,
            "shortfall": self.shortfall,
            "achieved_ratio": self.achieved_ratio,
            "chain_lengths": [int(v) for v in self.chain_lengths],
            "warnings": self.warnings,
        })


def write_states_jsonl(states: list[MergeState], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for st in states:
            fh.write(st.to_json() + "\n")


def _ceil_ratio(r: float, n: int) -> int:
    return math.ceil(round(r * n, 9))


def _tubes(seq: FeatureSeq) -> tuple[np.ndarray, np.ndarray]:
    """PATCH rows sorted by (geometry, row, col, t) and a flag marking tube starts."""
    pidx = seq.indices(TokenKind.PATCH)
    if len(pidx) == 0:
        return pidx, np.zeros(0, dtype=bool)
    geo = np.asarray(seq.layout, dtype=np.int64)
    t = seq.t[pidx]
    gr, gc = geo[t, 0], geo[t, 1]
    order = np.lexsort((t, seq.c[pidx], seq.r[pidx], gc, gr))
    sp = pidx[order]
    key = np.stack([gr[order], gc[order], seq.r[sp], seq.c[sp]], axis=1)
    start = np.ones(len(sp), dtype=bool)
    start[1:] = (key[1:] != key[:-1]).any(axis=1)
    return sp, start


def _cosine_rows(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    na = np.sqrt((a * a).sum(axis=-1))
    nb = np.sqrt((b * b).sum(axis=-1))
    zero = (na == 0) | (nb == 0)
    with np.errstate(divide="ignore", invalid="ignore"):
        sims = (a * b).sum(axis=-1) / (na * nb)
    sims[zero] = np.nan
    return sims, zero


def _apply_groups(seq: FeatureSeq, leader: np.ndarray, policy: str, incoming: int,
                  **extra) -> tuple[FeatureSeq, MergeState]:
    """Collapse every row onto ``leader[row]`` (its anchor) with mean features."""
    anchors = np.flatnonzero(leader == np.arange(len(seq)))
    rank = np.full(len(seq), -1, dtype=np.int64)
    rank[anchors] = np.arange(len(anchors))
    owner = rank[leader]
    feats = nx.segment_mean(seq.features, owner, len(anchors))
    counts = np.bincount(owner, weights=seq.count, minlength=len(anchors)).astype(np.int64)
    members = np.bincount(owner, minlength=len(anchors))
    out = FeatureSeq(feats, seq.kind[anchors], seq.t[anchors], seq.r[anchors], seq.c[anchors],
                     counts, seq.pos[anchors], list(seq.layout))
    is_patch = out.kind == _PATCH
    index = []
    for t, (rows, cols) in enumerate(seq.layout):
        m = np.zeros(rows * cols, dtype=np.int64)
        sel = is_patch & (out.t == t)
        m[out.r[sel] * cols + out.c[sel]] = 1
        index.append(m)
    state = MergeState(policy, incoming, int(is_patch.sum()), index, owner, members[is_patch], **extra)
    return out, state


def threshold_merge(seq: FeatureSeq, tau: float = 0.6) -> tuple[FeatureSeq, MergeState]:
    """Chain consecutive tokens of a tube while their cosine similarity exceeds ``tau``.

    Similarity is taken between consecutive raw features, not the running mean.
    The first token of every tube is always an anchor. A zero-norm feature is
    never merged and produces a warning.
    """
    if not 0.0 < tau < 1.0:
        raise ContractError(f"threshold must be in (0, 1), got {tau}")
    sp, start = _tubes(seq)
    leader = np.arange(len(seq))
    warnings: list[str] = []
    if len(sp):
        x = seq.features.data
        sims, zero = _cosine_rows(x[sp[1:]], x[sp[:-1]])
        inner = ~start[1:]
        for j in np.flatnonzero(zero & inner):
            warnings.append(f"zero-norm feature near row {int(sp[j + 1])}; kept unmerged")
        breaks = start.copy()
        breaks[1:] |= zero | ~(np.nan_to_num(sims, nan=-np.inf) > tau)
        chain_head = np.maximum.accumulate(np.where(breaks, np.arange(len(sp)), 0))
        leader[sp] = sp[chain_head]
    return _apply_groups(seq, leader, "threshold", len(sp), warnings=warnings)


def ratio_merge(seq: FeatureSeq, ratio: float = 0.5,
                reference: int | None = None) -> tuple[FeatureSeq, MergeState]:
    """Greedy pairwise merging until at most ceil(ratio * N) PATCH tokens remain.

    Each pass ranks all adjacent cluster pairs by the cosine similarity of their
    current means (rounded to 12 decimals; ties broken by the left cluster
    anchor's (t, row, col)); a cluster joins at most one merge per pass.
    Passes repeat until the target is met or every tube is a single cluster,
    in which case ``shortfall`` is set.
    ``reference`` replaces the incoming count as the ratio's base.
    """
    if not 0.0 < ratio <= 1.0:
        raise ContractError(f"ratio must be in (0, 1], got {ratio}")
    sp, start = _tubes(seq)
    n_in = len(sp)
    target = _ceil_ratio(ratio, n_in if reference is None else reference)
    xs = seq.features.data[sp]
    ts, rs, cs = seq.t[sp], seq.r[sp], seq.c[sp]
    # clusters are contiguous runs of ``sp``; a run starts wherever ``cstart`` is set
    cstart = np.ones(n_in, dtype=bool)
    n = n_in
    shortfall = False
    warnings: list[str] = []
    while n > target:
        heads = np.flatnonzero(cstart)
        # adjacent cluster pairs (k, k+1) inside one tube
        pair = np.flatnonzero(~start[heads[1:]])
        if len(pair) == 0:
            shortfall = True
            break
        sizes = np.diff(np.append(heads, n_in))
        means = np.add.reduceat(xs, heads, axis=0) / sizes[:, None]
        sims, zero = _cosine_rows(means[pair], means[pair + 1])
        ok = pair[~zero]
        if len(ok) == 0:
            shortfall = True
            warnings.append("only zero-norm pairs left; stopping early")
            break
        # rounding makes mathematically equal similarities tie exactly
        sim_key = np.array([-round(float(v), 12) for v in sims[~zero]])
        a = heads[ok]
        order = ok[np.lexsort((cs[a], rs[a], ts[a], sim_key))]
        used = np.zeros(len(heads), dtype=bool)
        for k in order:
            if used[k] or used[k + 1]:
                continue
            used[k] = used[k + 1] = True
            cstart[heads[k + 1]] = False
            n -= 1
            if n <= target:
                break
    leader = np.arange(len(seq))
    if n_in:
        leader[sp] = sp[np.maximum.accumulate(np.where(cstart, np.arange(n_in), 0))]
    return _apply_groups(seq, leader, "ratio", n_in, target=target, shortfall=shortfall,
                         warnings=warnings)


def pooling_baseline(seq: FeatureSeq, ratio: float) -> FeatureSeq:
    """Mean-pool groups of ceil(1/ratio) consecutive frames token by token.

    Ablation baseline applied right after patch embedding. Every visual token
    (markers included) is averaged with its counterpart in the other frames of
    its group; TEXT rows pass through.
    """
    if not 0.0 < ratio <= 1.0:
        raise ContractError(f"ratio must be in (0, 1], got {ratio}")
    k = math.ceil(round(1.0 / ratio, 9))
    n_frames = len(seq.layout)
    visual = seq.kind != int(TokenKind.TEXT)
    group = np.where(visual, seq.t // k, -1)
    for g in range(math.ceil(n_frames / k) if n_frames else 0):
        shapes = set(seq.layout[g * k:(g + 1) * k])
        if len(shapes) > 1:
            raise ContractError(f"frame group {g} mixes grid sizes {sorted(shapes)}")
    keys: dict[tuple, int] = {}
    leader = np.arange(len(seq))
    for i in range(len(seq)):
        if not visual[i]:
            continue
        key = (int(group[i]), int(seq.kind[i]), int(seq.r[i]), int(seq.c[i]))
        leader[i] = keys.setdefault(key, i)
    pooled, _ = _apply_groups(seq, leader, "pool", 0)
    new_t = np.where(pooled.kind != int(TokenKind.TEXT), pooled.t // k, pooled.t)
    layout = [seq.layout[g * k] for g in range(math.ceil(n_frames / k))] if n_frames else []
    return FeatureSeq(pooled.features, pooled.kind, new_t, pooled.r, pooled.c, pooled.count,
                      np.arange(len(pooled)), layout)
