"""Hybrid-resolution planning: which frames get the HIGH tier, and the exact token budget."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

from .errors import ContractError
from .videotok import (ResolutionPolicy, Tier, TokenStream, VideoClip, _resize_frame, resized_size,
                       tokenize_frames, tokens_per_frame)

PLACEMENTS = ("uniform", "first", "stride")


def high_positions(T: int, n_high: int, placement: str = "uniform") -> list[int]:
    """Frame indices assigned the HIGH tier; frame 0 is HIGH whenever n_high >= 1."""
    if not 0 <= n_high <= T:
        raise ContractError(f"cannot place {n_high} high-resolution frames among {T}")
    if n_high == 0:
        return []
    if placement == "uniform":
        return [(i * T) // n_high for i in range(n_high)]
    if placement == "first":
        return list(range(n_high))
    if placement == "stride":
        # every ceil(T/n)-th frame, topped up with the earliest unused frames
        step = math.ceil(T / n_high)
        chosen = list(range(0, T, step))[:n_high]
        rest = [i for i in range(T) if i not in set(chosen)]
        return sorted(chosen + rest[:n_high - len(chosen)])
    raise ContractError(f"unknown placement {placement!r}")


@dataclass
class HybridPlan:
    tiers: list[Tier]
    frame_size: tuple[int, int]
    policy: ResolutionPolicy
    placement: str
    grids: list[tuple[int, int]]
    predicted_tokens: int

    @property
    def T(self) -> int:
        return len(self.tiers)

    @property
    def n_high(self) -> int:
        return sum(t is Tier.HIGH for t in self.tiers)

    @property
    def n_low(self) -> int:
        return self.T - self.n_high

    def to_dict(self) -> dict:
        return {
            "frames": self.T,
            "n_high": self.n_high,
            "n_low": self.n_low,
            "tiers": [t.value for t in self.tiers],
            "frame_size": list(self.frame_size),
            "placement": self.placement,
            "patch_size": self.policy.patch_size,
            "max_edge_high": self.policy.max_edge_high,
            "max_edge_low": self.policy.max_edge_low,
            "grids": [list(g) for g in self.grids],
            "predicted_tokens": self.predicted_tokens,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, d: dict) -> "HybridPlan":
        policy = ResolutionPolicy(d["patch_size"], d["max_edge_high"], d["max_edge_low"])
        return cls([Tier(v) for v in d["tiers"]], tuple(d["frame_size"]), policy, d["placement"],
                   [tuple(g) for g in d["grids"]], d["predicted_tokens"])


def plan(T: int, n_high: int, n_low: int, policy: ResolutionPolicy | None = None,
         frame_size: tuple[int, int] | None = None, placement: str = "uniform") -> HybridPlan:
    """Assign tiers and predict the visual token count exactly.

    ``frame_size`` is the source (H, W); it defaults to a square frame at the
    HIGH edge limit.
    """
    policy = policy or ResolutionPolicy()
    if n_high < 0 or n_low < 0 or n_high + n_low != T:
        raise ContractError(f"n_high ({n_high}) + n_low ({n_low}) must equal T ({T})")
    if frame_size is None:
        frame_size = (policy.max_edge_high, policy.max_edge_high)
    high = set(high_positions(T, n_high, placement))
    tiers = [Tier.HIGH if i in high else Tier.LOW for i in range(T)]
    p = policy.patch_size
    grids = []
    for tier in tiers:
        h, w = resized_size(frame_size[0], frame_size[1], policy.max_edge(tier), p)
        grids.append((h // p, w // p))
    total = sum(tokens_per_frame(r, c) for r, c in grids)
    return HybridPlan(tiers, tuple(frame_size), policy, placement, grids, total)


def apply(hplan: HybridPlan, clip: VideoClip) -> TokenStream:
    """Resize each frame to its tier and tokenize in temporal order."""
    if hplan.T != clip.T:
        raise ContractError(f"plan covers {hplan.T} frames, clip has {clip.T}")
    if (clip.H, clip.W) != tuple(hplan.frame_size):
        raise ContractError(f"plan made for {hplan.frame_size} frames, clip is {(clip.H, clip.W)}")
    p = hplan.policy.patch_size
    frames = []
    for frame, (rows, cols) in zip(clip.frames, hplan.grids):
        frames.append(_resize_frame(frame, rows * p, cols * p))
    stream = tokenize_frames(frames, p)
    if len(stream) != hplan.predicted_tokens:
        raise ContractError(f"plan predicted {hplan.predicted_tokens} tokens, stream has {len(stream)}")
    return stream
