"""Teacher-guided auxiliary losses.

* tube-wise alignment: frame-averaged student/teacher grids, L2-normalised per
  cell, compared with a mean squared error;
* frame-wise contrastive: symmetric InfoNCE between pooled student and teacher
  vectors with a learnable (log-parameterised) temperature;
* the generative caption loss, and the plain sum of all three.

Teacher features come from a file provider or a deterministic mock computed
from pixel statistics.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import numerics as nx
from .backbone import ForwardTrace, patch_grid, visual_tail
from .errors import ContractError, NumericError, ShapeError
from .numerics import Tensor
from .videotok import VideoClip


@dataclass
class TeacherFeatures:
    features: np.ndarray  # T x G x D_t
    grid: list[tuple[int, int]]
    provider: str = "mock"

    def __post_init__(self):
        f = np.asarray(self.features, dtype=np.float64)
        if f.ndim != 3:
            raise ShapeError(f"teacher features must be T x G x D, got {f.shape}")
        if len(self.grid) != f.shape[0]:
            raise ShapeError(f"{len(self.grid)} grid entries for {f.shape[0]} frames")
        for t, (rows, cols) in enumerate(self.grid):
            if rows * cols != f.shape[1]:
                raise ShapeError(f"frame {t}: grid {rows}x{cols} does not hold {f.shape[1]} cells")
        if not np.isfinite(f).all():
            raise NumericError("teacher features contain non-finite values")
        self.features = f
        self.grid = [tuple(int(v) for v in g) for g in self.grid]

    @property
    def dim(self) -> int:
        return self.features.shape[2]

    def save(self, directory, clip_id: str) -> Path:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        path = directory / f"teacher_{clip_id}.elvt"
        nx.save_elvt(path, self.features)
        sidecar = {"grid": [list(g) for g in self.grid], "provider": self.provider}
        path.with_suffix(".json").write_text(json.dumps(sidecar))
        return path

    @classmethod
    def load(cls, directory, clip_id: str) -> "TeacherFeatures":
        path = Path(directory) / f"teacher_{clip_id}.elvt"
        meta = json.loads(path.with_suffix(".json").read_text())
        return cls(nx.load_elvt(path), [tuple(g) for g in meta["grid"]], provider="file")


def _bins(n_in: int, n_out: int) -> list[tuple[int, int]]:
    return [((k * n_in) // n_out, -((-(k + 1) * n_in) // n_out)) for k in range(n_out)]


def adaptive_pool_matrix(n_in: int, n_out: int) -> np.ndarray:
    """n_out x n_in averaging matrix with bins [floor(k*n/m), ceil((k+1)*n/m))."""
    m = np.zeros((n_out, n_in))
    for k, (lo, hi) in enumerate(_bins(n_in, n_out)):
        m[k, lo:hi] = 1.0 / (hi - lo)
    return m


def grid_pool_matrix(src: tuple[int, int], dst: tuple[int, int]) -> np.ndarray:
    """Pool a row-major ``src`` grid onto ``dst``: (dst cells x src cells)."""
    return np.kron(adaptive_pool_matrix(src[0], dst[0]), adaptive_pool_matrix(src[1], dst[1]))


def mock_teacher(clip: VideoClip, grid: tuple[int, int], dim: int = 32, seed: int = 0) -> TeacherFeatures:
    """Pixel-grounded stand-in features: per-cell statistics through a seeded linear map.

    Each cell contributes [1, mean RGB, mean squared RGB, 2x2 sub-cell RGB means],
    so a cell's feature depends only on the pixels it covers.
    """
    rows, cols = grid
    rng = np.random.default_rng(seed)
    n_stats = 1 + 3 + 3 + 12
    proj = rng.normal(0.0, 1.0 / math.sqrt(n_stats), (n_stats, dim))
    row_bins, col_bins = _bins(clip.H, rows), _bins(clip.W, cols)
    out = np.zeros((clip.T, rows * cols, dim))
    for t, frame in enumerate(clip.frames):
        for i, (r0, r1) in enumerate(row_bins):
            for j, (c0, c1) in enumerate(col_bins):
                cell = frame[:, r0:r1, c0:c1]
                stats = [np.ones(1), cell.mean(axis=(1, 2)), (cell * cell).mean(axis=(1, 2))]
                hr, wr = _bins(cell.shape[1], 2), _bins(cell.shape[2], 2)
                for a0, a1 in hr:
                    for b0, b1 in wr:
                        stats.append(cell[:, a0:a1, b0:b1].mean(axis=(1, 2)))
                out[t, i * cols + j] = np.concatenate(stats) @ proj
    return TeacherFeatures(out, [grid] * clip.T, provider="mock")


class GuidanceHead:
    """Channel projections (student D -> teacher D_t) and the contrastive log-temperature."""

    def __init__(self, tensors: dict[str, Tensor], student_dim: int, teacher_dim: int):
        self.tensors = tensors
        self.student_dim = student_dim
        self.teacher_dim = teacher_dim

    @classmethod
    def init(cls, student_dim: int, teacher_dim: int, seed: int = 0,
             temperature: float = 10.0) -> "GuidanceHead":
        rng = np.random.default_rng(seed)
        t = {"log_tau": Tensor(math.log(temperature), requires_grad=True)}
        if student_dim != teacher_dim:
            for name in ("mse_proj", "con_proj"):
                w = rng.normal(0.0, 1.0 / math.sqrt(student_dim), (student_dim, teacher_dim))
                t[name] = Tensor(w, requires_grad=True)
        return cls(t, student_dim, teacher_dim)

    def parameters(self) -> dict[str, Tensor]:
        return dict(self.tensors)

    @property
    def log_tau(self) -> Tensor:
        return self.tensors["log_tau"]

    def project(self, x: Tensor, which: str) -> Tensor:
        name = f"{which}_proj"
        return x @ self.tensors[name] if name in self.tensors else x


def align_geometry(student: Sequence[Tensor], layout: Sequence[tuple[int, int]],
                   teacher: TeacherFeatures, head: GuidanceHead | None = None) -> tuple[Tensor, Tensor]:
    """Pool the finer grid onto the coarser one per frame and match channel widths.

    Returns (student T x G x D_t, teacher T x G x D_t).
    """
    if len(student) != len(teacher.grid) or len(layout) != len(student):
        raise ContractError(f"student has {len(student)} frames, teacher {len(teacher.grid)}")
    s_out, t_out, grids = [], [], set()
    for t, (feats, s_grid, t_grid) in enumerate(zip(student, layout, teacher.grid)):
        dst = (min(s_grid[0], t_grid[0]), min(s_grid[1], t_grid[1]))
        grids.add(dst)
        if tuple(s_grid) != dst:
            feats = Tensor(grid_pool_matrix(tuple(s_grid), dst), dtype=feats.dtype) @ feats
        tf = teacher.features[t]
        if tuple(t_grid) != dst:
            tf = grid_pool_matrix(tuple(t_grid), dst) @ tf
        if head is not None:
            feats = head.project(feats, "mse")
        if feats.shape[1] != tf.shape[1]:
            raise ShapeError(f"channel widths differ ({feats.shape[1]} vs {tf.shape[1]}); pass a head")
        s_out.append(feats)
        t_out.append(tf)
    if len(grids) > 1:
        raise ContractError("frames of one clip pool to different grids; tubes need a common grid")
    rows = s_out[0].shape[0]
    stacked = nx.reshape(nx.concat(s_out, axis=0), (len(s_out), rows, s_out[0].shape[1]))
    return stacked, Tensor(np.stack(t_out), dtype=stacked.dtype)


def tube_mse(f_vis: Tensor, f_target: Tensor) -> Tensor:
    """MSE between L2-normalised frame-averaged (tube) features; inputs are T x G x D."""
    if f_vis.shape != f_target.shape:
        raise ShapeError(f"tube_mse shapes differ: {f_vis.shape} vs {f_target.shape}")
    a = nx.l2_normalize(nx.mean(f_vis, axis=0))
    b = nx.l2_normalize(nx.mean(f_target, axis=0))
    diff = a - b
    return nx.mean(diff * diff)


def frame_contrastive(f_vis: Tensor, f_target: Tensor, log_tau: Tensor) -> Tensor:
    """Symmetric InfoNCE over B pairs with logits exp(log_tau) * <v_i, t_j> (unit vectors)."""
    if f_vis.ndim != 2 or f_vis.shape != f_target.shape:
        raise ShapeError(f"contrastive inputs must be matching B x D, got {f_vis.shape}, {f_target.shape}")
    b = f_vis.shape[0]
    if b == 0:
        raise ContractError("contrastive loss over an empty batch")
    v = nx.l2_normalize(f_vis)
    t = nx.l2_normalize(f_target)
    logits = nx.exp(log_tau) * (v @ nx.transpose(t))
    labels = np.arange(b)
    return 0.5 * nx.softmax_ce(logits, labels) + 0.5 * nx.softmax_ce(nx.transpose(logits), labels)


@dataclass
class LossBreakdown:
    l_gen: Tensor
    l_mse: Tensor
    l_con: Tensor
    total: Tensor
    log_tau: Tensor

    @property
    def temperature(self) -> float:
        return math.exp(self.log_tau.item())

    def as_dict(self) -> dict[str, float]:
        return {"l_gen": self.l_gen.item(), "l_mse": self.l_mse.item(), "l_con": self.l_con.item(),
                "total": self.total.item(), "temperature": self.temperature}


def _clip_vectors(trace: ForwardTrace, teacher: TeacherFeatures, head: GuidanceHead, unit: str,
                  source: str) -> tuple[Tensor, np.ndarray]:
    if source == "frame_token":
        _, student = visual_tail(trace)
    elif source == "pooled_patches":
        student = nx.concat([nx.mean(g, axis=0, keepdims=True) for g in patch_grid(trace)], axis=0)
    else:
        raise ContractError(f"unknown contrastive source {source!r}")
    target = teacher.features.mean(axis=1)  # frame-wise mean pooling
    if student.shape[0] != target.shape[0]:
        raise ContractError("student and teacher frame counts differ")
    if unit == "clip":
        student = nx.mean(student, axis=0, keepdims=True)
        target = target.mean(axis=0, keepdims=True)
    elif unit != "frame":
        raise ContractError(f"unknown contrastive unit {unit!r}")
    return head.project(student, "con"), target


def generative_loss(traces: Sequence[ForwardTrace], targets: Sequence[Sequence[int]]) -> Tensor:
    """Mean next-token cross-entropy over positions whose target is >= 0."""
    rows, tgts = [], []
    for trace, tgt in zip(traces, targets):
        tgt = np.asarray(tgt, dtype=np.int64)
        if trace.logits is None or len(tgt) != trace.logits.shape[0]:
            raise ContractError("caption targets must align with the trace's text positions")
        keep = np.flatnonzero(tgt >= 0)
        if len(keep):
            rows.append(nx.take(trace.logits, keep))
            tgts.append(tgt[keep])
    if not rows:
        raise ContractError("no supervised caption positions")
    return nx.softmax_ce(nx.concat(rows, axis=0), np.concatenate(tgts))


def total_loss(traces: Sequence[ForwardTrace], teachers: Sequence[TeacherFeatures],
               targets: Sequence[Sequence[int]], head: GuidanceHead,
               losses: Sequence[str] = ("gen", "mse", "con"), con_unit: str = "clip",
               con_source: str = "frame_token") -> LossBreakdown:
    """L = L_gen + L_mse + L_con; disabled terms are constant zeros (no gradient path)."""
    dtype = traces[0].hidden.features.dtype
    zero = Tensor(0.0, dtype=dtype)
    l_gen = generative_loss(traces, targets) if "gen" in losses else zero
    l_mse = l_con = zero
    if "mse" in losses:
        terms = []
        for trace, teacher in zip(traces, teachers):
            s, t = align_geometry(patch_grid(trace), trace.inputs.layout, teacher, head)
            terms.append(tube_mse(s, t))
        l_mse = terms[0] if len(terms) == 1 else nx.mean(nx.concat(
            [nx.reshape(x, (1,)) for x in terms], axis=0))
    if "con" in losses:
        pairs = [_clip_vectors(tr, te, head, con_unit, con_source) for tr, te in zip(traces, teachers)]
        student = nx.concat([p[0] for p in pairs], axis=0)
        target = Tensor(np.concatenate([p[1] for p in pairs]), dtype=dtype)
        l_con = frame_contrastive(student, target, head.log_tau)
    total = l_gen + l_mse + l_con
    return LossBreakdown(l_gen, l_mse, l_con, total, head.log_tau)
