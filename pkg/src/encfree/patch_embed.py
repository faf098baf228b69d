"""Video patch embedding: linear pixel projection plus marker cross-attention.

FRAME markers attend over all patch embeddings of their frame, LINE markers over
the patches of their row. Marker outputs are residual updates of the learnable
marker embeddings; patch embeddings pass through unchanged.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import numerics as nx
from .errors import ContractError, ShapeError, StructureError
from .numerics import Tensor
from .videotok import PATCH_SIZE, TokenKind, TokenStream, detokenize_layout


@dataclass
class FeatureSeq:
    """N x D features with per-token metadata that survives merging."""

    features: Tensor
    kind: np.ndarray
    t: np.ndarray
    r: np.ndarray
    c: np.ndarray
    count: np.ndarray
    pos: np.ndarray
    layout: list[tuple[int, int]] = field(default_factory=list)

    def __post_init__(self):
        n = self.features.shape[0]
        for name in ("kind", "t", "r", "c", "count", "pos"):
            arr = np.asarray(getattr(self, name), dtype=np.int64)
            if arr.shape != (n,):
                raise ShapeError(f"FeatureSeq.{name} has {arr.shape[0]} entries for {n} rows")
            setattr(self, name, arr)
        if n and self.count.min() < 1:
            raise ShapeError("merge counts must be >= 1")

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def indices(self, kind: TokenKind) -> np.ndarray:
        return np.flatnonzero(self.kind == int(kind))

    def n_kind(self, kind: TokenKind) -> int:
        return int((self.kind == int(kind)).sum())

    def replace(self, features: Tensor) -> "FeatureSeq":
        return FeatureSeq(features, self.kind, self.t, self.r, self.c, self.count, self.pos,
                          list(self.layout))

    def subset(self, rows: np.ndarray, features: Tensor | None = None) -> "FeatureSeq":
        feats = features if features is not None else nx.take(self.features, rows)
        return FeatureSeq(feats, self.kind[rows], self.t[rows], self.r[rows], self.c[rows],
                          self.count[rows], self.pos[rows], list(self.layout))


class PatchEmbedParams:
    """Projection 3P^2 -> D, LINE/FRAME embeddings and one cross-attention layer."""

    NAMES = ("proj", "bias", "line", "frame", "wq", "wk", "wv", "wo")

    def __init__(self, patch_size: int, dim: int, heads: int, tensors: dict[str, Tensor]):
        if dim % heads:
            raise ContractError(f"embedding width {dim} not divisible by {heads} heads")
        self.patch_size = patch_size
        self.dim = dim
        self.heads = heads
        self.tensors = tensors

    @classmethod
    def init(cls, patch_size: int = PATCH_SIZE, dim: int = 128, heads: int = 4,
             seed: int = 0) -> "PatchEmbedParams":
        rng = np.random.default_rng(seed)
        fan_in = 3 * patch_size * patch_size
        t = {
            "proj": rng.normal(0.0, 1.0 / math.sqrt(fan_in), (fan_in, dim)),
            "bias": np.zeros(dim),
            "line": np.zeros(dim),
            "frame": np.zeros(dim),
        }
        for name in ("wq", "wk", "wv", "wo"):
            t[name] = rng.normal(0.0, 1.0 / math.sqrt(dim), (dim, dim))
        return cls(patch_size, dim, heads, {k: Tensor(v, requires_grad=True) for k, v in t.items()})

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def parameters(self) -> dict[str, Tensor]:
        return dict(self.tensors)

    def n_params(self) -> int:
        return sum(p.size for p in self.tensors.values())

    def config(self) -> dict:
        return {"patch_size": self.patch_size, "dim": self.dim, "heads": self.heads}

    def save(self, directory) -> None:
        save_param_dir(directory, self.tensors, {"patch_embed": self.config()})

    @classmethod
    def load(cls, directory) -> "PatchEmbedParams":
        tensors, config = load_param_dir(directory)
        cfg = config["patch_embed"]
        return cls(cfg["patch_size"], cfg["dim"], cfg["heads"], tensors)


def save_param_dir(directory, tensors: dict[str, Tensor], config: dict) -> None:
    """Directory of ELVT tensors plus ``manifest.json`` (names, shapes, config echo)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    for name in sorted(tensors):
        fname = name.replace("/", "__") + ".elvt"
        nx.save_elvt(directory / fname, tensors[name].data)
        entries.append({"name": name, "shape": list(tensors[name].shape), "file": fname})
    manifest = {"config": config, "tensors": entries}
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))


def load_param_dir(directory) -> tuple[dict[str, Tensor], dict]:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    tensors = {}
    for entry in manifest["tensors"]:
        arr = nx.load_elvt(directory / entry["file"])
        if list(arr.shape) != entry["shape"]:
            raise ShapeError(f"{entry['name']}: manifest shape {entry['shape']} != file {arr.shape}")
        tensors[entry["name"]] = Tensor(arr.astype(nx.get_dtype()), requires_grad=True)
    return tensors, manifest["config"]


def embed(stream: TokenStream, params: PatchEmbedParams) -> FeatureSeq:
    """Project PATCH payloads; initialise LINE/FRAME rows from their learnable embeddings."""
    recs = [rec for rec in stream.records if rec.kind is not TokenKind.TEXT]
    layout = detokenize_layout(stream)
    width = 3 * params.patch_size ** 2
    patches, lines, frames = [], [], []
    for i, rec in enumerate(recs):
        if rec.kind is TokenKind.PATCH:
            if np.asarray(rec.payload).shape != (width,):
                raise ContractError(f"patch payload of length {np.size(rec.payload)}, expected {width}")
            patches.append(i)
        elif rec.kind is TokenKind.LINE_MARK:
            lines.append(i)
        else:
            frames.append(i)
    d = params.dim
    parts = []
    if patches:
        pix = Tensor(np.stack([recs[i].payload for i in patches]))
        parts.append(pix @ params["proj"] + params["bias"])
    if lines:
        parts.append(nx.take(nx.reshape(params["line"], (1, d)), np.zeros(len(lines), dtype=np.int64)))
    if frames:
        parts.append(nx.take(nx.reshape(params["frame"], (1, d)), np.zeros(len(frames), dtype=np.int64)))
    if not parts:
        raise StructureError("stream has no visual tokens")
    src = np.asarray(patches + lines + frames, dtype=np.int64)
    perm = np.empty(len(src), dtype=np.int64)
    perm[src] = np.arange(len(src))
    feats = nx.take(nx.concat(parts, axis=0), perm)
    return FeatureSeq(
        feats,
        kind=[int(rec.kind) for rec in recs],
        t=[rec.t for rec in recs],
        r=[rec.r for rec in recs],
        c=[rec.c for rec in recs],
        count=np.ones(len(recs), dtype=np.int64),
        pos=np.arange(len(recs)),
        layout=layout,
    )


def _split_heads(x: Tensor, heads: int) -> Tensor:
    n, d = x.shape
    return nx.transpose(nx.reshape(x, (n, heads, d // heads)), (1, 0, 2))


def marker_cross_attend(seq: FeatureSeq, params: PatchEmbedParams, weights_out: list | None = None) -> FeatureSeq:
    """Residual cross-attention: each marker queries the patches it delimits.

    If ``weights_out`` is a list, per-frame attention weights (heads x markers x
    patches) are appended to it.
    """
    x = seq.features
    h, d = params.heads, params.dim
    scale = 1.0 / math.sqrt(d // h)
    marker_rows, updates = [], []
    for frame in np.unique(seq.t[seq.kind != int(TokenKind.TEXT)]):
        in_frame = seq.t == frame
        pidx = np.flatnonzero(in_frame & (seq.kind == int(TokenKind.PATCH)))
        midx = np.flatnonzero(in_frame & ((seq.kind == int(TokenKind.FRAME_MARK))
                                          | (seq.kind == int(TokenKind.LINE_MARK))))
        if len(midx) == 0:
            continue
        if len(pidx) == 0:
            raise StructureError(f"frame {frame} has markers but no patches")
        is_frame = seq.kind[midx] == int(TokenKind.FRAME_MARK)
        mask = is_frame[:, None] | (seq.r[midx][:, None] == seq.r[pidx][None, :])
        if not mask.any(axis=1).all():
            raise StructureError(f"frame {frame}: a LINE marker has no patches in its row")
        q = _split_heads(nx.take(x, midx) @ params["wq"], h)
        patches = nx.take(x, pidx)
        k = _split_heads(patches @ params["wk"], h)
        v = _split_heads(patches @ params["wv"], h)
        attn = nx.softmax(nx.matmul(q, nx.transpose(k, (0, 2, 1))) * scale, mask=mask)
        if weights_out is not None:
            weights_out.append(attn.data)
        ctx = nx.reshape(nx.transpose(nx.matmul(attn, v), (1, 0, 2)), (len(midx), d))
        marker_rows.append(midx)
        updates.append(ctx @ params["wo"])
    if not updates:
        return seq.replace(x)
    rows = np.concatenate(marker_rows)
    return seq.replace(nx.index_add(x, rows, nx.concat(updates, axis=0)))
