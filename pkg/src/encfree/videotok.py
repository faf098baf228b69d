"""Native-resolution video tokenization.

Frames are resized so the longest edge fits a tier limit (aspect ratio kept,
edges rounded to patch multiples), then cut into P x P patches in raster order.
Each frame starts with a FRAME marker and each patch row ends with a LINE marker.

With the default patch size of 28 a 672-edge frame yields
601 tokens = 24*24 patches + 24 LINE + 1 FRAME.
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image

from .errors import ContractError, FormatError, InputError, StructureError
from .numerics import load_elvt

PATCH_SIZE = 28

# byte-level text vocabulary plus specials
BOS, EOS, SEP, PAD = 256, 257, 258, 259
VOCAB_SIZE = 512


class TokenKind(enum.IntEnum):
    FRAME_MARK = 0
    LINE_MARK = 1
    PATCH = 2
    TEXT = 3


class Tier(enum.Enum):
    HIGH = "high"
    LOW = "low"


@dataclass(frozen=True)
class ResolutionPolicy:
    patch_size: int = PATCH_SIZE
    max_edge_high: int = 672
    max_edge_low: int = 336
    preserve_aspect: bool = True

    def max_edge(self, tier: Tier) -> int:
        return self.max_edge_high if tier is Tier.HIGH else self.max_edge_low

    @classmethod
    def preset(cls, name: str) -> "ResolutionPolicy":
        if name == "default":
            return cls()
        if name in ("low224", "table5"):  # alias accepted on the command line
            return cls(max_edge_low=224)
        raise ValueError(f"unknown resolution preset {name!r}")


@dataclass
class VideoClip:
    frames: np.ndarray  # T x 3 x H x W, values in [0, 1]
    source_id: str = "clip"
    fps: float | None = None

    def __post_init__(self):
        f = np.asarray(self.frames)
        if f.ndim != 4 or f.shape[1] != 3:
            raise InputError(f"clip frames must be T x 3 x H x W, got {f.shape}")
        if f.shape[0] < 1 or f.shape[2] < 1 or f.shape[3] < 1:
            raise InputError(f"degenerate clip of shape {f.shape}")
        if not np.isfinite(f).all() or f.min() < 0.0 or f.max() > 1.0:
            raise InputError("pixel values must lie in [0, 1]")
        if self.fps is not None and self.fps <= 0:
            raise InputError("fps must be positive")
        self.frames = f

    @property
    def T(self) -> int:
        return self.frames.shape[0]

    @property
    def H(self) -> int:
        return self.frames.shape[2]

    @property
    def W(self) -> int:
        return self.frames.shape[3]


@dataclass
class TokenRecord:
    kind: TokenKind
    t: int
    r: int = -1
    c: int = -1
    payload: np.ndarray | int | None = None


@dataclass
class TokenStream:
    records: list[TokenRecord] = field(default_factory=list)
    patch_size: int = PATCH_SIZE

    def __len__(self) -> int:
        return len(self.records)

    def counts(self) -> dict[str, int]:
        out = {k.name: 0 for k in TokenKind}
        for rec in self.records:
            out[rec.kind.name] += 1
        return out

    def visual_len(self) -> int:
        return sum(1 for rec in self.records if rec.kind is not TokenKind.TEXT)

    def extend(self, other: "TokenStream", frame_offset: int = 0) -> None:
        for rec in other.records:
            t = rec.t + frame_offset if rec.kind is not TokenKind.TEXT else rec.t
            self.records.append(TokenRecord(rec.kind, t, rec.r, rec.c, rec.payload))


def tokens_per_frame(rows: int, cols: int) -> int:
    return rows * cols + rows + 1


def resized_size(h: int, w: int, max_edge: int, patch_size: int = PATCH_SIZE) -> tuple[int, int]:
    """Target (H, W): downscale so the longest edge fits, then round to patch multiples."""
    if h <= 0 or w <= 0:
        raise InputError(f"zero-area frame {h}x{w}")
    scale = min(1.0, max_edge / max(h, w))
    limit = max(patch_size, (max_edge // patch_size) * patch_size)

    def snap(edge: float) -> int:
        n = math.floor(edge / patch_size + 0.5)
        return min(max(patch_size, n * patch_size), limit)

    return snap(h * scale), snap(w * scale)


def _resize_frame(frame: np.ndarray, h: int, w: int) -> np.ndarray:
    if frame.shape[1:] == (h, w):
        return frame
    chans = []
    for ch in frame:
        img = Image.fromarray(np.ascontiguousarray(ch, dtype=np.float32))
        chans.append(np.asarray(img.resize((w, h), Image.BILINEAR), dtype=np.float64))
    return np.clip(np.stack(chans), 0.0, 1.0)


def resize_to_policy(clip: VideoClip, policy: ResolutionPolicy, tier: Tier = Tier.HIGH) -> VideoClip:
    h, w = resized_size(clip.H, clip.W, policy.max_edge(tier), policy.patch_size)
    frames = np.stack([_resize_frame(f, h, w) for f in clip.frames])
    return VideoClip(frames, clip.source_id, clip.fps)


def _frame_records(frame: np.ndarray, t: int, p: int) -> list[TokenRecord]:
    _, h, w = frame.shape
    rows, cols = h // p, w // p
    # (3, rows, p, cols, p) -> (rows, cols, 3, p, p) -> flat per patch
    patches = frame.reshape(3, rows, p, cols, p).transpose(1, 3, 0, 2, 4).reshape(rows, cols, 3 * p * p)
    recs = [TokenRecord(TokenKind.FRAME_MARK, t)]
    for r in range(rows):
        for c in range(cols):
            recs.append(TokenRecord(TokenKind.PATCH, t, r, c, patches[r, c]))
        recs.append(TokenRecord(TokenKind.LINE_MARK, t, r))
    return recs


def tokenize(clip: VideoClip, policy: ResolutionPolicy | None = None) -> TokenStream:
    p = (policy or ResolutionPolicy()).patch_size
    if clip.H % p or clip.W % p:
        raise ContractError(f"frame {clip.H}x{clip.W} is not a multiple of patch size {p}; resize first")
    records: list[TokenRecord] = []
    for t, frame in enumerate(clip.frames):
        records.extend(_frame_records(frame, t, p))
    return TokenStream(records, p)


def tokenize_frames(frames: Sequence[np.ndarray], patch_size: int = PATCH_SIZE) -> TokenStream:
    """Tokenize frames that may differ in size (hybrid-resolution input)."""
    records: list[TokenRecord] = []
    for t, frame in enumerate(frames):
        if frame.shape[1] % patch_size or frame.shape[2] % patch_size:
            raise ContractError(f"frame {t} of size {frame.shape[1:]} is not patch aligned")
        records.extend(_frame_records(frame, t, patch_size))
    return TokenStream(records, patch_size)


def detokenize_layout(stream: TokenStream) -> list[tuple[int, int]]:
    """Per-frame (rows, cols) recovered from marker positions."""
    layout: list[tuple[int, int]] = []
    rows = cols = run = 0
    open_frame = False
    expected_t = 0

    def close() -> None:
        if run:
            raise StructureError("patches after the last LINE marker of a frame")
        if rows == 0:
            raise StructureError(f"frame {expected_t - 1} has no rows")
        layout.append((rows, cols))

    for i, rec in enumerate(stream.records):
        if rec.kind is TokenKind.TEXT:
            continue
        if rec.kind is TokenKind.FRAME_MARK:
            if open_frame:
                close()
            if rec.t != expected_t:
                raise StructureError(f"record {i}: frame index {rec.t}, expected {expected_t}")
            expected_t += 1
            open_frame, rows, cols, run = True, 0, 0, 0
            continue
        if not open_frame:
            raise StructureError(f"record {i}: {rec.kind.name} before any FRAME marker")
        if rec.t != expected_t - 1:
            raise StructureError(f"record {i}: belongs to frame {rec.t} inside frame {expected_t - 1}")
        if rec.kind is TokenKind.PATCH:
            if rec.r != rows or rec.c != run:
                raise StructureError(f"record {i}: patch ({rec.r},{rec.c}) out of raster order")
            run += 1
        else:  # LINE
            if run == 0 or rec.r != rows:
                raise StructureError(f"record {i}: LINE marker closes an empty or misnumbered row")
            if rows and run != cols:
                raise StructureError(f"record {i}: ragged row ({run} vs {cols} patches)")
            cols, run, rows = run, 0, rows + 1
    if open_frame:
        close()
    return layout


# -- serialization -----------------------------------------------------------
def stream_to_jsonl(stream: TokenStream, path, payload: bool = True) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in stream.records:
            row = {"kind": rec.kind.name, "t": rec.t, "r": rec.r, "c": rec.c}
            if rec.kind is TokenKind.PATCH and payload:
                row["payload"] = [float(v) for v in rec.payload]
            elif rec.kind is TokenKind.TEXT:
                row["payload"] = int(rec.payload)
            fh.write(json.dumps(row) + "\n")


def stream_from_jsonl(path, patch_size: int = PATCH_SIZE) -> TokenStream:
    records = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            row = json.loads(line)
            kind = TokenKind[row["kind"]]
            pay = row.get("payload")
            if kind is TokenKind.PATCH and pay is not None:
                pay = np.asarray(pay, dtype=np.float64)
            records.append(TokenRecord(kind, row["t"], row["r"], row["c"], pay))
    return TokenStream(records, patch_size)


def read_ppm(path) -> np.ndarray:
    """Binary PPM (P6) -> 3 x H x W array in [0, 1]."""
    data = Path(path).read_bytes()
    fields: list[bytes] = []
    pos = 0
    while len(fields) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        fields.append(data[start:pos])
    if fields[0] != b"P6":
        raise FormatError(f"{path}: not a binary PPM (P6)")
    w, h, maxval = int(fields[1]), int(fields[2]), int(fields[3])
    pos += 1
    dtype = np.uint8 if maxval < 256 else ">u2"
    n = w * h * 3
    pix = np.frombuffer(data, dtype=dtype, count=n, offset=pos)
    return pix.reshape(h, w, 3).transpose(2, 0, 1).astype(np.float64) / maxval


def write_ppm(path, frame: np.ndarray) -> None:
    _, h, w = frame.shape
    pix = np.clip(np.round(frame * 255), 0, 255).astype(np.uint8).transpose(1, 2, 0)
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode() + pix.tobytes())


def load_clip(path) -> VideoClip:
    """Load a clip from a directory of PPM frames or a single ELVT tensor."""
    path = Path(path)
    if path.is_dir():
        frames = sorted(p for p in path.iterdir() if p.suffix.lower() == ".ppm")
        if not frames:
            raise InputError(f"{path}: no .ppm frames found")
        arrays = [read_ppm(p) for p in frames]
        if len({a.shape for a in arrays}) != 1:
            raise InputError(f"{path}: frames differ in size")
        return VideoClip(np.stack(arrays), source_id=path.name)
    if not path.exists():
        raise InputError(f"{path}: no such file or directory")
    arr = load_elvt(path).astype(np.float64)
    if arr.ndim != 4:
        raise InputError(f"{path}: expected a T x 3 x H x W tensor, got {arr.shape}")
    return VideoClip(arr, source_id=path.stem)


def text_ids(text: str | bytes) -> list[int]:
    if isinstance(text, str):
        text = text.encode("utf-8")
    return list(text)


def decode_text(ids: Iterable[int]) -> str:
    return bytes(i for i in ids if 0 <= i < 256).decode("utf-8", errors="replace")
