"""Procedural captioned clips: coloured shapes drifting or bouncing on a dark canvas.

Every attribute is drawn from the spec's seed (unless pinned), so captions and
question/answer pairs have exact ground truth.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import numerics as nx
from .errors import ContractError, InputError
from .videotok import VideoClip

PALETTE = {
    "red": (0.9, 0.1, 0.1),
    "green": (0.1, 0.8, 0.2),
    "blue": (0.15, 0.3, 0.95),
    "yellow": (0.95, 0.9, 0.1),
    "white": (0.95, 0.95, 0.95),
}
SHAPES = ("square", "circle", "triangle", "cross")
DIRECTIONS = {"left": (0, -1), "right": (0, 1), "up": (-1, 0), "down": (1, 0)}
MOTIONS = ("linear", "bounce", "static")
QUESTIONS = {
    "object": "what object is shown?",
    "color": "what color is the shape?",
    "shape": "what shape is it?",
    "direction": "which way does it move?",
}


@dataclass(frozen=True)
class SynthSpec:
    seed: int
    T: int = 4
    H: int = 32
    W: int = 32
    n_shapes: int = 1
    size: int = 10
    speed: float = 2.0
    motions: tuple[str, ...] = ("linear", "bounce")
    palette: tuple[str, ...] = tuple(PALETTE)
    template: int = 0
    question: str | None = None  # None: drawn from the seed

    def __post_init__(self):
        if self.T < 1 or self.n_shapes < 1:
            raise ContractError("need at least one frame and one shape")
        if self.size < 3 or self.size > min(self.H, self.W):
            raise ContractError(f"shape size {self.size} does not fit a {self.H}x{self.W} frame")
        if any(m not in MOTIONS for m in self.motions) or not self.motions:
            raise ContractError(f"motions must be a non-empty subset of {MOTIONS}")
        if any(c not in PALETTE for c in self.palette) or not self.palette:
            raise ContractError(f"palette must be a non-empty subset of {tuple(PALETTE)}")
        if self.question is not None and self.question not in QUESTIONS:
            raise ContractError(f"unknown question kind {self.question!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["motions"] = list(self.motions)
        d["palette"] = list(self.palette)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SynthSpec":
        d = dict(d)
        d["motions"] = tuple(d["motions"])
        d["palette"] = tuple(d["palette"])
        return cls(**d)


@dataclass(frozen=True)
class ShapeTruth:
    color: str
    shape: str
    motion: str
    direction: str  # "still" for static shapes
    start: tuple[float, float]  # (row, col) of the centre at t = 0


def scene(spec: SynthSpec) -> list[ShapeTruth]:
    rng = np.random.default_rng(spec.seed)
    half = spec.size / 2
    out = []
    for _ in range(spec.n_shapes):
        color = spec.palette[int(rng.integers(len(spec.palette)))]
        shape = SHAPES[int(rng.integers(len(SHAPES)))]
        motion = spec.motions[int(rng.integers(len(spec.motions)))]
        direction = list(DIRECTIONS)[int(rng.integers(len(DIRECTIONS)))]
        row = float(rng.uniform(half, spec.H - half))
        col = float(rng.uniform(half, spec.W - half))
        if motion == "static":
            direction = "still"
        elif motion == "linear":
            # start far enough back that the shape stays in frame for the whole clip
            dr, dc = DIRECTIONS[direction]
            travel = spec.speed * (spec.T - 1)
            row = float(np.clip(row - dr * travel / 2, half, spec.H - half))
            col = float(np.clip(col - dc * travel / 2, half, spec.W - half))
        out.append(ShapeTruth(color, shape, motion, direction, (row, col)))
    return out


def _reflect(x: float, lo: float, hi: float) -> float:
    span = hi - lo
    if span <= 0:
        return lo
    y = (x - lo) % (2 * span)
    return lo + (y if y <= span else 2 * span - y)


def position(truth: ShapeTruth, t: int, spec: SynthSpec) -> tuple[float, float]:
    """Analytic centre of a shape at frame ``t``."""
    if truth.motion == "static":
        return truth.start
    dr, dc = DIRECTIONS[truth.direction]
    row = truth.start[0] + dr * spec.speed * t
    col = truth.start[1] + dc * spec.speed * t
    half = spec.size / 2
    if truth.motion == "bounce":
        return _reflect(row, half, spec.H - half), _reflect(col, half, spec.W - half)
    return (float(np.clip(row, half, spec.H - half)), float(np.clip(col, half, spec.W - half)))


def _mask(shape: str, rows: np.ndarray, cols: np.ndarray, centre, size: int) -> np.ndarray:
    dy = rows - centre[0]
    dx = cols - centre[1]
    half = size / 2
    if shape == "square":
        return (np.abs(dy) <= half) & (np.abs(dx) <= half)
    if shape == "circle":
        return dy * dy + dx * dx <= half * half
    if shape == "triangle":
        return (dy <= half) & (dy >= -half) & (np.abs(dx) <= (dy + half) / 2)
    arm = max(1.0, size / 6)
    return ((np.abs(dy) <= half) & (np.abs(dx) <= arm)) | ((np.abs(dx) <= half) & (np.abs(dy) <= arm))


def caption(truths: list[ShapeTruth], T: int) -> str:
    parts = []
    for s in truths:
        if T == 1:
            parts.append(f"a {s.color} {s.shape}")
        elif s.direction == "still":
            parts.append(f"a {s.color} {s.shape} stays still")
        else:
            parts.append(f"a {s.color} {s.shape} moves {s.direction}")
    return " and ".join(parts)


def question_answer(spec: SynthSpec) -> tuple[str, str]:
    """A templated question about the first shape and its exact answer."""
    truth = scene(spec)[0]
    kinds = list(QUESTIONS) if spec.T > 1 else ["object", "color", "shape"]
    kind = spec.question
    if kind is None:
        kind = kinds[int(np.random.default_rng(spec.seed + 1).integers(len(kinds)))]
    answer = {
        "object": f"{truth.color} {truth.shape}",
        "color": truth.color,
        "shape": truth.shape,
        "direction": truth.direction,
    }[kind]
    return QUESTIONS[kind], answer


def generate(spec: SynthSpec) -> tuple[VideoClip, str]:
    truths = scene(spec)
    rows, cols = np.mgrid[0:spec.H, 0:spec.W] + 0.5
    frames = np.full((spec.T, 3, spec.H, spec.W), 0.05, dtype=np.float32)
    for t in range(spec.T):
        for s in truths:
            m = _mask(s.shape, rows, cols, position(s, t, spec), spec.size)
            frames[t][:, m] = np.asarray(PALETTE[s.color], dtype=np.float32)[:, None]
    return VideoClip(frames, source_id=f"synth-{spec.seed}"), caption(truths, spec.T)


# -- corpora --------------------------------------------------------------------
STAGE_FRAMES = {1: 1, 2: 4, 3: 4}


@dataclass
class Sample:
    id: str
    stage: int
    spec: SynthSpec
    clip: VideoClip
    caption: str
    question: str | None = None
    answer: str | None = None


def corpus_specs(n: int, stage: int, seed: int, frames: int | None = None, size: int = 32,
                 **spec_kw) -> list[SynthSpec]:
    if stage not in (1, 2, 3):
        raise ContractError(f"stage must be 1, 2 or 3, got {stage}")
    T = 1 if stage == 1 else (frames or STAGE_FRAMES[stage])
    if stage > 1 and T < 2:
        raise ContractError("stages 2 and 3 need multi-frame clips")
    seeds = np.random.default_rng([seed, stage]).integers(0, 2**31 - 1, size=n)
    return [SynthSpec(seed=int(s), T=T, H=size, W=size, **spec_kw) for s in seeds]


def make_corpus(out_dir, n: int, stage: int, seed: int = 0, frames: int | None = None,
                size: int = 32, workers: int = 1, **spec_kw) -> Path:
    """Write ELVT clips, caption sidecars and ``manifest.jsonl``; returns the manifest path.

    ``workers`` > 1 renders clips in a thread pool; output order and bytes do not change.
    """
    out = Path(out_dir)
    specs = corpus_specs(n, stage, seed, frames, size, **spec_kw)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            rendered = list(pool.map(generate, specs))
    else:
        rendered = [generate(spec) for spec in specs]
    try:
        out.mkdir(parents=True, exist_ok=True)
        manifest = out / "manifest.jsonl"
        with open(manifest, "w", encoding="utf-8") as fh:
            for i, (spec, (clip, cap)) in enumerate(zip(specs, rendered)):
                sid = f"s{stage}-{i:05d}"
                clip_path, cap_path = out / f"{sid}.elvt", out / f"{sid}.txt"
                nx.save_elvt(clip_path, clip.frames)
                cap_path.write_text(cap, encoding="utf-8")
                rec = {"id": sid, "stage": stage, "spec": spec.to_dict(),
                       "clip_path": clip_path.name, "caption_path": cap_path.name}
                if stage == 3:
                    rec["question"], rec["answer"] = question_answer(spec)
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
    except OSError as exc:
        raise InputError(f"cannot write corpus under {out}: {exc}") from exc
    return manifest


def load_corpus(manifest, regenerate: bool = False) -> list[Sample]:
    """Read a manifest; with ``regenerate`` clips are rebuilt from their stored specs."""
    manifest = Path(manifest)
    samples = []
    try:
        lines = manifest.read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise InputError(f"cannot read manifest {manifest}: {exc}") from exc
    for line in lines:
        if not line.strip():
            continue
        rec = json.loads(line)
        spec = SynthSpec.from_dict(rec["spec"])
        if regenerate:
            clip, cap = generate(spec)
        else:
            clip = VideoClip(nx.load_elvt(manifest.parent / rec["clip_path"]), source_id=rec["id"])
            cap = (manifest.parent / rec["caption_path"]).read_text(encoding="utf-8")
        samples.append(Sample(rec["id"], rec["stage"], spec, clip, cap,
                              rec.get("question"), rec.get("answer")))
    return samples
