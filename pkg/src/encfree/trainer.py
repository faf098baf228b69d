"""Three-stage toy training: spatial pretraining on single frames, spatio-temporal
pretraining on clips, then instruction tuning with merging and the caption loss only.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import numerics as nx
from .backbone import BackboneConfig, BackboneParams, decode_step, forward
from .errors import ContractError, NumericError
from .guidance import GuidanceHead, TeacherFeatures, generative_loss, mock_teacher, total_loss
from .merge import MergeConfig
from .numerics import Tensor
from .patch_embed import FeatureSeq, PatchEmbedParams, embed, load_param_dir, marker_cross_attend, save_param_dir
from .synth import Sample, load_corpus
from .videotok import BOS, EOS, SEP, ResolutionPolicy, TokenStream, VideoClip, decode_text, text_ids, tokenize

ALL_LOSSES = ("gen", "mse", "con")


@dataclass
class StageConfig:
    stage: int
    lr: float
    warmup_ratio: float
    batch_size: int = 8
    epochs: int = 1
    frames: int = 1
    merge_enabled: bool = False
    losses: tuple[str, ...] = ALL_LOSSES
    steps: int | None = None  # overrides epochs when set
    samples: int = 512  # default corpus size for this stage
    schedule: str = "cosine"
    betas: tuple[float, float] = (0.9, 0.999)
    weight_decay: float = 0.0
    grad_clip: float | None = 1.0
    seed: int = 0
    con_unit: str = "clip"
    con_source: str = "frame_token"

    def __post_init__(self):
        self.losses = tuple(self.losses)
        self.betas = tuple(self.betas)
        if self.stage not in (1, 2, 3):
            raise ContractError(f"stage must be 1, 2 or 3, got {self.stage}")
        if self.schedule != "cosine":
            raise ContractError("only the cosine schedule is supported")
        if any(l not in ALL_LOSSES for l in self.losses):
            raise ContractError(f"unknown loss in {self.losses}")
        if self.stage == 1 and (self.frames != 1 or self.merge_enabled or set(self.losses) != set(ALL_LOSSES)):
            raise ContractError("stage 1 trains single frames, no merging, all three losses")
        if self.stage == 2 and (self.frames < 2 or self.merge_enabled or set(self.losses) != set(ALL_LOSSES)):
            raise ContractError("stage 2 trains multi-frame clips, no merging, all three losses")
        if self.stage == 3 and (not self.merge_enabled or self.losses != ("gen",)):
            raise ContractError("stage 3 enables merging and uses the caption loss only")
        if self.lr <= 0 or not 0 <= self.warmup_ratio < 1 or self.batch_size < 1:
            raise ContractError("invalid lr / warmup ratio / batch size")

    @classmethod
    def full_scale(cls, stage: int) -> "StageConfig":
        table = {1: dict(lr=4e-5, warmup_ratio=0.03, batch_size=256, epochs=1, frames=1),
                 2: dict(lr=4e-5, warmup_ratio=0.01, batch_size=256, epochs=2, frames=16),
                 3: dict(lr=2e-5, warmup_ratio=0.01, batch_size=128, epochs=1, frames=32)}
        return cls(stage, merge_enabled=stage == 3, losses=("gen",) if stage == 3 else ALL_LOSSES,
                   **table[stage])

    @classmethod
    def toy(cls, stage: int, **overrides) -> "StageConfig":
        """Same structure as the full-scale preset at desk scale (learning rates x100)."""
        base = cls.full_scale(stage)
        kw = dataclasses.asdict(base)
        kw.update(lr=base.lr * 100, batch_size=8, frames=1 if stage == 1 else 4,
                  samples={1: 512, 2: 512, 3: 256}[stage])
        kw.update(overrides)
        return cls(**kw)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["losses"] = list(self.losses)
        d["betas"] = list(self.betas)
        return d

    def to_text(self) -> str:
        return "".join(f"{k} = {json.dumps(v)}\n" for k, v in self.to_dict().items())

    @classmethod
    def from_text(cls, text: str) -> "StageConfig":
        """Flat ``key = value`` lines (JSON values); ``#`` starts a comment."""
        kw = {}
        for n, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ContractError(f"config line {n}: expected key = value")
            key, value = (s.strip() for s in line.split("=", 1))
            kw[key] = json.loads(value)
        if "stage" not in kw:
            raise ContractError("config must set the stage")
        fields = {f.name for f in dataclasses.fields(cls)}
        unknown = set(kw) - fields
        if unknown:
            raise ContractError(f"unknown config keys {sorted(unknown)}")
        base = cls.toy(kw["stage"]).to_dict()
        base.update(kw)
        return cls(**base)


def warmup_steps(total_steps: int, ratio: float) -> int:
    return max(1, math.ceil(round(ratio * total_steps, 9)))


def lr_at(step: int, total_steps: int, cfg: StageConfig) -> float:
    """Linear warmup from 0 to the peak, then cosine decay towards 0."""
    if total_steps <= 0:
        raise ContractError("total_steps must be positive")
    if not 0 <= step < total_steps:
        raise ContractError(f"step {step} outside [0, {total_steps})")
    w = warmup_steps(total_steps, cfg.warmup_ratio)
    if step < w:
        return cfg.lr * step / w
    if total_steps == w:
        return cfg.lr
    return cfg.lr * 0.5 * (1.0 + math.cos(math.pi * (step - w) / (total_steps - w)))


class AdamW:
    """Adaptive moments with decoupled weight decay."""

    def __init__(self, params: dict[str, Tensor], betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.0):
        self.params = params
        self.b1, self.b2 = betas
        self.eps = eps
        self.wd = weight_decay
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.t = 0

    def step(self, lr: float) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for k, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            m, v = self.m[k], self.v[k]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            if self.wd:
                update = update + self.wd * p.data
            p.data = (p.data - lr * update).astype(p.data.dtype)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None


# -- model ----------------------------------------------------------------------
@dataclass
class ModelConfig:
    patch_size: int = 8
    frame_size: int = 32
    dim: int = 64
    depth: int = 4
    heads: int = 4
    ff_dim: int = 256
    teacher_dim: int = 32
    teacher_seed: int = 1234
    merge: MergeConfig = field(default_factory=MergeConfig)

    def backbone(self, merge_enabled: bool) -> BackboneConfig:
        return BackboneConfig(depth=self.depth, dim=self.dim, heads=self.heads, ff_dim=self.ff_dim,
                              merge=dataclasses.replace(self.merge, enabled=merge_enabled))

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["merge"] = self.merge.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["merge"] = MergeConfig(**d["merge"])
        return cls(**d)


class ModelState:
    """Patch embedding, backbone and guidance head, plus the last completed stage."""

    def __init__(self, cfg: ModelConfig, embed_params: PatchEmbedParams, backbone: BackboneParams,
                 head: GuidanceHead, stage_completed: int = 0):
        self.cfg = cfg
        self.embed = embed_params
        self.backbone = backbone
        self.head = head
        self.stage_completed = stage_completed

    @classmethod
    def fresh(cls, cfg: ModelConfig | None = None, seed: int = 0) -> "ModelState":
        cfg = cfg or ModelConfig()
        with nx.precision("float32"):
            emb = PatchEmbedParams.init(cfg.patch_size, cfg.dim, cfg.heads, seed=seed)
            bb = BackboneParams.init(cfg.backbone(False), seed=seed + 1)
            head = GuidanceHead.init(cfg.dim, cfg.teacher_dim, seed=seed + 2)
        return cls(cfg, emb, bb, head)

    def parameters(self) -> dict[str, Tensor]:
        out = {f"embed.{k}": v for k, v in self.embed.parameters().items()}
        out.update({f"backbone.{k}": v for k, v in self.backbone.parameters().items()})
        out.update({f"head.{k}": v for k, v in self.head.parameters().items()})
        return out

    def hash(self) -> str:
        h = hashlib.sha256()
        h.update(json.dumps({"cfg": self.cfg.to_dict(), "stage": self.stage_completed},
                            sort_keys=True).encode())
        for name, p in sorted(self.parameters().items()):
            h.update(name.encode())
            h.update(np.ascontiguousarray(p.data, dtype="<f4").tobytes())
        return h.hexdigest()

    def save(self, directory) -> str:
        config = {"model": self.cfg.to_dict(), "stage_completed": self.stage_completed,
                  "hash": self.hash()}
        save_param_dir(directory, self.parameters(), config)
        return config["hash"]

    @classmethod
    def load(cls, directory) -> "ModelState":
        with nx.precision("float32"):
            tensors, config = load_param_dir(directory)
        cfg = ModelConfig.from_dict(config["model"])
        pick = lambda pre: {k[len(pre):]: v for k, v in tensors.items() if k.startswith(pre)}
        emb = PatchEmbedParams(cfg.patch_size, cfg.dim, cfg.heads, pick("embed."))
        head = GuidanceHead(pick("head."), cfg.dim, cfg.teacher_dim)
        state = cls(cfg, emb, BackboneParams(pick("backbone.")), head, config["stage_completed"])
        if state.hash() != config["hash"]:
            raise ContractError(f"checkpoint {directory} does not match its recorded hash")
        return state


# -- data -----------------------------------------------------------------------
def caption_io(caption: str) -> tuple[list[int], list[int]]:
    ids = text_ids(caption)
    return [BOS] + ids, ids + [EOS]


def qa_io(question: str, answer: str) -> tuple[list[int], list[int]]:
    q, a = text_ids(question), text_ids(answer)
    return [BOS] + q + [SEP] + a, [-1] * (len(q) + 1) + a + [EOS]


def qa_prompt(question: str) -> list[int]:
    return [BOS] + text_ids(question) + [SEP]


@dataclass
class Prepared:
    sample: Sample
    stream: TokenStream
    teacher: TeacherFeatures
    text: list[int]
    targets: list[int]


def prepare(samples: Sequence[Sample], cfg: ModelConfig) -> list[Prepared]:
    policy = ResolutionPolicy(cfg.patch_size, cfg.frame_size, cfg.frame_size)
    out = []
    for s in samples:
        if (s.clip.H, s.clip.W) != (cfg.frame_size, cfg.frame_size):
            raise ContractError(f"{s.id}: clip is {s.clip.H}x{s.clip.W}, model expects {cfg.frame_size}")
        stream = tokenize(s.clip, policy)
        grid = (s.clip.H // cfg.patch_size, s.clip.W // cfg.patch_size)
        teacher = mock_teacher(s.clip, grid, cfg.teacher_dim, seed=cfg.teacher_seed)
        if s.question is not None:
            text, tgt = qa_io(s.question, s.answer)
        else:
            text, tgt = caption_io(s.caption)
        out.append(Prepared(s, stream, teacher, text, tgt))
    return out


def encode(stream: TokenStream, state: ModelState) -> FeatureSeq:
    return marker_cross_attend(embed(stream, state.embed), state.embed)


# -- training -------------------------------------------------------------------
@dataclass
class TrainLog:
    records: list[dict] = field(default_factory=list)
    checkpoints: list[str] = field(default_factory=list)

    def l_gen(self) -> list[float]:
        return [r["l_gen"] for r in self.records]

    def write(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for r in self.records:
                fh.write(json.dumps(r) + "\n")


def _clip_grads(params: dict[str, Tensor], max_norm: float) -> float:
    sq = sum(float((p.grad.astype(np.float64) ** 2).sum()) for p in params.values() if p.grad is not None)
    norm = math.sqrt(sq)
    if norm > max_norm:
        scale = max_norm / norm
        for p in params.values():
            if p.grad is not None:
                p.grad = (p.grad * scale).astype(p.grad.dtype)
    return norm


def total_steps_for(cfg: StageConfig, n_samples: int) -> int:
    if cfg.steps is not None:
        return cfg.steps
    return cfg.epochs * math.ceil(n_samples / cfg.batch_size)


def run_stage(cfg: StageConfig, corpus, state: ModelState, out_dir=None,
              log_every: int | None = None) -> tuple[ModelState, TrainLog]:
    """Train one stage in place on ``state``; ``corpus`` is a manifest path or a sample list."""
    samples = load_corpus(corpus) if isinstance(corpus, (str, Path)) else list(corpus)
    if not samples:
        raise ContractError("empty corpus")
    if any(s.stage != cfg.stage for s in samples):
        raise ContractError(f"corpus stage does not match training stage {cfg.stage}")
    if state.stage_completed != cfg.stage - 1:
        raise ContractError(f"stage {cfg.stage} needs a stage-{cfg.stage - 1} checkpoint, "
                            f"model has completed stage {state.stage_completed}")
    if any(s.clip.T != cfg.frames for s in samples):
        raise ContractError(f"stage {cfg.stage} expects {cfg.frames}-frame clips")
    data = prepare(samples, state.cfg)
    bb_cfg = state.cfg.backbone(cfg.merge_enabled)
    params = state.parameters()
    opt = AdamW(params, cfg.betas, weight_decay=cfg.weight_decay)
    total = total_steps_for(cfg, len(data))
    log = TrainLog()
    order: list[int] = []
    epoch = 0
    with nx.precision("float32"):
        for step in range(total):
            t0 = time.perf_counter()
            batch = []
            while len(batch) < min(cfg.batch_size, len(data)):
                if not order:
                    order = list(np.random.default_rng([cfg.seed, cfg.stage, epoch]).permutation(len(data)))
                    epoch += 1
                batch.append(data[order.pop(0)])
            lr = lr_at(step, total, cfg)
            opt.zero_grad()
            try:
                traces = [forward(encode(b.stream, state), b.text, state.backbone, bb_cfg) for b in batch]
                loss = total_loss(traces, [b.teacher for b in batch], [b.targets for b in batch],
                                  state.head, cfg.losses, cfg.con_unit, cfg.con_source)
                loss.total.backward()
            except NumericError as exc:
                raise NumericError(f"stage {cfg.stage} step {step}: {exc}") from exc
            gnorm = _clip_grads(params, cfg.grad_clip) if cfg.grad_clip else None
            opt.step(lr)
            rec = {"stage": cfg.stage, "step": step, "lr": lr, **loss.as_dict(),
                   "grad_norm": gnorm, "step_time": time.perf_counter() - t0,
                   "tokens": [tr.counts for tr in traces]}
            log.records.append(rec)
            if log_every and step % log_every == 0:
                print(json.dumps({k: rec[k] for k in ("stage", "step", "lr", "l_gen", "l_mse", "l_con")}))
    state.stage_completed = cfg.stage
    if out_dir is not None:
        ckpt = Path(out_dir) / f"stage{cfg.stage}"
        state.save(ckpt)
        log.checkpoints.append(str(ckpt))
        log.write(Path(out_dir) / f"stage{cfg.stage}_log.jsonl")
    return state, log


def mean_caption_loss(state: ModelState, corpus, merge_enabled: bool = False) -> float:
    """Caption cross-entropy averaged over every sample of a corpus (no gradients)."""
    samples = load_corpus(corpus) if isinstance(corpus, (str, Path)) else list(corpus)
    bb_cfg = state.cfg.backbone(merge_enabled)
    total = 0.0
    with nx.precision("float32"), nx.no_grad():
        for item in prepare(samples, state.cfg):
            trace = forward(encode(item.stream, state), item.text, state.backbone, bb_cfg)
            total += generative_loss([trace], [item.targets]).item()
    return total / len(samples)


def greedy_answer(state: ModelState, stream: TokenStream, prompt: list[int], merge_enabled: bool = True,
                  max_new: int = 24) -> str:
    bb_cfg = state.cfg.backbone(merge_enabled)
    out: list[int] = []
    with nx.precision("float32"), nx.no_grad():
        trace = forward(encode(stream, state), prompt, state.backbone, bb_cfg, keep_cache=True)
        logits = trace.logits.data[-1]
        for _ in range(max_new):
            tok = int(np.argmax(logits))
            if tok == EOS:
                break
            out.append(tok)
            logits = decode_step(trace, tok, state.backbone, bb_cfg)
    return decode_text(out)


def evaluate_toy(state: ModelState, corpus, merge_enabled: bool = True) -> dict:
    """Greedy-decoded exact-match accuracy on templated QA samples."""
    samples = load_corpus(corpus) if isinstance(corpus, (str, Path)) else list(corpus)
    if any(s.question is None for s in samples):
        raise ContractError("evaluation needs question/answer samples (stage 3 corpus)")
    policy = ResolutionPolicy(state.cfg.patch_size, state.cfg.frame_size, state.cfg.frame_size)
    preds = []
    for s in samples:
        pred = greedy_answer(state, tokenize(s.clip, policy), qa_prompt(s.question), merge_enabled)
        preds.append({"id": s.id, "question": s.question, "answer": s.answer, "prediction": pred,
                      "correct": pred == s.answer})
    acc = sum(p["correct"] for p in preds) / len(preds) if preds else 0.0
    return {"accuracy": acc, "n": len(preds), "predictions": preds}


def run_pipeline(corpora: dict[int, object], configs: dict[int, StageConfig], seed: int = 0,
                 model_cfg: ModelConfig | None = None, out_dir=None) -> tuple[ModelState, list[TrainLog]]:
    """Stages 1 -> 2 -> 3 from a fresh model, each starting from the previous checkpoint."""
    state = ModelState.fresh(model_cfg, seed)
    logs = []
    for stage in (1, 2, 3):
        state, log = run_stage(configs[stage], corpora[stage], state, out_dir)
        logs.append(log)
    return state, logs


# -- end-to-end gradient check ----------------------------------------------------
def tiny_instance(seed: int = 0, frames: int = 3, batch: int = 2):
    """Float64 miniature model plus a batch of near-static clips that trigger merging."""
    rng = np.random.default_rng(seed)
    cfg = ModelConfig(patch_size=4, frame_size=8, dim=16, depth=2, heads=2, ff_dim=32, teacher_dim=6,
                      teacher_seed=seed, merge=MergeConfig(threshold=0.97, ratio=0.5, switch_layer=1))
    with nx.precision("float64"):
        emb = PatchEmbedParams.init(cfg.patch_size, cfg.dim, cfg.heads, seed=seed)
        for name in ("line", "frame", "bias"):
            emb[name].data = rng.normal(0.0, 0.5, emb[name].shape)
        bb = BackboneParams.init(cfg.backbone(True), seed=seed + 1)
        head = GuidanceHead.init(cfg.dim, cfg.teacher_dim, seed=seed + 2)
    state = ModelState(cfg, emb, bb, head)
    policy = ResolutionPolicy(cfg.patch_size, cfg.frame_size, cfg.frame_size)
    items = []
    for b in range(batch):
        base = rng.uniform(0.2, 0.8, (1, 3, cfg.frame_size, cfg.frame_size))
        noise = rng.normal(0.0, 0.1, (frames, 3, cfg.frame_size, cfg.frame_size))
        clip = VideoClip(np.clip(base + noise, 0.0, 1.0), source_id=f"tiny{b}")
        grid = (cfg.frame_size // cfg.patch_size,) * 2
        teacher = mock_teacher(clip, grid, cfg.teacher_dim, seed=seed)
        text = [BOS] + [int(v) for v in rng.integers(97, 123, size=4)]
        items.append((tokenize(clip, policy), teacher, text, text[1:] + [EOS]))
    return state, items


def pipeline_loss(state: ModelState, items, losses: Sequence[str] = ALL_LOSSES):
    bb_cfg = state.cfg.backbone(True)
    traces = [forward(encode(s, state), text, state.backbone, bb_cfg) for s, _, text, _ in items]
    return total_loss(traces, [i[1] for i in items], [i[3] for i in items], state.head, losses)


def pipeline_grad_check(seed: int = 0, coords_per_param: int = 2, report: dict | None = None,
                        strict: bool = False) -> float:
    """Max relative finite-difference error of the total loss over sampled parameter entries."""
    state, items = tiny_instance(seed)
    with nx.precision("float64"):
        return nx.grad_check_params(lambda: pipeline_loss(state, items).total, state.parameters(),
                                    coords_per_param=coords_per_param,
                                    rng=np.random.default_rng(seed), report=report, strict=strict)
