"""Four-stage training ladder plus the self-distillation objective.

Stages: text_pretrain -> vision_text_align -> vision_text_sft ->
audio_text_align -> vision_audio_sft. The last stage optionally mixes the
supervised cross-entropy loss with a KL term that distills the model's own
vision-text route (teacher) into its vision-audio route (student), weighted
by the KD ratio alpha.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import Tensor
from .data import SYSTEM_PROMPT, DatasetManifest, TriModalSample
from .model import OmniModel, save_checkpoint

STAGES = ("text_pretrain", "vision_text_align", "vision_text_sft",
          "audio_text_align", "vision_audio_sft")

_FREEZE_POLICY = {
    "text_pretrain": ("text_embedding", "backbone", "output_head"),
    "vision_text_align": ("vision_encoder", "vision_projector"),
    "vision_text_sft": ("text_embedding", "vision_encoder", "vision_projector",
                        "backbone", "output_head"),
    "audio_text_align": ("audio_encoder", "audio_projector"),
    "vision_audio_sft": ("audio_encoder", "audio_projector"),
}

KD_MODES = ("token_kl", "gt_logratio")


class TrainingAborted(RuntimeError):
    """Raised when a non-finite loss appears; carries the failing step."""

    def __init__(self, step: int, message: str):
        super().__init__(message)
        self.step = step


@dataclass
class StageConfig:
    stage: str
    epochs: int = 1
    batch_size: int = 16
    base_lr: float = 3e-4
    alpha: float = 0.0          # KD ratio; only meaningful for vision_audio_sft
    kd_mode: str = "token_kl"
    temperature: float = 1.0
    warmup_steps: int = 0
    clip_norm: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ValueError(f"unknown stage '{self.stage}'")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must be in [0,1], got {self.alpha}")
        if self.kd_mode not in KD_MODES:
            raise ValueError(f"unknown kd_mode '{self.kd_mode}'")


@dataclass
class TrainLog:
    stage: str
    rows: list = field(default_factory=list)  # (step, lr, l_sft, l_kd, l_total, gnorm)
    eval_snapshots: list = field(default_factory=list)

    CSV_HEADER = "step,lr,l_sft,l_kd,l_total,grad_norm"

    def add(self, step, lr, l_sft, l_kd, l_total, gnorm):
        self.rows.append((step, lr, l_sft, l_kd, l_total, gnorm))

    def write_csv(self, path: str) -> None:
        with open(path, "w") as f:
            f.write(self.CSV_HEADER + "\n")
            for step, lr, ls, lk, lt, gn in self.rows:
                f.write(f"{step},{lr:.9g},{ls:.9g},{lk:.9g},{lt:.9g},{gn:.9g}\n")


def freeze_policy(stage: str) -> tuple[str, ...]:
    """Parameter groups trained at each stage; everything else is frozen."""
    if stage not in _FREEZE_POLICY:
        raise ValueError(f"unknown stage '{stage}'")
    return _FREEZE_POLICY[stage]


def lr_schedule(step: int, total_steps: int, base_lr: float,
                warmup_steps: int = 0) -> float:
    """Cosine decay from base_lr to 0, with optional linear warmup."""
    if total_steps <= 0:
        raise ValueError("total_steps must be positive")
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    lr = base_lr * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))
    if warmup_steps > 0 and step < warmup_steps:
        lr *= (step + 1) / warmup_steps
    return lr


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def loss_sft(student_logits: Tensor, targets: np.ndarray, mask: np.ndarray) -> Tensor:
    """Mean next-token cross-entropy over the answer prediction positions."""
    return T.cross_entropy(student_logits, targets, mask)


def loss_self_kd(teacher_logits, student_logits: Tensor, mask: np.ndarray,
                 temperature: float = 1.0, kd_mode: str = "token_kl",
                 targets: np.ndarray | None = None) -> Tensor:
    """Distillation loss between the two input routes of the same model.

    token_kl matches the full next-token distributions position by position;
    gt_logratio is the literal log-probability-ratio at the ground-truth
    tokens. The teacher side is constant with respect to gradients either way.
    """
    t_data = teacher_logits.data if isinstance(teacher_logits, Tensor) else np.asarray(teacher_logits)
    if t_data.shape != student_logits.shape:
        raise T.ShapeMismatchError("loss_self_kd", t_data.shape, student_logits.shape)
    if kd_mode == "token_kl":
        return T.kl_divergence(Tensor(t_data), student_logits, mask, temperature)
    if kd_mode == "gt_logratio":
        if targets is None:
            raise ValueError("gt_logratio mode requires ground-truth targets")
        ce_student = T.cross_entropy(student_logits, targets, mask)
        with T.no_grad():
            ce_teacher = float(T.cross_entropy(Tensor(t_data), targets, mask).data)
        # mean[log p_T(y) - log p_S(y)] = CE_student - CE_teacher
        return T.sub(ce_student, Tensor(np.asarray(ce_teacher)))
    raise ValueError(f"unknown kd_mode '{kd_mode}'")


def loss_combined(kd: Tensor | None, sft: Tensor | None, alpha: float) -> Tensor:
    """alpha * L_KD + (1 - alpha) * L_SFT, exact at the endpoints."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must be in [0,1], got {alpha}")
    if alpha == 0.0:
        return sft
    if alpha == 1.0:
        return kd
    return T.add(T.scale(kd, alpha), T.scale(sft, 1.0 - alpha))


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

class Adam:
    def __init__(self, params: list[Tensor], beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]

    def step(self, lr: float) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * (g * g)
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def clip_global_norm(params: list[Tensor], max_norm: float) -> float:
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float((p.grad.astype(np.float64) ** 2).sum())
    norm = math.sqrt(total)
    if max_norm > 0 and norm > max_norm:
        s = max_norm / norm
        for p in params:
            if p.grad is not None:
                p.grad *= s
    return norm


# ---------------------------------------------------------------------------
# batching
# ---------------------------------------------------------------------------

@dataclass
class Batch:
    samples: list[TriModalSample]
    system_ids: np.ndarray
    vision: np.ndarray | None
    text_query: np.ndarray       # [B, Tq]
    audio_query: np.ndarray      # [B, K*Tq, D_a]
    response: np.ndarray         # [B, A] teacher-forced answer inputs
    targets: np.ndarray          # [B, L]
    mask: np.ndarray             # [B, L]
    length: int


def build_batch(samples: list[TriModalSample], manifest: DatasetManifest) -> Batch:
    """Pack same-shape samples into arrays and compute the answer-prediction
    targets/mask for the assembled sequence layout."""
    sys_ids = np.asarray(manifest.encode(SYSTEM_PROMPT), dtype=np.int64)
    s0 = samples[0]
    has_scene = s0.scene is not None
    n_vis = s0.scene.grid_size ** 2 if has_scene else 0
    tq = len(s0.question_ids)
    a = len(s0.answer_ids)
    b = len(samples)
    vision = (np.stack([s.scene.features() for s in samples])
              if has_scene else None)
    text_q = np.asarray([s.question_ids for s in samples], dtype=np.int64)
    audio_q = np.stack([s.audio_frames for s in samples])
    resp = np.asarray([s.answer_ids for s in samples], dtype=np.int64)
    r0 = len(sys_ids) + n_vis + tq
    length = r0 + a
    targets = np.zeros((b, length), dtype=np.int64)
    mask = np.zeros((b, length), dtype=bool)
    mask[:, r0 - 1: r0 + a] = True
    targets[:, r0 - 1: r0 + a - 1] = resp
    targets[:, r0 + a - 1] = manifest.eos_id
    return Batch(samples=samples, system_ids=sys_ids, vision=vision,
                 text_query=text_q, audio_query=audio_q, response=resp,
                 targets=targets, mask=mask, length=length)


def make_batches(samples: list[TriModalSample], batch_size: int,
                 manifest: DatasetManifest,
                 rng: np.random.Generator | None = None) -> list[Batch]:
    """Deterministically bucket samples by sequence geometry so every batch
    has uniform shapes (no padding needed)."""
    order = list(range(len(samples)))
    if rng is not None:
        order = [int(i) for i in rng.permutation(len(samples))]
    open_buckets: dict[tuple, list[TriModalSample]] = {}
    batches: list[list[TriModalSample]] = []
    for i in order:
        s = samples[i]
        key = (s.scene is not None, len(s.question_ids), len(s.answer_ids))
        bucket = open_buckets.setdefault(key, [])
        bucket.append(s)
        if len(bucket) == batch_size:
            batches.append(bucket)
            open_buckets[key] = []
    for key in sorted(open_buckets, key=repr):
        if open_buckets[key]:
            batches.append(open_buckets[key])
    return [build_batch(bs, manifest) for bs in batches]


_STAGE_MODALITY = {
    "text_pretrain": "text",
    "vision_text_align": "text",
    "vision_text_sft": "text",
    "audio_text_align": "audio",
    "vision_audio_sft": "audio",
}


def stage_query_modality(stage: str) -> str:
    return _STAGE_MODALITY[stage]


# ---------------------------------------------------------------------------
# stage runner
# ---------------------------------------------------------------------------

def run_stage(model: OmniModel, cfg: StageConfig, dataset: list[TriModalSample],
              manifest: DatasetManifest, log_path: str | None = None,
              checkpoint_dir: str | None = None) -> TrainLog:
    """Train one stage with Adam + cosine decay, per the freezing policy.

    For vision_audio_sft with alpha > 0, every step first runs the teacher
    route (vision + text query, no gradient) on the same batch, then the
    student route (vision + audio query), and mixes the losses.
    """
    model.set_trainable(freeze_policy(cfg.stage))
    trainable = [t for _, _, t in model.parameters(freeze_policy(cfg.stage))]
    opt = Adam(trainable)
    modality = stage_query_modality(cfg.stage)
    use_kd = cfg.stage == "vision_audio_sft" and cfg.alpha > 0.0
    log = TrainLog(stage=cfg.stage)

    epoch_batches = []
    for epoch in range(cfg.epochs):
        rng = np.random.default_rng([cfg.seed, 0xE90C, epoch])
        epoch_batches.append(make_batches(dataset, cfg.batch_size, manifest, rng))
    total_steps = sum(len(bs) for bs in epoch_batches)

    step = 0
    for batches in epoch_batches:
        for batch in batches:
            lr = lr_schedule(step, total_steps, cfg.base_lr, cfg.warmup_steps)

            teacher_logits = None
            if use_kd:
                with T.no_grad():
                    t_seq = model.assemble(batch.system_ids, batch.vision,
                                           batch.text_query, batch.response, "text")
                    t_logits, _ = model.forward(t_seq)
                    teacher_logits = t_logits.data

            query = batch.text_query if modality == "text" else batch.audio_query
            seq = model.assemble(batch.system_ids, batch.vision, query,
                                 batch.response, modality)
            logits, _ = model.forward(seq)

            sft = loss_sft(logits, batch.targets, batch.mask)
            if use_kd:
                kd = loss_self_kd(teacher_logits, logits, batch.mask,
                                  cfg.temperature, cfg.kd_mode, batch.targets)
                l_kd = float(kd.data)
            else:
                kd, l_kd = None, 0.0
            total = loss_combined(kd, sft, cfg.alpha if use_kd else 0.0)
            l_sft = float(sft.data)
            l_total = float(total.data)
            if not math.isfinite(l_total):
                if checkpoint_dir is not None:
                    os.makedirs(checkpoint_dir, exist_ok=True)
                    save_checkpoint(model, os.path.join(
                        checkpoint_dir, f"{cfg.stage}_abort_step{step}.ckpt"),
                        stage_tag=f"{cfg.stage}:aborted@{step}")
                raise TrainingAborted(step, f"non-finite loss at step {step}")

            model.zero_grads()
            total.backward()
            gnorm = clip_global_norm(trainable, cfg.clip_norm)
            opt.step(lr)
            log.add(step, lr, l_sft, l_kd, l_total, gnorm)
            step += 1

    if log_path is not None:
        log.write_csv(log_path)
    return log
