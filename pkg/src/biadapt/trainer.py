"""Bi-directional adaptation: forward adversarial stage, then backward self-distillation stage.

Each step alternates two sub-updates. First, with Q fixed, the stage's
extractor and the classifier take one SGD step on the stage objective. Then,
with those fixed, Q takes one SGD step maximising the adversarial objective on
freshly recomputed features. At the end of every backward epoch the teacher
extractor is synchronised from the student.
"""
from __future__ import annotations

import csv
import io
import logging
import math
import os
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterator

import numpy as np
import torch
import torch.nn as nn

from . import losses as L
from .losses import LossWeights
from .nets import (BackboneConfig, ModelState, StateCorruptionError, build_model_state, classify,
                   discriminate, extract_features, init_student_from_teacher, save_checkpoint, to_nchw)
from .synthdata import Scenario

log = logging.getLogger(__name__)

ADAPTERS = ("FA", "GRL", "MMD", "none")
ADV_FORMS = ("confusion", "swapped")
BACKWARD_OBJECTIVES = ("SD", "ENT", "none")
TEACHER_UPDATES = ("copy", "ema")
TRACE_COLUMNS = ("epoch", "step", "loss_ce", "loss_adv", "loss_sd", "disc_acc")
DIVERGENCE_LIMIT = 1e4


class DivergenceError(RuntimeError):
    def __init__(self, message: str, record: "StepRecord"):
        super().__init__(message)
        self.record = record


@dataclass(frozen=True)
class TrainConfig:
    weights: LossWeights = field(default_factory=LossWeights)
    T1: int = 20
    T2: int = 10
    lr_forward: float = 1e-3
    lr_backward: float = 1e-4
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_forward: int = 32
    batch_backward: int = 24
    seed: int = 0
    adapter: str = "FA"
    backward_objective: str = "SD"
    teacher_update: str = "copy"
    ema_decay: float = 0.99
    teacher_grad: bool = False
    freeze_classifier: bool = False
    grl_lambda: float = 1.0
    adv_form: str = "swapped"
    lr_disc: float | None = None

    def __post_init__(self) -> None:
        if self.adapter not in ADAPTERS:
            raise ValueError(f"adapter must be one of {ADAPTERS}, got {self.adapter!r}")
        if self.backward_objective not in BACKWARD_OBJECTIVES:
            raise ValueError(f"backward_objective must be one of {BACKWARD_OBJECTIVES}")
        if self.adv_form not in ADV_FORMS:
            raise ValueError(f"adv_form must be one of {ADV_FORMS}")
        if self.teacher_update not in TEACHER_UPDATES:
            raise ValueError(f"teacher_update must be one of {TEACHER_UPDATES}")
        if self.T1 < 0 or self.T2 < 0:
            raise ValueError("epoch counts must be non-negative")
        if self.batch_forward < 1 or self.batch_backward < 1:
            raise ValueError("batch sizes must be positive")
        if not 0.0 <= self.ema_decay <= 1.0:
            raise ValueError("ema_decay must lie in [0, 1]")

    @classmethod
    def paper_parity(cls, **overrides) -> "TrainConfig":
        return cls(**overrides)

    @classmethod
    def desk(cls, **overrides) -> "TrainConfig":
        base = dict(T1=12, T2=6, lr_forward=0.003, lr_backward=0.0003)
        base.update(overrides)
        return cls(**base)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class StepRecord:
    epoch: int
    step: int
    loss_ce: float = 0.0
    loss_adv: float = 0.0
    loss_sd: float = 0.0
    disc_acc: float = 0.0
    stage: str = "forward"

    def finite(self) -> bool:
        return all(math.isfinite(getattr(self, c)) for c in TRACE_COLUMNS)


@dataclass
class TrainTrace:
    records: list = field(default_factory=list)
    snapshots: list = field(default_factory=list)

    def extend(self, other: "TrainTrace") -> "TrainTrace":
        self.records += other.records
        self.snapshots += other.snapshots
        return self

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(TRACE_COLUMNS)
        for r in self.records:
            w.writerow([r.epoch, r.step] + [repr(float(getattr(r, c))) for c in TRACE_COLUMNS[2:]])
        return buf.getvalue()


@dataclass
class StageOptimizers:
    extractor: torch.optim.Optimizer | None
    disc: torch.optim.Optimizer


def apply_thread_limit() -> None:
    n = os.environ.get("BIADAPT_THREADS")
    if n:
        torch.set_num_threads(max(1, int(n)))


def _sgd(params, lr: float, cfg: TrainConfig) -> torch.optim.Optimizer | None:
    params = list(params)
    if not params:
        return None
    return torch.optim.SGD(params, lr=lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay)


def make_optimizers(state: ModelState, cfg: TrainConfig, stage: str) -> StageOptimizers:
    if stage == "forward":
        ext = list(state.F.parameters()) + list(state.G.parameters())
        lr = cfg.lr_forward
    else:
        ext = list(state.F_prime.parameters())
        if not cfg.freeze_classifier:
            ext += list(state.G.parameters())
        if cfg.teacher_grad:
            ext += list(state.F.parameters())
        lr = cfg.lr_backward
    lr_q = lr if cfg.lr_disc is None else cfg.lr_disc
    return StageOptimizers(_sgd(ext, lr, cfg), _sgd(state.Q.parameters(), lr_q, cfg))


@contextmanager
def frozen(module: nn.Module):
    flags = [p.requires_grad for p in module.parameters()]
    for p in module.parameters():
        p.requires_grad_(False)
    try:
        yield
    finally:
        for p, f in zip(module.parameters(), flags):
            p.requires_grad_(f)


def _disc_acc(p_src: torch.Tensor, p_tgt: torch.Tensor) -> float:
    hits = (p_src > 0.5).sum() + (p_tgt <= 0.5).sum()
    return float(hits) / (len(p_src) + len(p_tgt))


def _disc_update(state: ModelState, extractor: nn.Module, x_s, x_t, opt) -> tuple[float, float]:
    """Sub-update (b): maximise the adversarial objective over Q on recomputed features."""
    with torch.no_grad():
        f_s = extract_features(extractor, x_s, state.cfg)
        f_t = extract_features(extractor, x_t, state.cfg)
    opt.zero_grad(set_to_none=True)
    p_s, p_t = discriminate(state.Q, f_s), discriminate(state.Q, f_t)
    adv = L.loss_adv(p_s, p_t)
    (-adv).backward()
    opt.step()
    return float(adv.detach()), _disc_acc(p_s.detach(), p_t.detach())


def extractor_adv(p_src: torch.Tensor, p_tgt: torch.Tensor, cfg: TrainConfig) -> torch.Tensor:
    """Adversarial quantity the extractor *maximises* (subtracted in loss_fas / loss_bas)."""
    if cfg.adv_form == "swapped":
        return L.loss_adv(p_tgt, p_src)
    return L.domain_confusion(p_src, p_tgt)


def _check(record: StepRecord) -> StepRecord:
    vals = [getattr(record, c) for c in TRACE_COLUMNS[2:]]
    if not all(math.isfinite(v) and abs(v) <= DIVERGENCE_LIMIT for v in vals):
        raise DivergenceError(f"divergence at {record.stage} epoch {record.epoch} step {record.step}: "
                              f"{record}", record)
    return record


def adversarial_step(state: ModelState, src_batch, tgt_batch, cfg: TrainConfig, stage: str = "forward",
                     optim: StageOptimizers | None = None, epoch: int = 0, step: int = 0
                     ) -> tuple[ModelState, StepRecord]:
    """One alternating update (extractor side, then discriminator side) for the given stage.

    ``src_batch`` is ``(images, labels)``; ``tgt_batch`` holds images only.
    """
    x_s, y_s = src_batch
    x_t = tgt_batch
    if len(x_s) == 0 or len(x_t) == 0:
        raise ValueError("adversarial_step needs non-empty source and target batches")
    if stage not in ("forward", "backward"):
        raise ValueError(f"unknown stage {stage!r}")
    optim = optim or make_optimizers(state, cfg, stage)
    w = cfg.weights
    ce_v = adv_v = sd_v = acc = 0.0

    if stage == "forward":
        joint_q = cfg.adapter == "GRL" and w.alpha2 > 0
        if optim.extractor is not None:
            optim.extractor.zero_grad(set_to_none=True)
        if joint_q:
            optim.disc.zero_grad(set_to_none=True)
        ctx = frozen(state.Q) if not joint_q else _nullctx()
        with ctx:
            f_s = extract_features(state.F, x_s, state.cfg)
            ce = L.loss_ce(classify(state.G, f_s), y_s)
            ce_v = float(ce.detach())
            obj = w.alpha1 * ce
            if w.alpha2 > 0 and cfg.adapter != "none":
                f_t = extract_features(state.F, x_t, state.cfg)
                if cfg.adapter == "FA":
                    p_s, p_t = discriminate(state.Q, f_s), discriminate(state.Q, f_t)
                    obj = L.loss_fas(ce, extractor_adv(p_s, p_t, cfg), w)
                elif cfg.adapter == "GRL":
                    p_s = discriminate(state.Q, L.gradient_reversal(f_s, cfg.grl_lambda))
                    p_t = discriminate(state.Q, L.gradient_reversal(f_t, cfg.grl_lambda))
                    adv = L.loss_adv(p_s, p_t)
                    adv_v, acc = float(adv.detach()), _disc_acc(p_s.detach(), p_t.detach())
                    obj = w.alpha1 * ce - w.alpha2 * adv
                else:
                    mmd = L.loss_mmd(f_s, f_t)
                    adv_v = float(mmd.detach())
                    obj = w.alpha1 * ce + w.alpha2 * mmd
            _check(StepRecord(epoch, step, ce_v, adv_v, 0.0, acc, stage))
            if obj.requires_grad:
                obj.backward()
                if optim.extractor is not None:
                    optim.extractor.step()
                if joint_q:
                    optim.disc.step()
        if cfg.adapter == "FA" and w.alpha2 > 0:
            adv_v, acc = _disc_update(state, state.F, x_s, x_t, optim.disc)
    else:
        if optim.extractor is not None:
            optim.extractor.zero_grad(set_to_none=True)
        with frozen(state.Q):
            term = None
            if cfg.backward_objective != "none" or w.alpha4 > 0:
                f_t = extract_features(state.F_prime, x_t, state.cfg)
                s_logits = classify(state.G, f_t)
            if cfg.backward_objective == "SD":
                if cfg.teacher_grad:
                    t_logits = classify(state.G, extract_features(state.F, x_t, state.cfg))
                else:
                    with torch.no_grad():
                        t_logits = classify(state.G, extract_features(state.F, x_t, state.cfg))
                term = L.loss_sd(t_logits, s_logits, w.tau, detach_teacher=not cfg.teacher_grad)
            elif cfg.backward_objective == "ENT":
                term = L.loss_entropy_min(s_logits)
            if term is not None:
                sd_v = float(term.detach())
            obj = w.alpha3 * term if term is not None else None
            if w.alpha4 > 0:
                f_s = extract_features(state.F_prime, x_s, state.cfg)
                conf = extractor_adv(discriminate(state.Q, f_s), discriminate(state.Q, f_t), cfg)
                obj = L.loss_bas(term if term is not None else 0.0, conf, w)
            _check(StepRecord(epoch, step, 0.0, 0.0, sd_v, 0.0, stage))
            if obj is not None and obj.requires_grad and optim.extractor is not None:
                obj.backward()
                optim.extractor.step()
        if w.alpha4 > 0:
            adv_v, acc = _disc_update(state, state.F_prime, x_s, x_t, optim.disc)

    return state, _check(StepRecord(epoch, step, ce_v, adv_v, sd_v, acc, stage))


@contextmanager
def _nullctx():
    yield


# --------------------------------------------------------------------------- data plumbing

def _stage_id(stage: str) -> int:
    return {"forward": 1, "backward": 2}[stage]


def _batches(n: int, batch: int, rng: np.random.Generator) -> list[np.ndarray]:
    perm = rng.permutation(n)
    if n <= batch:
        return [perm]
    return [perm[i * batch:(i + 1) * batch] for i in range(n // batch)]


def paired_batches(n_src: int, n_tgt: int, batch: int, seed: int, stage: str, epoch: int,
                   lead: str = "longer") -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Zip independently shuffled source/target index batches, re-cycling the shorter.

    ``lead="longer"`` runs as many steps as the longer loader has batches,
    ``lead="target"`` as many as the target loader.
    """
    src = _batches(n_src, batch, np.random.default_rng([seed, _stage_id(stage), epoch, 0]))
    tgt = _batches(n_tgt, batch, np.random.default_rng([seed, _stage_id(stage), epoch, 1]))
    steps = len(tgt) if lead == "target" else max(len(src), len(tgt))
    for i in range(steps):
        yield src[i % len(src)], tgt[i % len(tgt)]


@dataclass
class StageData:
    """Tensors for one stage: labeled source train split and the label-free target pool."""

    x_src: torch.Tensor
    y_src: torch.Tensor
    x_tgt: torch.Tensor

    @classmethod
    def from_scenario(cls, scenario: Scenario, dtype: torch.dtype) -> "StageData":
        x_s, y_s = scenario.source.arrays("train")
        x_t = np.stack([s.image for s in scenario.target_pool])
        return cls(to_nchw(x_s).to(dtype), torch.as_tensor(y_s), to_nchw(x_t).to(dtype))


def _dtype(state: ModelState) -> torch.dtype:
    return next(state.G.parameters()).dtype


EpochHook = Callable[[ModelState, int, str], dict | None]


def _run_stage(state: ModelState, data: StageData, cfg: TrainConfig, stage: str, epochs: int,
               batch: int, lead: str, on_epoch: EpochHook | None) -> TrainTrace:
    trace = TrainTrace()
    optim = make_optimizers(state, cfg, stage)
    step = 0
    for epoch in range(epochs):
        for si, ti in paired_batches(len(data.x_src), len(data.x_tgt), batch, cfg.seed, stage, epoch, lead):
            _, rec = adversarial_step(state, (data.x_src[si], data.y_src[si]), data.x_tgt[ti], cfg, stage,
                                      optim, epoch, step)
            trace.records.append(rec)
            step += 1
        if stage == "backward":
            teacher_sync(state, cfg)
        if on_epoch is not None:
            snap = on_epoch(state, epoch, stage)
            if snap is not None:
                trace.snapshots.append({"stage": stage, "epoch": epoch, **snap})
        log.debug("%s epoch %d done (%d steps)", stage, epoch, step)
    return trace


def forward_adaptation_stage(state: ModelState, scenario: Scenario | None, cfg: TrainConfig,
                             on_epoch: EpochHook | None = None, data: StageData | None = None
                             ) -> tuple[ModelState, TrainTrace]:
    if scenario is not None and not scenario.source.labeled:
        raise ValueError("forward adaptation needs a labeled source domain")
    data = data or StageData.from_scenario(scenario, _dtype(state))
    trace = _run_stage(state, data, cfg, "forward", cfg.T1, cfg.batch_forward, "longer", on_epoch)
    init_student_from_teacher(state)
    return state, trace


def backward_adaptation_stage(state: ModelState, scenario: Scenario | None, cfg: TrainConfig,
                              on_epoch: EpochHook | None = None, data: StageData | None = None
                              ) -> tuple[ModelState, TrainTrace]:
    init_student_from_teacher(state)
    data = data or StageData.from_scenario(scenario, _dtype(state))
    trace = _run_stage(state, data, cfg, "backward", cfg.T2, cfg.batch_backward, "target", on_epoch)
    return state, trace


@torch.no_grad()
def teacher_sync(state: ModelState, cfg: TrainConfig) -> ModelState:
    teacher = dict(state.F.named_parameters())
    student = dict(state.F_prime.named_parameters())
    if teacher.keys() != student.keys():
        raise StateCorruptionError("teacher and student parameter sets differ in structure")
    for k, p in teacher.items():
        q = student[k]
        if p.shape != q.shape:
            raise StateCorruptionError(f"shape mismatch for {k}: {tuple(p.shape)} vs {tuple(q.shape)}")
        if cfg.teacher_update == "copy":
            p.copy_(q)
        else:
            p.mul_(cfg.ema_decay).add_(q, alpha=1.0 - cfg.ema_decay)
    return state


def train(scenario: Scenario, cfg: TrainConfig, backbone: BackboneConfig | None = None,
          state: ModelState | None = None, checkpoint_dir: str | Path | None = None,
          on_epoch: EpochHook | None = None) -> tuple[ModelState, TrainTrace]:
    """Forward then backward stage; the final detector is G o F'."""
    apply_thread_limit()
    if state is None:
        state = build_model_state(backbone or BackboneConfig(), seed=cfg.seed)
    data = StageData.from_scenario(scenario, _dtype(state))
    state, trace = forward_adaptation_stage(state, scenario, cfg, on_epoch, data)
    if checkpoint_dir is not None:
        save_checkpoint(state, Path(checkpoint_dir) / "forward.pt")
    state, back = backward_adaptation_stage(state, scenario, cfg, on_epoch, data)
    trace.extend(back)
    if checkpoint_dir is not None:
        save_checkpoint(state, Path(checkpoint_dir) / "backward.pt")
    return state, trace


def baseline_config(cfg: TrainConfig) -> TrainConfig:
    """Source-only supervised training with otherwise identical settings."""
    return replace(cfg, adapter="none", weights=replace(cfg.weights, alpha2=0.0, alpha4=0.0),
                   backward_objective="none", T2=0)
