"""Two-stage instruction tuning.

Stage 1 teaches map QA (lane counts, cross-sections, quality, scene type)
from rendered frames plus annotation text; stage 2 starts from a stage-1
checkpoint and teaches visibility answers. Both stages train only the
projection and adapter factors (plus patch embeddings behind a config
flag); everything else stays frozen, which the before/after digest in the
report makes checkable.

Determinism: given the same seed, corpus, and config, the loss trace and
final parameters are identical run to run. Batch order comes from a
label-forked RNG, never from dict or filesystem order.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .checkpoint import load_checkpoint, save_checkpoint
from .errors import ContractError, DataError, TrainAbort
from .model import (Model, ModelConfig, expected_shapes, frozen_digest,
                    mark_trainable, trainable_names)
from .optim import LrSchedule, OptimState, adamw_step
from .tensor import Rng, Tape
from .vocab import EOS, Vocabulary

PAPER_MAX_LR = 1e-5
TOY_MAX_LR = 1e-3
STAGE_EPOCHS = {1: 20, 2: 10}


@dataclass
class TrainConfig:
    stage: int = 1
    epochs: int = None
    batch_size: int = 8
    seed: int = 0
    max_lr: float = None
    min_lr: float = 0.0
    warmup_ratio: float = 0.05
    weight_decay: float = 0.01
    max_steps: int = None
    fidelity: str = "toy"
    checkpoint_every: int = 0  # epochs between mid-run saves; 0 = end only

    def __post_init__(self):
        if self.stage not in (1, 2):
            raise ContractError(f"unknown stage {self.stage}")
        if self.fidelity not in ("toy", "paper"):
            raise ContractError(f"unknown fidelity {self.fidelity!r}")
        if self.epochs is None:
            self.epochs = STAGE_EPOCHS[self.stage]
        if self.epochs < 0:
            raise ContractError("epochs must be >= 0")
        if self.max_lr is None:
            self.max_lr = PAPER_MAX_LR if self.fidelity == "paper" else TOY_MAX_LR


@dataclass
class TrainReport:
    stage: int
    steps: int
    loss_trace: list = field(default_factory=list)
    epoch_token_acc: list = field(default_factory=list)
    wall_time: float = 0.0
    checkpoint_path: str = None
    digest_before: str = ""
    digest_after: str = ""

    def to_dict(self):
        return {
            "stage": self.stage, "steps": self.steps,
            "loss_trace": self.loss_trace,
            "epoch_token_acc": self.epoch_token_acc,
            "wall_time": self.wall_time,
            "checkpoint_path": self.checkpoint_path,
            "digest_before": self.digest_before,
            "digest_after": self.digest_after,
            "frozen_unchanged": self.digest_before == self.digest_after,
        }


@dataclass
class EncodedSample:
    frame_id: str
    ann_ids: list
    q_ids: list
    ans_ids: list  # ends with EOS
    gold: str
    category: str


def encode_samples(samples, vocab: Vocabulary):
    out = []
    for s in samples:
        out.append(EncodedSample(
            frame_id=s.frame_id,
            ann_ids=vocab.encode(s.annotation) if s.annotation else [],
            q_ids=vocab.encode(s.question),
            ans_ids=vocab.encode(s.gold) + [EOS],
            gold=s.gold, category=s.category))
    return out


class VisualCache:
    """Grouped visual tokens per frame. Valid only while the visual path
    is frozen; with trainable patch embeddings every loss must rebuild the
    visual graph, so the cache is bypassed."""

    def __init__(self, model: Model, images: dict):
        self.model = model
        self.images = images
        self.frozen = not model.cfg.train_embeddings
        self._cache = {}

    def grouped(self, frame_id):
        if frame_id not in self.images:
            raise DataError(f"no rendered image for frame {frame_id!r}")
        if not self.frozen:
            return self.model.visual_grouped(self.images[frame_id])
        if frame_id not in self._cache:
            vt = self.model.visual_grouped(self.images[frame_id])
            vt.mat.a.setflags(write=False)
            self._cache[frame_id] = vt
        return self._cache[frame_id]


def trainable_params(model: Model) -> dict:
    names = trainable_names(model.cfg)
    return {n: model.params[n] for n in sorted(names)}


def token_accuracy(model: Model, encoded, cache: VisualCache) -> float:
    """Teacher-forced argmax accuracy over every answer token."""
    hit = total = 0
    for s in encoded:
        pred = model.answer_ids(cache.grouped(s.frame_id), s.ann_ids,
                                s.q_ids, s.ans_ids)
        hit += sum(int(p == a) for p, a in zip(pred, s.ans_ids))
        total += len(s.ans_ids)
    return hit / total if total else 0.0


def exact_match(model: Model, encoded, cache: VisualCache, vocab: Vocabulary,
                max_new=32):
    """Fraction of samples whose greedy generation decodes to the gold
    answer string."""
    hits = 0
    for s in encoded:
        ids = model.generate(cache.grouped(s.frame_id), s.ann_ids, s.q_ids,
                             max_new=max_new)
        if vocab.decode(ids) == s.gold:
            hits += 1
    return hits / len(encoded) if encoded else 0.0


def train_stage(model: Model, samples, images: dict, vocab: Vocabulary,
                cfg: TrainConfig, out_path=None, stages_done=()):
    """Run one stage; returns a TrainReport. ``images`` maps frame_id to
    an image pixel array. ``stages_done`` lists stages already trained
    into ``model`` (stage 2 demands stage 1)."""
    if cfg.stage == 2 and 1 not in stages_done:
        raise ContractError("stage 2 requires a stage-1 checkpoint")
    if not samples:
        raise ContractError("empty training corpus")
    mark_trainable(model.params, model.cfg)
    encoded = encode_samples(samples, vocab)
    cache = VisualCache(model, images)
    params = trainable_params(model)
    digest_before = frozen_digest(model.params, model.cfg)

    steps_per_epoch = (len(encoded) + cfg.batch_size - 1) // cfg.batch_size
    planned = cfg.epochs * steps_per_epoch
    if cfg.max_steps is not None:
        planned = min(planned, cfg.max_steps)
    report = TrainReport(stage=cfg.stage, steps=0,
                         digest_before=digest_before,
                         digest_after=digest_before)
    started = time.monotonic()
    if planned == 0:
        report.wall_time = time.monotonic() - started
        if out_path is not None:
            report.checkpoint_path = str(out_path)
            save_model(out_path, model, vocab,
                       stages_done=tuple(stages_done) + (cfg.stage,))
        return report

    sched = LrSchedule(max_lr=cfg.max_lr, warmup_ratio=cfg.warmup_ratio,
                       total_steps=planned, min_lr=cfg.min_lr)
    state = OptimState(weight_decay=cfg.weight_decay)
    rng = Rng(cfg.seed).fork(f"train.stage{cfg.stage}")

    done = False
    for epoch in range(cfg.epochs):
        order = rng.fork(f"epoch.{epoch}").shuffled(list(range(len(encoded))))
        for b0 in range(0, len(order), cfg.batch_size):
            batch = [encoded[i] for i in order[b0:b0 + cfg.batch_size]]
            with Tape() as tape:
                losses = [model.sample_loss(cache.grouped(s.frame_id),
                                            s.ann_ids, s.q_ids, s.ans_ids)
                          for s in batch]
                loss = T.scale(T.sum_scalars(losses), 1.0 / len(batch))
                value = loss.item()
                if not np.isfinite(value):
                    raise TrainAbort("non-finite training loss", step=state.step + 1)
                tape.backward(loss)
            grads = {n: p.grad for n, p in params.items()}
            lr = sched.lr_at(state.step + 1)
            adamw_step(params, grads, state, lr)
            for p in params.values():
                p.zero_grad()
            report.loss_trace.append(value)
            report.steps = state.step
            if cfg.max_steps is not None and state.step >= cfg.max_steps:
                done = True
                break
        report.epoch_token_acc.append(token_accuracy(model, encoded, cache))
        if done:
            break
        if (cfg.checkpoint_every and out_path is not None
                and (epoch + 1) % cfg.checkpoint_every == 0
                and epoch + 1 < cfg.epochs):
            save_model(out_path, model, vocab,
                       stages_done=tuple(stages_done) + (cfg.stage,),
                       optim=state)

    report.digest_after = frozen_digest(model.params, model.cfg)
    report.wall_time = time.monotonic() - started
    if out_path is not None:
        report.checkpoint_path = str(out_path)
        save_model(out_path, model, vocab,
                   stages_done=tuple(stages_done) + (cfg.stage,), optim=state)
    return report


# ---------------------------------------------------------------------------
# Checkpoint plumbing
# ---------------------------------------------------------------------------

def save_model(path, model: Model, vocab: Vocabulary, stages_done=(), optim=None):
    matrices = dict(model.params)
    meta = {
        "config": model.cfg.to_dict(),
        "vocab": list(vocab.tokens),
        "stages": sorted(set(stages_done)),
    }
    if optim is not None:
        meta["optim"] = {"step": optim.step, "beta1": optim.beta1,
                         "beta2": optim.beta2, "eps": optim.eps,
                         "weight_decay": optim.weight_decay}
        for name, m in optim.m.items():
            matrices[f"opt.m/{name}"] = m
            matrices[f"opt.v/{name}"] = optim.v[name]
    save_checkpoint(path, matrices, meta=meta)


def load_model(path):
    """Returns (model, vocab, stages_done, optim_state_or_None)."""
    matrices, meta = load_checkpoint(path)
    if "config" not in meta or "vocab" not in meta:
        raise DataError(f"{path}: checkpoint lacks model metadata")
    cfg = ModelConfig.from_dict(meta["config"])
    vocab = Vocabulary(meta["vocab"])
    shapes = expected_shapes(cfg)
    params = {}
    for name, shape in shapes.items():
        if name not in matrices:
            raise DataError(f"{path}: missing tensor '{name}'")
        m = matrices[name]
        if m.shape != shape:
            raise DataError(
                f"{path}: tensor '{name}' has shape {m.shape}, config wants {shape}")
        m.name = name
        params[name] = m
    model = Model(cfg, params)
    mark_trainable(model.params, cfg)
    optim = None
    if "optim" in meta:
        o = meta["optim"]
        optim = OptimState(beta1=o["beta1"], beta2=o["beta2"], eps=o["eps"],
                           weight_decay=o["weight_decay"], step=o["step"])
        for name in shapes:
            key = f"opt.m/{name}"
            if key in matrices:
                optim.m[name] = matrices[key].a
                optim.v[name] = matrices[f"opt.v/{name}"].a
    return model, vocab, tuple(meta.get("stages", ())), optim
