"""Pretraining on simulated samples and Mean-Teacher fine-tuning on real ones."""
from __future__ import annotations

import copy
import hashlib
import json
import math
import os
from dataclasses import asdict, dataclass, field, fields

import numpy as np
import torch

from .augment import AugmentConfig, augment
from .labeler import Labeler, LabelerConfig, collate, prepare
from .losses import LossWeights, class_loss, loss_sim, loss_sup, loss_unsup
from .overlap import S3
from .scene import FormatError, read_container, write_container

CHECKPOINT_VERSION = "1"


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""


@dataclass
class TrainConfig:
    sim_epochs: int = 100
    sim_batch: int = 64
    real_epochs: int = 5
    real_batch: int = 64
    ema_decay: float = 0.999
    lr: float = 1e-3
    schedule: str = "cosine"
    weights: LossWeights = field(default_factory=LossWeights)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.ema_decay < 1.0:
            raise ValueError("ema_decay must lie in (0, 1)")
        if min(self.sim_epochs, self.real_epochs, self.sim_batch, self.real_batch) < 1:
            raise ValueError("epochs and batch sizes must be >= 1")
        if self.schedule not in ("cosine", "constant"):
            raise ValueError(f"unknown schedule {self.schedule!r}")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "weights" in d:
            d["weights"] = LossWeights(**d["weights"])
        if "augment" in d:
            d["augment"] = AugmentConfig(**d["augment"])
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


def config_hash(*configs):
    blob = json.dumps([asdict(c) for c in configs], sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def param_hash(module):
    """Digest of every parameter's bytes, for detecting unexpected writes."""
    h = hashlib.sha256()
    for name, p in module.named_parameters():
        h.update(name.encode())
        h.update(p.detach().cpu().numpy().tobytes())
    return h.hexdigest()


@torch.no_grad()
def ema_update(teacher, student, alpha):
    """theta_t <- alpha * theta_t + (1 - alpha) * theta_s, in place on ``teacher``."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must lie in [0, 1]")
    tp = dict(teacher.named_parameters())
    sp = dict(student.named_parameters())
    if tp.keys() != sp.keys():
        raise ValueError("teacher and student have different parameter sets")
    for name, t in tp.items():
        s = sp[name]
        if t.shape != s.shape:
            raise ValueError(f"shape mismatch for {name}: {tuple(t.shape)} vs {tuple(s.shape)}")
    for name, t in tp.items():
        t.mul_(alpha).add_(sp[name], alpha=1.0 - alpha)
    return teacher


def _optimizer(model, cfg: TrainConfig, total_steps):
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    if cfg.schedule == "cosine":
        sched = torch.optim.lr_scheduler.LambdaLR(
            opt, lambda s: 0.5 * (1 + math.cos(math.pi * min(s, total_steps) / max(total_steps, 1))))
    else:
        sched = torch.optim.lr_scheduler.LambdaLR(opt, lambda s: 1.0)
    return opt, sched


class MetricsLog:
    """Line-delimited JSON metrics; a no-op when ``path`` is None."""

    def __init__(self, path=None):
        self.path = path
        self.records = []
        if path:
            os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
            open(path, "w").close()

    def write(self, **record):
        rec = {k: (float(v) if isinstance(v, (torch.Tensor, np.floating)) else v) for k, v in record.items()}
        self.records.append(rec)
        if self.path:
            with open(self.path, "a") as f:
                f.write(json.dumps(rec) + "\n")


def _check_finite(loss, step, phase, parts):
    if not torch.isfinite(loss):
        detail = ", ".join(f"{k}={v.item():.4g}" for k, v in parts.items())
        raise DivergenceError(f"{phase} diverged at step {step}: loss={loss.item()} ({detail})")


def _batches(lengths, batch, rng, pool=8):
    """Shuffled batches of similar token counts to limit padding.

    Indices are permuted, cut into pools of ``pool`` batches, sorted by length
    inside each pool, then the resulting batches are shuffled.
    """
    order = rng.permutation(len(lengths))
    lengths = np.asarray(lengths)
    out = []
    span = batch * pool
    for i in range(0, len(order), span):
        chunk = order[i:i + span]
        chunk = chunk[np.argsort(lengths[chunk], kind="stable")]
        out.extend(chunk[j:j + batch] for j in range(0, len(chunk), batch))
    return [out[k] for k in rng.permutation(len(out))]


@dataclass
class TrainResult:
    model: Labeler
    losses: list
    steps: int
    optimizer: torch.optim.Optimizer | None = None
    student: Labeler | None = None
    curve: list = field(default_factory=list)   # (step, eval value) pairs from the eval hook


def pretrain(model: Labeler, samples, cfg: TrainConfig, metrics: MetricsLog | None = None, prepared=None):
    """Fully supervised training on simulated samples with ground truth.

    ``prepared`` may hold precomputed ``prepare`` outputs for ``samples``.
    """
    if prepared is None:
        prepared = [prepare(s, model.encoder) for s in samples]
    if not prepared:
        raise ValueError("empty simulated corpus")
    if any(p.targets is None for p in prepared):
        raise ValueError("simulated samples must carry ground truth labels")
    metrics = metrics or MetricsLog()
    steps_per_epoch = math.ceil(len(prepared) / cfg.sim_batch)
    opt, sched = _optimizer(model, cfg, cfg.sim_epochs * steps_per_epoch)
    lengths = [len(p.tokens) for p in prepared]
    losses = []
    step = 0
    model.train()
    for epoch in range(cfg.sim_epochs):
        rng = np.random.default_rng([cfg.seed, 0, epoch])
        for idx in _batches(lengths, cfg.sim_batch, rng):
            batch = collate([prepared[i] for i in idx])
            logits, cls_logits, _ = model(batch)
            per_sample, parts = loss_sim(logits, cls_logits, batch.targets, batch.token_mask,
                                         batch.categories, cfg.weights)
            loss = per_sample.mean()
            _check_finite(loss, step, "pretrain", {k: v.mean() for k, v in parts.items()})
            opt.zero_grad()
            loss.backward()
            opt.step()
            sched.step()
            losses.append(loss.item())
            metrics.write(phase="pretrain", step=step, epoch=epoch, loss=loss.item(),
                          l_cls=parts["l_cls"].mean().item(), l_bce=parts["l_bce"].mean().item(),
                          l_dice=parts["l_dice"].mean().item(), lr=sched.get_last_lr()[0])
            step += 1
    return TrainResult(model, losses, step, opt)


def finetune_smt(model: Labeler, samples, cfg: TrainConfig, metrics: MetricsLog | None = None,
                 eval_hook=None, eval_every=None, prepared=None):
    """Mean-Teacher fine-tuning on real overlap samples.

    ``model`` initializes both labelers (pretrained, or fresh for the no-SSG
    ablation). Per step the teacher sees the original samples without
    gradients, the student sees augmented copies, the student takes one Adam
    step on cls + sup + unsup, then the teacher follows by EMA. Returns the
    final teacher in ``TrainResult.model``.

    ``eval_hook(teacher)`` is called every ``eval_every`` steps and at the end.
    """
    samples = list(samples)
    if not samples:
        raise ValueError("no real overlap samples to fine-tune on")
    student = model
    teacher = copy.deepcopy(model)
    for p in teacher.parameters():
        p.requires_grad_(False)
    if prepared is None:
        prepared = [prepare(s, teacher.encoder, use_gt_targets=False) for s in samples]
    metrics = metrics or MetricsLog()
    steps_per_epoch = math.ceil(len(samples) / cfg.real_batch)
    opt, sched = _optimizer(student, cfg, cfg.real_epochs * steps_per_epoch)
    w = cfg.weights
    losses, curve = [], []
    step = 0

    def run_eval():
        if eval_hook is not None:
            curve.append((step, eval_hook(teacher)))

    run_eval()
    student.train()
    teacher.eval()
    for epoch in range(cfg.real_epochs):
        rng = np.random.default_rng([cfg.seed, 1, epoch])
        for idx in _batches([len(p.tokens) for p in prepared], cfg.real_batch, rng):
            orig = [prepared[i] for i in idx]
            aug = [prepare(augment(samples[i], np.random.default_rng([cfg.seed, 2, epoch, int(i)]), cfg.augment),
                           student.encoder, use_gt_targets=False) for i in idx]
            tb, sb = collate(orig), collate(aug)
            with torch.no_grad():
                t_logits, _, _ = teacher(tb)
            s_logits, s_cls, _ = student(sb)
            l_cls = class_loss(s_cls, sb.categories)
            l_sup = loss_sup(s_logits, sb.region, w)
            l_unsup, gated, n_s3 = loss_unsup(s_logits, t_logits, sb.region == S3, w)
            loss = (w.cls * l_cls + l_sup + l_unsup).mean()
            parts = {"l_cls": l_cls.mean(), "l_sup": l_sup.mean(), "l_unsup": l_unsup.mean()}
            _check_finite(loss, step, "finetune", parts)
            opt.zero_grad()
            loss.backward()
            opt.step()
            sched.step()
            ema_update(teacher, student, cfg.ema_decay)
            step += 1
            losses.append(loss.item())
            metrics.write(phase="finetune", step=step - 1, epoch=epoch, loss=loss.item(),
                          **{k: v.item() for k, v in parts.items()},
                          coverage=float(gated) / max(int(n_s3), 1), lr=sched.get_last_lr()[0])
            if eval_every and step % eval_every == 0:
                run_eval()
    if not curve or curve[-1][0] != step:
        run_eval()
    return TrainResult(teacher, losses, step, opt, student=student, curve=curve)


# -- checkpoints --------------------------------------------------------------

def save_checkpoint(path, model: Labeler, train_cfg: TrainConfig | None = None, optimizer=None, step=0,
                    extra=None):
    arrays = {}
    for name, t in model.encoder.state_dict().items():
        arrays[f"encoder/{name}"] = t.detach().cpu().numpy()
    for name, t in model.decoder.state_dict().items():
        arrays[f"decoder/{name}"] = t.detach().cpu().numpy()
    groups = None
    if optimizer is not None:
        sd = optimizer.state_dict()
        for pid, state in sd["state"].items():
            for key, v in state.items():
                arrays[f"optimizer/{pid}/{key}"] = torch.as_tensor(v).detach().cpu().numpy()
        groups = sd["param_groups"]
    arrays["rng_state"] = torch.get_rng_state().numpy()
    meta = {
        "kind": "labeler",
        "checkpoint_version": CHECKPOINT_VERSION,
        "step": int(step),
        "labeler": asdict(model.cfg),
        "train": None if train_cfg is None else train_cfg.to_dict(),
        "config_hash": config_hash(model.cfg, *( [train_cfg] if train_cfg else [])),
        "optimizer_groups": groups,
        "extra": extra or {},
    }
    write_container(path, arrays, meta)


def load_checkpoint(path, with_optimizer=False):
    """Returns (model, meta) or (model, meta, optimizer) when requested."""
    arrays, meta = read_container(path)
    if meta.get("kind") != "labeler":
        raise FormatError(f"{path}: not a labeler checkpoint")
    if meta.get("checkpoint_version") != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {meta.get('checkpoint_version')!r}")
    model = Labeler(LabelerConfig(**meta["labeler"]))
    for part in ("encoder", "decoder"):
        module = getattr(model, part)
        prefix = part + "/"
        sd = {k[len(prefix):]: torch.as_tensor(v) for k, v in arrays.items() if k.startswith(prefix)}
        try:
            module.load_state_dict(sd)
        except RuntimeError as e:
            raise FormatError(f"{path}: {part} segment does not match the stored config: {e}") from None
    if not with_optimizer:
        return model, meta
    opt = torch.optim.Adam(model.parameters())
    if meta.get("optimizer_groups"):
        state = {}
        for k, v in arrays.items():
            if k.startswith("optimizer/"):
                _, pid, key = k.split("/", 2)
                state.setdefault(int(pid), {})[key] = torch.as_tensor(v)
        opt.load_state_dict({"state": state, "param_groups": meta["optimizer_groups"]})
    return model, meta, opt
