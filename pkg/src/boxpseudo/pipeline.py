"""End-to-end synthetic benchmark: world -> samples -> simulation -> training -> table."""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, replace

import torch

from .evaluation import (BenchmarkTable, labeler_method, majority_predictions, run_benchmark,
                         smaller_box_predictions, evaluate)
from .labeler import Labeler, LabelerConfig, prepare
from .overlap import extract_object_bank, extract_overlap_samples
from .simgen import SimConfig, generate_corpus, harvest_stats
from .synth import WorldConfig, generate_world, overlap_fraction
from .trainer import MetricsLog, TrainConfig, finetune_smt, pretrain

log = logging.getLogger(__name__)


@dataclass
class BenchmarkConfig:
    train_scenes: int = 50
    eval_scenes: int = 10
    superpoint_size: float = 0.15
    sim_count: int = 2000
    floor_point_rate: float = 100.0
    labeler: LabelerConfig = field(default_factory=LabelerConfig)
    train: TrainConfig = field(default_factory=lambda: TrainConfig(real_batch=8, ema_decay=0.99))
    no_ssg: bool = True
    eval_every: int | None = None
    seed: int = 0

    def small(self, sim_count=200, sim_epochs=3, train_scenes=12, eval_scenes=4):
        """Reduced copy for quick runs (determinism checks, smoke tests)."""
        return replace(self, train_scenes=train_scenes, eval_scenes=eval_scenes, sim_count=sim_count,
                       train=replace(self.train, sim_epochs=sim_epochs, real_epochs=2))


@dataclass
class PipelineResult:
    table: BenchmarkTable
    overlap_fraction: float
    counts: dict
    manifest: dict
    metrics: list
    curves: dict           # method -> [(step, eval mAcc)]
    models: dict = field(default_factory=dict)


def build_data(cfg: BenchmarkConfig):
    world = WorldConfig(num_scenes=cfg.train_scenes, superpoint_size=cfg.superpoint_size, seed=cfg.seed)
    train = generate_world(world)
    evals = generate_world(replace(world, num_scenes=cfg.eval_scenes, seed=cfg.seed + 1000))
    train_samples = [s for sc in train for s in extract_overlap_samples(sc)]
    eval_samples = [s for sc in evals for s in extract_overlap_samples(sc)]
    bank = extract_object_bank(train)
    stats = harvest_stats(train_samples)
    sim_cfg = SimConfig(superpoint_size=cfg.superpoint_size, floor_point_rate=cfg.floor_point_rate,
                        rng_seed=cfg.seed)
    sim, manifest = generate_corpus(stats, bank, cfg.sim_count, sim_cfg)
    return train, evals, train_samples, eval_samples, sim, manifest


def run_pipeline(cfg: BenchmarkConfig, metrics_path=None) -> PipelineResult:
    train, _, train_samples, eval_samples, sim, manifest = build_data(cfg)
    frac = overlap_fraction(train)
    log.info("world: %d train scenes (overlap fraction %.2f), %d real / %d eval samples, %d simulated",
             len(train), frac, len(train_samples), len(eval_samples), len(sim))
    metrics = MetricsLog(metrics_path)
    hook = (lambda teacher: evaluate(teacher, eval_samples)) if cfg.eval_every else None

    torch.manual_seed(cfg.seed)
    model = Labeler(cfg.labeler)
    pretrain(model, sim, cfg.train, metrics, prepared=[prepare(s, model.encoder) for s in sim])
    ssg = finetune_smt(model, train_samples, cfg.train, metrics, eval_hook=hook, eval_every=cfg.eval_every)
    methods = {"smaller-box": smaller_box_predictions, "majority": majority_predictions,
               "saformer": labeler_method(ssg.model)}
    curves = {"saformer": ssg.curve}
    models = {"saformer": ssg.model}
    if cfg.no_ssg:
        torch.manual_seed(cfg.seed)
        fresh = finetune_smt(Labeler(cfg.labeler), train_samples, cfg.train, MetricsLog(),
                             eval_hook=hook, eval_every=cfg.eval_every)
        methods["saformer-no-ssg"] = labeler_method(fresh.model)
        curves["saformer-no-ssg"] = fresh.curve
        models["saformer-no-ssg"] = fresh.model
    table = run_benchmark(methods, eval_samples)
    counts = {"train_samples": len(train_samples), "eval_samples": len(eval_samples), "sim_samples": len(sim)}
    return PipelineResult(table, frac, counts, manifest, metrics.records, curves, models)


def config_dict(cfg: BenchmarkConfig):
    return asdict(cfg)
