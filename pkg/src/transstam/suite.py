"""Standard synthetic suite, leave-one-seed-out evaluation and ablation arms."""

from __future__ import annotations

import logging
import statistics
import time
from dataclasses import dataclass, field, replace

from .data import SynthSpec, synth_generate
from .metrics import EvalReport, evaluate
from .model import ModelConfig
from .tracker import TrackerConfig, run_sequence
from .training import LabeledSequence, OptimizerConfig, replace_gt_with_detections, train

log = logging.getLogger(__name__)

PE_ARMS = {
    "none": dict(use_aspe=False, use_rstpe=False),
    "aspe": dict(use_aspe=True, use_rstpe=False),
    "rstpe": dict(use_aspe=False, use_rstpe=True),
    "both": dict(use_aspe=True, use_rstpe=True),
}
FUSION_ARMS = {name: dict(fusion=name) for name in ("subtract", "add", "concat")}


@dataclass
class SuiteConfig:
    """Desk-scale experiment: 20 identities over 300 frames, three seeds."""

    seeds: tuple = (0, 1, 2)
    synth: SynthSpec = field(default_factory=SynthSpec)
    model: ModelConfig = field(default_factory=lambda: ModelConfig(
        d=64, heads=4, layers=2, ffn_dim=128, appearance_dim=16, window_T=30))
    optimizer: OptimizerConfig = field(default_factory=lambda: OptimizerConfig(
        learning_rate=1e-2, epochs=10, samples_per_epoch=256, max_speed=0.03))
    tracker: TrackerConfig = field(default_factory=lambda: TrackerConfig(
        window_T=30, max_speed=0.03, max_candidates=48))
    train_seed: int = 0

    def __post_init__(self):
        if self.synth.appearance_dim != self.model.appearance_dim:
            raise ValueError("synthetic appearance_dim must equal the model's appearance_dim")
        if self.tracker.window_T != self.model.window_T:
            raise ValueError("tracker and model must share window_T")


def make_suite(cfg: SuiteConfig):
    """One synthetic sequence per seed."""
    return [synth_generate(replace(cfg.synth, seed=s)) for s in cfg.seeds]


def labeled(seq) -> LabeledSequence:
    records = replace_gt_with_detections(seq.gt, seq.detections)
    return LabeledSequence.build(records, seq.appearance, seq.meta.image_size)


def run_fold(train_seqs, test_seq, cfg: SuiteConfig, model_cfg=None, out_dir=None):
    """Train on ``train_seqs``, track ``test_seq``; returns (report, params, loss curve)."""
    model_cfg = model_cfg or cfg.model
    t0 = time.perf_counter()
    params, curve = train([labeled(s) for s in train_seqs], model_cfg, cfg.optimizer,
                          seed=cfg.train_seed, out_dir=out_dir)
    t1 = time.perf_counter()
    trajs = run_sequence(test_seq.detections, test_seq.appearance, params, model_cfg, cfg.tracker,
                         test_seq.meta.image_size)
    report = evaluate(test_seq.gt, trajs, name=test_seq.meta.name)
    log.info("%s: train %.1fs track %.1fs MOTA %.3f IDF1 %.3f", test_seq.meta.name, t1 - t0,
             time.perf_counter() - t1, report.MOTA, report.IDF1)
    return report, params, curve


def cross_validate(suite, cfg: SuiteConfig, model_cfg=None, folds=None) -> list[EvalReport]:
    """Hold out each sequence in turn (or only the indices in ``folds``)."""
    folds = range(len(suite)) if folds is None else folds
    reports = []
    for k in folds:
        rest = [s for i, s in enumerate(suite) if i != k]
        reports.append(run_fold(rest, suite[k], cfg, model_cfg)[0])
    return reports


def run_ablation(cfg: SuiteConfig, arms, suite=None, cache=None):
    """Cross-validated reports per arm; ``arms`` maps names to ModelConfig overrides.

    ``cache`` (a dict keyed by the arm's ModelConfig repr) lets arms shared by
    several ablations be trained once.
    """
    suite = suite if suite is not None else make_suite(cfg)
    cache = {} if cache is None else cache
    results = {}
    for name, overrides in arms.items():
        model_cfg = replace(cfg.model, **overrides)
        key = repr(model_cfg)
        if key not in cache:
            cache[key] = cross_validate(suite, cfg, model_cfg)
        results[name] = cache[key]
    return results


def median_idf1(reports):
    return statistics.median(r.IDF1 for r in reports)


def ablation_table(results):
    """Per-arm median IDF1 and MOTA across folds as aligned text."""
    rows = [(name, median_idf1(reps), statistics.median(r.MOTA for r in reps)) for name, reps in results.items()]
    width = max(4, *(len(r[0]) for r in rows))
    lines = [f"{'arm'.ljust(width)}  IDF1    MOTA"]
    lines += [f"{name.ljust(width)}  {100 * f:5.1f}  {100 * m:5.1f}" for name, f, m in rows]
    return "\n".join(lines)
