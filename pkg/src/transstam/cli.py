"""Command-line entry point: ``transstam {synth,train,track,eval,ablate}``.

Every command accepts ``--config`` (JSON run config), ``--seed``,
``--threads`` (BLAS thread cap), ``--out`` (run directory) and repeated
``--set section.key=value`` overrides. A run directory receives the
effective config, a log file and a machine-readable ``summary.json``.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .data import SynthSpec, load_sidecar, parse_mot_csv, read_sequence, synth_generate, write_results, write_sequence
from .metrics import aggregate, evaluate, format_table, to_csv
from .model import ModelConfig, load_checkpoint
from .suite import FUSION_ARMS, PE_ARMS, SuiteConfig, ablation_table, labeled, median_idf1, run_ablation
from .tracker import TrackerConfig, run_sequence
from .training import OptimizerConfig, train

DATA_ENV = "TRANSSTAM_DATA"
log = logging.getLogger("transstam")


class ConfigError(ValueError):
    pass


def _suite_defaults():
    return SuiteConfig()


@dataclass
class RunConfig:
    """Effective configuration of one command; defaults are the desk-scale suite."""

    seed: int = 0
    seeds: tuple = (0, 1, 2)
    synth: SynthSpec = field(default_factory=lambda: _suite_defaults().synth)
    model: ModelConfig = field(default_factory=lambda: _suite_defaults().model)
    optimizer: OptimizerConfig = field(default_factory=lambda: _suite_defaults().optimizer)
    tracker: TrackerConfig = field(default_factory=lambda: _suite_defaults().tracker)
    data_root: str | None = None

    def to_dict(self):
        return asdict(self)

    def suite(self) -> SuiteConfig:
        return SuiteConfig(tuple(self.seeds), self.synth, self.model, self.optimizer, self.tracker, self.seed)


_SECTIONS = {"synth": SynthSpec, "model": ModelConfig, "optimizer": OptimizerConfig, "tracker": TrackerConfig}


def _build_section(cls, current, values, where):
    if not isinstance(values, dict):
        raise ConfigError(f"{where} must be a mapping")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {', '.join(unknown)}")
    merged = asdict(current)
    merged.update({k: tuple(v) if isinstance(v, list) else v for k, v in values.items()})
    try:
        return cls(**merged)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {where}: {exc}") from None


def merge_config(cfg: RunConfig, raw: dict) -> RunConfig:
    """Apply a (possibly partial) nested mapping; unknown keys are rejected."""
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    unknown = sorted(set(raw) - {f.name for f in fields(RunConfig)})
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
    updates = {}
    for key, value in raw.items():
        if key in _SECTIONS:
            updates[key] = _build_section(_SECTIONS[key], getattr(cfg, key), value, key)
        elif key == "seeds":
            updates[key] = tuple(int(s) for s in value)
        else:
            updates[key] = value
    return replace(cfg, **updates)


def _parse_override(text):
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not key=value")
    key, value = text.split("=", 1)
    try:
        value = json.loads(value)
    except json.JSONDecodeError:
        pass  # bare strings are allowed
    node = out = {}
    parts = key.split(".")
    for part in parts[:-1]:
        node = node.setdefault(part, {})
    node[parts[-1]] = value
    return out


def load_config(path=None, overrides=(), seed=None) -> RunConfig:
    cfg = RunConfig()
    if path is not None:
        try:
            raw = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from None
        cfg = merge_config(cfg, raw)
    for text in overrides:
        cfg = merge_config(cfg, _parse_override(text))
    if seed is not None:
        cfg = replace(cfg, seed=seed)
    if cfg.data_root is None and os.environ.get(DATA_ENV):
        cfg = replace(cfg, data_root=os.environ[DATA_ENV])
    return cfg


# ------------------------------------------------------------------ run directory


class Run:
    """Run directory holding the config echo, log file and summary."""

    def __init__(self, out, cfg: RunConfig, command):
        self.dir = Path(out) if out else None
        self.command = command
        self._handler = None
        if self.dir:
            self.dir.mkdir(parents=True, exist_ok=True)
            (self.dir / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2))
            self._handler = logging.FileHandler(self.dir / "run.log", mode="w")
            self._handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
            logging.getLogger().addHandler(self._handler)

    def summary(self, data):
        data = {"command": self.command, "status": "ok", **data}
        if self.dir:
            (self.dir / "summary.json").write_text(json.dumps(data, indent=2, default=float))
        return data

    def close(self):
        if self._handler:
            logging.getLogger().removeHandler(self._handler)
            self._handler.close()


def _sequence_dirs(root):
    """A sequence directory, or every sequence directory directly under ``root``."""
    root = Path(root)
    if (root / "meta.json").exists():
        return [root]
    dirs = sorted(p for p in root.iterdir() if (p / "meta.json").exists()) if root.is_dir() else []
    if not dirs:
        raise FileNotFoundError(f"no sequence directories (with meta.json) under {root}")
    return dirs


def _data_root(args, cfg):
    root = getattr(args, "data", None) or cfg.data_root
    if root is None:
        raise ConfigError(f"no data directory: pass --data or set {DATA_ENV}")
    return root


def _require(path, what):
    if not Path(path).exists():
        raise FileNotFoundError(f"{what} not found: {path}")
    return Path(path)


# ------------------------------------------------------------------ commands


def cmd_synth(args, cfg: RunConfig, run: Run):
    if run.dir is None:
        raise ConfigError("synth needs --out")
    seeds = [args.seed] if args.seed is not None else list(cfg.seeds)
    written = []
    for s in seeds:
        spec = replace(cfg.synth, seed=s)
        seq = synth_generate(spec)
        out = run.dir / seq.meta.name
        write_sequence(seq, out, spec)
        written.append({"name": seq.meta.name, "dir": str(out), "detections": len(seq.detections), "gt": len(seq.gt)})
        print(f"{seq.meta.name}: {len(seq.gt)} gt boxes, {len(seq.detections)} detections -> {out}")
    return {"sequences": written}


def cmd_train(args, cfg: RunConfig, run: Run):
    if run.dir is None:
        raise ConfigError("train needs --out")
    seqs = [read_sequence(d) for d in _sequence_dirs(_data_root(args, cfg))]
    for s in seqs:
        if not s.gt:
            raise FileNotFoundError(f"{s.meta.name} has no gt.txt to train from")
    ckpt_dir = run.dir / "checkpoints"

    def progress(epoch, curve):
        losses = [row[2] for row in curve if row[0] == epoch]
        if losses:
            print(f"epoch {epoch + 1}: mean loss {sum(losses) / len(losses):.4f}", flush=True)

    params, curve = train([labeled(s) for s in seqs], cfg.model, cfg.optimizer, seed=cfg.seed,
                          out_dir=ckpt_dir, progress=progress)
    final = ckpt_dir / f"epoch{cfg.optimizer.epochs:03d}.ckpt"
    return {"sequences": [s.meta.name for s in seqs], "steps": len(curve),
            "final_loss": curve[-1][2] if curve else None, "checkpoint": str(final),
            "loss_csv": str(ckpt_dir / "loss.csv")}


def _image_size(args, det_path):
    if args.image_size:
        return tuple(args.image_size)
    meta = Path(args.meta) if args.meta else det_path.parent / "meta.json"
    if not meta.exists():
        raise FileNotFoundError(f"image size unknown: pass --image-size or provide {meta}")
    raw = json.loads(meta.read_text())
    return (raw["width"], raw["height"])


def cmd_track(args, cfg: RunConfig, run: Run):
    ckpt = _require(args.checkpoint, "checkpoint")
    det_path = _require(args.det, "detection file")
    app_path = _require(args.appearance or det_path.parent / "appearance.bin", "appearance sidecar")
    params, model_cfg = load_checkpoint(ckpt)
    tracker_cfg = replace(cfg.tracker, window_T=model_cfg.window_T)
    detections = parse_mot_csv(det_path, "det")
    trajs = run_sequence(detections, load_sidecar(app_path), params, model_cfg, tracker_cfg,
                         _image_size(args, det_path))
    results = Path(args.results) if args.results else (run.dir / "results.txt" if run.dir else None)
    if results is None:
        raise ConfigError("track needs --results or --out")
    results.parent.mkdir(parents=True, exist_ok=True)
    write_results(trajs, results)
    boxes = sum(len(t.boxes) for t in trajs)
    print(f"{len(trajs)} trajectories, {boxes} boxes -> {results}")
    return {"trajectories": len(trajs), "boxes": boxes, "results": str(results)}


def cmd_eval(args, cfg: RunConfig, run: Run):
    if len(args.gt) != len(args.results):
        raise ConfigError("pass one --results file per --gt file")
    reports = []
    for gt_path, res_path in zip(args.gt, args.results):
        gt = parse_mot_csv(_require(gt_path, "gt file"), "gt")
        res = parse_mot_csv(_require(res_path, "results file"), "gt")
        reports.append(evaluate(gt, res, name=Path(gt_path).parent.name or Path(gt_path).stem,
                                iou_min=args.iou))
    if len(reports) > 1:
        reports.append(aggregate(reports))
    print(format_table(reports))
    if run.dir:
        (run.dir / "metrics.csv").write_text(to_csv(reports))
    return {"reports": [r.row() for r in reports]}


def cmd_ablate(args, cfg: RunConfig, run: Run):
    root = getattr(args, "data", None) or cfg.data_root
    suite_cfg = cfg.suite()
    if root:
        suite = [read_sequence(d) for d in _sequence_dirs(root)]
    else:
        suite = [synth_generate(replace(cfg.synth, seed=s)) for s in cfg.seeds]
    if len(suite) < 2:
        raise ConfigError("the ablation needs at least two sequences")
    cache = {}
    out = {}
    for title, arms in (("positional encoding", PE_ARMS), ("fusion", FUSION_ARMS)):
        results = run_ablation(suite_cfg, arms, suite, cache)
        print(f"{title} ablation (median over {len(suite)} held-out sequences)")
        print(ablation_table(results))
        out[title.replace(" ", "_")] = {
            arm: {"median_IDF1": median_idf1(reps), "folds": [r.row() for r in reps]} for arm, reps in results.items()
        }
    return out


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "track": cmd_track, "eval": cmd_eval, "ablate": cmd_ablate}


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run config (sections: synth, model, optimizer, tracker)")
    common.add_argument("--seed", type=int, help="master seed (synth: sequence seed)")
    common.add_argument("--threads", type=int, help="cap on BLAS worker threads")
    common.add_argument("--out", help="run directory for config echo, log, outputs and summary.json")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="config override such as optimizer.epochs=3 (repeatable)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="transstam", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("synth", parents=[common], help="generate synthetic sequences")
    p = sub.add_parser("train", parents=[common], help="train the association model")
    p.add_argument("--data", help=f"sequence directory or parent of several (default ${DATA_ENV})")
    p = sub.add_parser("track", parents=[common], help="track a detection file")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--det", required=True, help="MOTChallenge detection file")
    p.add_argument("--appearance", help="appearance sidecar (default: appearance.bin beside --det)")
    p.add_argument("--meta", help="meta.json with width/height (default: beside --det)")
    p.add_argument("--image-size", type=int, nargs=2, metavar=("W", "H"))
    p.add_argument("--results", help="output results file (default: <out>/results.txt)")
    p = sub.add_parser("eval", parents=[common], help="score results against ground truth")
    p.add_argument("--gt", required=True, action="append")
    p.add_argument("--results", required=True, action="append")
    p.add_argument("--iou", type=float, default=0.5)
    p = sub.add_parser("ablate", parents=[common], help="positional-encoding and fusion ablations")
    p.add_argument("--data", help=f"suite directory (default ${DATA_ENV}; generated when unset)")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    run = None
    try:
        cfg = load_config(args.config, args.set, args.seed)
        run = Run(args.out, cfg, args.command)
        if args.threads is not None:
            if args.threads < 1:
                raise ConfigError("--threads must be >= 1")
            from threadpoolctl import threadpool_limits

            with threadpool_limits(limits=args.threads):
                result = COMMANDS[args.command](args, cfg, run)
        else:
            result = COMMANDS[args.command](args, cfg, run)
        run.summary(result)
        return 0
    except (ConfigError, FileNotFoundError, ValueError, KeyError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"error: {msg}", file=sys.stderr)
        if run and run.dir:
            (run.dir / "summary.json").write_text(json.dumps({"command": args.command, "status": "error",
                                                              "error": str(msg)}, indent=2))
        return 2
    finally:
        if run:
            run.close()


if __name__ == "__main__":
    sys.exit(main())
