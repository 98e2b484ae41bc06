"""Command line entry point: ``dadapt {generate,run,eval,report}``.

Exit codes: 0 success, 2 bad configuration, 3 training divergence, 4 I/O or
artifact error, 1 anything else.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import io
import json
import logging
import math
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from . import detector as det
from . import synthworld as sw
from .errors import CheckpointError, ConfigError, DivergenceError, NonFiniteGradientError, StageError
from .evaluation import IoUHistogram
from .pipeline import ABLATIONS, PipelineConfig, TargetEvaluator, completed_rounds, round_dir, run_dadapt

log = logging.getLogger("dadapt")

EXIT_OK, EXIT_OTHER, EXIT_CONFIG, EXIT_DIVERGED, EXIT_IO = 0, 1, 2, 3, 4

SOURCE_FILE, TARGET_FILE, TARGET_GT_FILE, WORLD_FILE = "source.jsonl", "target.jsonl", "target_gt.jsonl", "world.json"
MANIFEST_FILE = "manifest.json"


def config_hash(text: str) -> str:
    return hashlib.sha256(text.encode()).hexdigest()


@dataclass
class RunManifest:
    command: str
    config_hash: str
    seed: int
    tool_version: str = __version__
    wall_time: dict = field(default_factory=dict)
    artifacts: list[str] = field(default_factory=list)

    def write(self, path: Path) -> None:
        path.write_text(json.dumps(dataclasses.asdict(self), indent=2) + "\n")

    @classmethod
    def read(cls, path: Path) -> "RunManifest":
        return cls(**json.loads(Path(path).read_text()))


def _read_json(path: Path) -> dict:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected a JSON object")
    return data


def _world_config(path: str | None, seed: int | None) -> sw.WorldConfig:
    data = _read_json(Path(path)) if path else {}
    if seed is not None:
        data["seed"] = seed
    try:
        return sw.WorldConfig.from_dict(data)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def _pipeline_config(args) -> PipelineConfig:
    cfg = PipelineConfig.load(args.config) if args.config else PipelineConfig()
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.rounds is not None:
        changes["rounds"] = args.rounds
    if changes:
        cfg = PipelineConfig.from_dict(cfg.to_dict() | changes)
    if args.ablation:
        cfg = cfg.with_ablations([a.strip() for a in args.ablation.split(",") if a.strip()])
    return cfg


def _load_data(data_dir: Path, need_target_gt: bool):
    data_dir = Path(data_dir)
    world_cfg = sw.WorldConfig.from_dict(_read_json(data_dir / WORLD_FILE))
    world = sw.build_world(world_cfg)
    source = sw.read_scenes(data_dir / SOURCE_FILE)
    target = sw.read_scenes(data_dir / TARGET_FILE)
    target_gt = None
    gt_path = data_dir / TARGET_GT_FILE
    if need_target_gt or gt_path.exists():
        target_gt = sw.read_ground_truth(gt_path)
    return world_cfg, world, source, target, target_gt


# ----------------------------------------------------------------------------
# commands

def cmd_generate(args) -> int:
    cfg = _world_config(args.config, args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    bench = sw.Benchmark.build(cfg)
    world_text = json.dumps(cfg.to_dict(), indent=2) + "\n"
    (out / WORLD_FILE).write_text(world_text)
    sw.write_scenes(out / SOURCE_FILE, bench.source)
    # the scene files carry the layout the feature oracle renders; class
    # labels for evaluation live in their own file
    sw.write_scenes(out / TARGET_FILE, bench.target)
    sw.write_ground_truth(out / TARGET_GT_FILE, bench.target)
    manifest = RunManifest("generate", config_hash(world_text), cfg.seed,
                           wall_time={"generate": time.perf_counter() - t0},
                           artifacts=[WORLD_FILE, SOURCE_FILE, TARGET_FILE, TARGET_GT_FILE])
    manifest.write(out / MANIFEST_FILE)
    print(f"wrote {len(bench.source)} source and {len(bench.target)} target scenes to {out}")
    return EXIT_OK


def cmd_run(args) -> int:
    cfg = _pipeline_config(args)
    world_cfg, world, source, target, target_gt = _load_data(Path(args.data), need_target_gt=False)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg_text = cfg.to_json()
    cfg_path = out / "config.json"
    if args.resume and cfg_path.exists() and cfg_path.read_text() != cfg_text:
        raise ConfigError(f"{cfg_path} differs from the requested config; refusing to resume")
    cfg_path.write_text(cfg_text)
    src_images = sw.images(source, world.oracle)
    tgt_images = sw.images(target, world.oracle)
    evaluator = TargetEvaluator(tgt_images, target_gt, world_cfg.n_classes) if target_gt is not None else None
    t0 = time.perf_counter()
    _, arts = run_dadapt(cfg, src_images, sw.ground_truth(source), tgt_images, world_cfg.n_classes,
                         evaluator=evaluator, run_dir=out, resume=args.resume)
    wall = {f"round_{a.index}": a.timings for a in arts}
    wall["total"] = time.perf_counter() - t0
    files = sorted(str(p.relative_to(out)) for p in out.rglob("*") if p.is_file())
    RunManifest("run", config_hash(cfg_text), cfg.seed, wall_time=wall,
                artifacts=[f for f in files if f != MANIFEST_FILE]).write(out / MANIFEST_FILE)
    if evaluator is not None:
        write_report(out)
        last = arts[-1].metrics
        print(f"round {arts[-1].index}: target mAP {last['map']:.4f} (source-only {arts[0].metrics['map']:.4f})")
    else:
        print(f"finished {cfg.rounds} rounds in {out} (no target labels, metrics skipped)")
    return EXIT_OK


def evaluate_checkpoint(checkpoint: Path, data_dir: Path) -> dict:
    if not Path(checkpoint).exists():
        raise CheckpointError(f"{checkpoint}: no such checkpoint")
    model = det.DetectorModel.load(checkpoint)
    world_cfg, world, _, target, target_gt = _load_data(data_dir, need_target_gt=True)
    evaluator = TargetEvaluator(sw.images(target, world.oracle), target_gt, world_cfg.n_classes)
    return evaluator.detection(model)


def cmd_eval(args) -> int:
    metrics = evaluate_checkpoint(Path(args.checkpoint), Path(args.data))
    nan_free = lambda v: None if isinstance(v, float) and math.isnan(v) else v  # noqa: E731
    doc = {"per_class_ap": [nan_free(x) for x in metrics["per_class_ap"]], "map": nan_free(metrics["map"]),
           "error_breakdown": metrics["error_breakdown"]}
    text = json.dumps(doc, indent=2) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


# ----------------------------------------------------------------------------
# report

REPORT_COLUMNS = ("round", "map", "delta_map", "miou_cls", "miou_reg", "miss", "cls", "loc", "correct")


def _round_metrics(run: Path) -> list[dict]:
    rounds = completed_rounds(run)
    if not rounds:
        raise CheckpointError(f"{run}: no completed rounds")
    return [json.loads((round_dir(run, i) / "metrics.json").read_text()) for i in rounds]


def _fmt(x) -> str:
    return "" if x is None else f"{x:.4f}" if isinstance(x, float) else str(x)


def summary_rows(run: Path) -> list[dict]:
    """One row per adaptation round (round 0, the source-only model, is the baseline)."""
    metrics = _round_metrics(run)
    base = metrics[0].get("map")
    rows = []
    for m in metrics[1:]:
        eb = m.get("error_breakdown") or {}
        mp = m.get("map")
        rows.append({
            "round": m.get("extra", {}).get("round"),
            "map": mp,
            "delta_map": None if mp is None or base is None else mp - base,
            "miou_cls": m.get("miou_cls"),
            "miou_reg": m.get("miou_reg"),
            **{k: eb.get(k) for k in ("miss", "cls", "loc", "correct")},
        })
    return rows


def _bar_svg(title: str, labels: Sequence[str], series: dict[str, list[float]], colors: Sequence[str],
             width: int = 420, height: int = 240) -> str:
    """Stacked bars, one per label; values are fractions or scores in [0, 1]."""
    pad = 30
    n = max(len(labels), 1)
    bw = (width - 2 * pad) / n
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
             f'<text x="{pad}" y="18" font-size="12">{title}</text>',
             f'<line x1="{pad}" y1="{height - pad}" x2="{width - pad}" y2="{height - pad}" stroke="black"/>']
    for i, lab in enumerate(labels):
        y = height - pad
        for (name, values), color in zip(series.items(), colors):
            v = values[i] or 0.0
            h = (height - 2 * pad) * v
            y -= h
            parts.append(f'<rect x="{pad + i * bw + 2:.2f}" y="{y:.2f}" width="{bw - 4:.2f}" height="{h:.2f}" '
                         f'fill="{color}"><title>{name} {v:.3f}</title></rect>')
        parts.append(f'<text x="{pad + (i + 0.4) * bw:.2f}" y="{height - pad + 14}" font-size="10">{lab}</text>')
    for j, ((name, _), color) in enumerate(zip(series.items(), colors)):
        parts.append(f'<text x="{width - pad - 60}" y="{34 + 12 * j}" font-size="10" fill="{color}">{name}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def write_report(run: Path) -> list[Path]:
    run = Path(run)
    rows = summary_rows(run)
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=REPORT_COLUMNS, lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: _fmt(row[k]) for k in REPORT_COLUMNS})
    written = [run / "summary.csv", run / "map.svg", run / "errors.svg"]
    written[0].write_text(buf.getvalue())
    labels = [f"r{row['round']}" for row in rows]
    written[1].write_text(_bar_svg("target mAP per round", labels, {"mAP": [row["map"] for row in rows]},
                                   ["steelblue"]))
    written[2].write_text(_bar_svg("target error breakdown", labels,
                                   {k: [row[k] for row in rows] for k in ("correct", "loc", "cls", "miss")},
                                   ["seagreen", "goldenrod", "indianred", "gray"]))
    hist_csv = round_dir(run, 0) / "iou_hist.csv"
    if hist_csv.exists():
        hist = read_histogram_csv(hist_csv)
        path = run / "iou_hist.svg"
        path.write_text(hist.to_svg("round 0 source proposals"))
        written.append(path)
    return written


def read_histogram_csv(path: Path, threshold: float = 0.0) -> IoUHistogram:
    with open(path) as fh:
        rows = list(csv.DictReader(fh))
    edges = [float(r["bin_lo"]) for r in rows] + [float(rows[-1]["bin_hi"])] if rows else [0.0]
    return IoUHistogram(np.array(edges), np.array([int(r["count"]) for r in rows], dtype=np.int64), threshold)


def cmd_report(args) -> int:
    for path in write_report(Path(args.run)):
        print(path)
    return EXIT_OK


# ----------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dadapt", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"dadapt {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="build a two-domain benchmark")
    g.add_argument("--config", help="world config JSON (defaults if omitted)")
    g.add_argument("--seed", type=int)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_generate)

    r = sub.add_parser("run", help="pretrain and adapt")
    r.add_argument("--config", help="pipeline config JSON (defaults if omitted)")
    r.add_argument("--data", required=True, help="directory written by `generate`")
    r.add_argument("--out", required=True)
    r.add_argument("--seed", type=int)
    r.add_argument("--rounds", type=int)
    r.add_argument("--ablation", help=f"comma separated: {', '.join(ABLATIONS)}")
    r.add_argument("--resume", action="store_true")
    r.set_defaults(func=cmd_run)

    e = sub.add_parser("eval", help="target-domain metrics of a detector checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("report", help="summary table and plots of a run directory")
    s.add_argument("run")
    s.set_defaults(func=cmd_report)
    return p


def _is_divergence(exc: BaseException) -> bool:
    cause = exc.cause if isinstance(exc, StageError) else exc
    return isinstance(cause, (DivergenceError, NonFiniteGradientError, FloatingPointError))


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (StageError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED if _is_divergence(exc) else EXIT_OTHER
    except (OSError, CheckpointError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
