"""Experiment runner CLI.

Subcommands: pretrain | train | eval | flops | drift | sweep. Every run
directory receives the exact resolved config snapshot, and all output files
are written atomically (temp file + rename). Exit codes: 0 success,
2 config error, 3 data error, 4 checkpoint error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys

import numpy as np

from . import autograd as ag
from .checkpoint import save_checkpoint
from .config import ExperimentConfig, desk_preset, load_config
from .costmodel import DESK, VITB16, MODES, CostConfig, pipeline_cost, sweep_rows
from .errors import CheckpointError, ConfigError, DataFormatError, PromptclError
from .harness import (RunResult, _predict_forward, build_datasets, drift_analysis,
                      load_run_snapshot, prepare_backbone, run_experiment, split_tasks)


def _atomic_write_text(path: str, text: str) -> None:
    tmp = path + ".tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write(text)
    os.replace(tmp, path)


def _ensure_out(args) -> str:
    out = args.out or "runs/latest"
    os.makedirs(out, exist_ok=True)
    return out


def _resolved_config(args) -> ExperimentConfig:
    if args.config:
        cfg = load_config(args.config)
    elif getattr(args, "preset", None) in (None, "desk"):
        cfg = desk_preset()
    else:
        raise ConfigError([f"preset {args.preset!r} is a cost-model preset; "
                           "experiment runs need --config or --preset desk"])
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    return cfg


def _accuracy_csv(rows: list[list[float]]) -> str:
    lines = ["task_after,task_eval,accuracy"]
    for t, row in enumerate(rows, start=1):
        for j, acc in enumerate(row, start=1):
            lines.append(f"{t},{j},{acc!r}")
    return "\n".join(lines) + "\n"


def _drift_csv(drift: list[dict]) -> str:
    lines = ["layer,task_pair,distance"]
    for d in drift:
        lines.append(f"{d['layer']},{d['task_pair']},{d['distance']!r}")
    return "\n".join(lines) + "\n"


def _write_run_outputs(out: str, cfg: ExperimentConfig, result: RunResult) -> None:
    _atomic_write_text(os.path.join(out, "config.json"), cfg.snapshot_json())
    _atomic_write_text(os.path.join(out, "result.json"), result.result_json())
    _atomic_write_text(os.path.join(out, "accuracy_matrix.csv"), _accuracy_csv(result.accuracy_rows))
    if result.drift:
        _atomic_write_text(os.path.join(out, "drift.csv"), _drift_csv(result.drift))
    _atomic_write_text(os.path.join(out, "timing.json"),
                       json.dumps({"wall_clock_s": result.wall_clock_s}, indent=2))


def cmd_pretrain(args) -> int:
    cfg = _resolved_config(args)
    out = _ensure_out(args)
    base_train, _, cont_train, _ = build_datasets(cfg)
    backbone = prepare_backbone(cfg, base_train, cont_train.class_ids)
    save_checkpoint(os.path.join(out, "backbone"), backbone.state_tensors(),
                    {"vit_config": backbone.config.to_dict(), "frozen": True})
    _atomic_write_text(os.path.join(out, "config.json"), cfg.snapshot_json())
    print(f"pretrained backbone written to {os.path.join(out, 'backbone')}")
    return 0


def cmd_train(args) -> int:
    cfg = _resolved_config(args)
    out = _ensure_out(args)
    result = run_experiment(cfg, out_dir=out)
    _write_run_outputs(out, cfg, result)
    f_n = "-" if result.f_n is None else f"{result.f_n:.4f}"
    print(f"method={result.method} seed={result.seed} A_N={result.a_n:.4f} F_N={f_n}")
    print(f"outputs in {out}")
    return 0


def cmd_eval(args) -> int:
    cfg = _resolved_config(args)
    out = _ensure_out(args)
    snap = load_run_snapshot(args.checkpoint)
    _, _, cont_train, cont_test = build_datasets(cfg)
    stream = split_tasks(cont_train, cont_test, cfg.tasks, cfg.seed)
    seen = snap.task_index * stream.classes_per_task
    if snap.task_index < 1:
        raise CheckpointError("checkpoint has no completed tasks to evaluate")
    row = []
    with ag.no_grad():
        for j in range(snap.task_index):
            test = stream.test_set(j)
            correct = 0
            for lo in range(0, len(test), cfg.optim.batch):
                rec = _predict_forward(snap.model, snap.pool, snap.query, snap.formation,
                                       snap.topk_n, snap.prompt_length,
                                       test.images[lo:lo + cfg.optim.batch])
                pred = rec.logits.data[:, :seen].argmax(axis=1)
                correct += int((pred == test.labels[lo:lo + cfg.optim.batch]).sum())
            row.append(correct / len(test))
    payload = {"after_task": snap.task_index, "per_task_accuracy": row,
               "mean_accuracy": sum(row) / len(row)}
    _atomic_write_text(os.path.join(out, "config.json"), cfg.snapshot_json())
    _atomic_write_text(os.path.join(out, "eval.json"), json.dumps(payload, indent=2, sort_keys=True))
    print(json.dumps(payload, sort_keys=True))
    return 0


def _cost_config(args) -> CostConfig:
    if args.preset == "vitb16":
        return VITB16
    if args.preset == "desk" or not args.config:
        return DESK
    cfg = load_config(args.config)
    return CostConfig(depth=cfg.vit.depth, dim=cfg.vit.dim, heads=cfg.vit.heads,
                      mlp_ratio=cfg.vit.mlp_ratio, image_size=cfg.vit.image_size,
                      patch_size=cfg.vit.patch_size, prompt_length=cfg.prompt.length,
                      prompted_layers=len(cfg.vit.prompted_layers),
                      num_classes=cfg.continual_classes)


def cmd_flops(args) -> int:
    cost_cfg = _cost_config(args)
    out = _ensure_out(args)
    reports = {f"{mode}/{phase}": pipeline_cost(cost_cfg, mode, phase).to_dict()
               for mode in MODES for phase in ("train", "infer")}
    payload = {"config": dataclasses.asdict(cost_cfg), "pipelines": reports}
    _atomic_write_text(os.path.join(out, "cost_report.json"),
                       json.dumps(payload, indent=2, sort_keys=True))
    print(f"{'pipeline':<22}{'GFLOPs':>10}{'% of two-stage':>18}")
    for name, rep in reports.items():
        print(f"{name:<22}{rep['gflops']:>10.1f}{rep['percent_of_two_stage']:>17.1f}%")
    if args.sweep_lp or args.sweep_layers:
        lps = [int(x) for x in args.sweep_lp.split(",")] if args.sweep_lp else (cost_cfg.prompt_length,)
        layers = [int(x) for x in args.sweep_layers.split(",")] if args.sweep_layers \
            else (cost_cfg.prompted_layers,)
        rows = sweep_rows(cost_cfg, prompt_lengths=lps, layer_counts=layers)
        lines = ["mode,phase,L_p,layers,gflops,percent_of_two_stage"]
        for r in rows:
            lines.append(f"{r['mode']},{r['phase']},{r['L_p']},{r['layers']},"
                         f"{r['gflops']!r},{r['percent_of_two_stage']!r}")
        _atomic_write_text(os.path.join(out, "cost_sweep.csv"), "\n".join(lines) + "\n")
    return 0


def cmd_drift(args) -> int:
    cfg = _resolved_config(args)
    out = _ensure_out(args)
    snap_a = load_run_snapshot(args.ckpt_a)
    snap_b = load_run_snapshot(args.ckpt_b)
    _, _, cont_train, cont_test = build_datasets(cfg)
    stream = split_tasks(cont_train, cont_test, cfg.tasks, cfg.seed)
    table = drift_analysis(snap_a, snap_b, stream.analysis_train_images(0), cfg.optim.batch)
    _atomic_write_text(os.path.join(out, "config.json"), cfg.snapshot_json())
    _atomic_write_text(os.path.join(out, "drift.csv"), _drift_csv(table))
    for row in table:
        print(f"layer {row['layer']:>2}  distance {row['distance']:.6f}")
    return 0


def _sweep_cells(cfg: ExperimentConfig, grid: str) -> list[tuple[str, ExperimentConfig]]:
    def with_qr(base: ExperimentConfig, **kw) -> ExperimentConfig:
        return dataclasses.replace(base, qr=dataclasses.replace(base.qr, enabled=True, **kw))

    if grid == "qr_toggles":
        cells = []
        for cos in (False, True):
            for soft in (False, True):
                cells.append((f"cosine={cos},softmax={soft}",
                              with_qr(cfg, use_cosine=cos, use_softmax=soft)))
        return cells
    key, _, raw = grid.partition("=")
    values = [v.strip() for v in raw.split(",") if v.strip()]
    if key == "lambda" and values:
        return [(v, with_qr(cfg, lam=float(v))) for v in values]
    if key == "ref_layer" and values:
        return [(v, with_qr(cfg, ref_layer=v if v == "last" else int(v))) for v in values]
    raise ConfigError([f"unknown sweep grid {grid!r}; expected lambda=..., ref_layer=..., or qr_toggles"])


def cmd_sweep(args) -> int:
    cfg = _resolved_config(args)
    out = _ensure_out(args)
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else [cfg.seed]
    lines = ["grid,cell,seeds,a_n_mean,a_n_std,f_n_mean,f_n_std"]
    for cell_name, cell_cfg in _sweep_cells(cfg, args.grid):
        a_vals, f_vals = [], []
        for seed in seeds:
            result = run_experiment(cell_cfg.with_seed(seed))
            a_vals.append(result.a_n)
            f_vals.append(result.f_n if result.f_n is not None else 0.0)
        lines.append(",".join([
            args.grid.partition("=")[0], cell_name.replace(",", ";"), str(len(seeds)),
            repr(float(np.mean(a_vals))), repr(float(np.std(a_vals))),
            repr(float(np.mean(f_vals))), repr(float(np.std(f_vals))),
        ]))
        print(lines[-1])
    _atomic_write_text(os.path.join(out, "config.json"), cfg.snapshot_json())
    _atomic_write_text(os.path.join(out, "sweep.csv"), "\n".join(lines) + "\n")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="promptcl",
                                     description="prompt-based continual learning experiments")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="experiment config JSON")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--out", help="output directory")
        p.add_argument("--preset", choices=("vitb16", "desk"), default=None,
                       help="built-in config: desk defaults, or the reference "
                            "architecture for cost reports")

    p = sub.add_parser("pretrain", help="pretrain and freeze a backbone")
    common(p)
    p.set_defaults(fn=cmd_pretrain)

    p = sub.add_parser("train", help="run a continual experiment")
    common(p)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a saved checkpoint")
    common(p)
    p.add_argument("--checkpoint", required=True, help="task checkpoint directory")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("flops", help="analytical cost report")
    common(p)
    p.add_argument("--sweep-lp", help="comma-separated prompt lengths to sweep")
    p.add_argument("--sweep-layers", help="comma-separated prompted-layer counts to sweep")
    p.set_defaults(fn=cmd_flops)

    p = sub.add_parser("drift", help="layer drift between two checkpoints")
    common(p)
    p.add_argument("--ckpt-a", required=True)
    p.add_argument("--ckpt-b", required=True)
    p.set_defaults(fn=cmd_drift)

    p = sub.add_parser("sweep", help="grid sweep over QR settings")
    common(p)
    p.add_argument("--grid", required=True,
                   help="lambda=v1,v2,... | ref_layer=v1,v2,... | qr_toggles")
    p.add_argument("--seeds", help="comma-separated seeds (default: config seed)")
    p.set_defaults(fn=cmd_sweep)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error:\n  " + "\n  ".join(exc.problems), file=sys.stderr)
        return 2
    except DataFormatError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except CheckpointError as exc:
        print(f"checkpoint error: {exc}", file=sys.stderr)
        return 4
    except PromptclError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
