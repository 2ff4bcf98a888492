"""Command line: ``dvxfuse {train,ablate,eval,gradcheck,info}``.

Exit codes: 0 success, 1 failed check, 2 bad input (config, data, checkpoint),
3 training diverged.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path
from typing import Optional, Sequence

from .ablation import format_ablation, load_datasets, run_ablation
from .config import ConfigParseError, RunConfig, format_config, load_config
from .data import DatasetError, load_png_pair_dataset, write_split_manifest
from .metrics import per_class_ap
from .model import (ABLATION_ROWS, CheckpointError, ConfigError, build_model, count_params_flops,
                    flop_breakdown, load_checkpoint, load_into)
from .training import TrainingDivergence, evaluate_map, predict, train

EXIT_OK, EXIT_FAIL, EXIT_INPUT, EXIT_DIVERGED = 0, 1, 2, 3


def _err(msg: str) -> None:
    print(msg, file=sys.stderr)


def _prepare_out(cfg: RunConfig) -> Path:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "resolved.config").write_text(format_config(cfg))
    return out


def cmd_train(args) -> int:
    from .plotting import plot_history

    cfg = load_config(args.config)
    out = _prepare_out(cfg)
    tr, va, te = load_datasets(cfg)
    write_split_manifest({"train": tr, "val": va, "test": te}, out / "splits")
    model = build_model(cfg.model_config())
    res = train(model, tr, va, cfg.train_config(), history_path=out / "history.csv",
                checkpoint_path=out / "best.dvxf",
                log=lambda r: print(f"epoch {r.epoch:3d}  lr {r.lr:.2e}  loss {r.train_loss:.5f}  "
                                    f"val mAP raw {r.val_map_raw:.4f}  ema {r.val_map_ema:.4f}", flush=True))
    summary = {"best_epoch": res.best_epoch}
    for weights in ("raw", "ema"):
        load_into(model, res.best_arrays, use_ema=(weights == "ema"))
        for split, data in (("val", va), ("test", te)):
            summary[f"{split}_mAP_{weights}"] = evaluate_map(model, data, batch_size=cfg.eval_batch_size) \
                if data else float("nan")
    text = "".join(f"{k}={v:.6f}\n" if isinstance(v, float) else f"{k}={v}\n" for k, v in summary.items())
    (out / "metrics.txt").write_text(text)
    plot_history(res.history, out / "history.png")
    print(text, end="")
    return EXIT_OK


def cmd_ablate(args) -> int:
    from .plotting import plot_ablation

    cfg = load_config(args.config)
    out = _prepare_out(cfg)

    def log(name, seed, r):
        print(f"[{name} seed {seed}] epoch {r.epoch:3d}  loss {r.train_loss:.5f}  "
              f"val mAP ema {r.val_map_ema:.4f}", flush=True)

    rows = run_ablation(cfg, ABLATION_ROWS, out_dir=out, log=log)
    table = format_ablation(rows)
    (out / "ablation.txt").write_text(table)
    plot_ablation(rows, out / "ablation.png")
    print(table, end="")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = load_config(args.config)
    ckpt = Path(args.ckpt)
    if not ckpt.is_file():
        _err(f"checkpoint not found: {ckpt}")
        return EXIT_INPUT
    model = build_model(cfg.model_config())
    load_into(model, load_checkpoint(ckpt), use_ema=not args.raw)
    if args.data == "synthetic":
        tr, va, te = load_datasets(replace(cfg, data="synthetic"))
        samples = {"train": tr, "val": va, "test": te}[args.split]
    else:
        samples = load_png_pair_dataset(args.data, cfg.input_size)
    if not samples:
        _err("no samples to evaluate")
        return EXIT_INPUT
    from .data import stack

    ol, sd, y = stack(samples)
    scores = predict(model, ol, sd, batch_size=cfg.eval_batch_size)
    aps = per_class_ap(scores, y)
    defined = [a for a in aps if a is not None]
    print(f"mAP={sum(defined) / len(defined):.6f}  (n={len(samples)}, weights={'raw' if args.raw else 'ema'})")
    for c, a in enumerate(aps):
        print(f"AP[c{c}]=" + ("n/a" if a is None else f"{a:.6f}"))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradsuite import format_table, run_suite, uncovered_ops

    rows = run_suite(instances=args.instances, seed=args.seed, module_tol=args.tol)
    print(format_table(rows))
    missing = uncovered_ops()
    if missing:
        print(f"registered ops without a check: {', '.join(missing)}")
    failed = [r for r in rows if not r.passed]
    print(f"{len(rows) - len(failed)}/{len(rows)} checks passed")
    return EXIT_OK if not failed and not missing else EXIT_FAIL


def cmd_info(args) -> int:
    cfg = load_config(args.config)
    model = build_model(cfg.model_config())
    params, flops = count_params_flops(model)
    m = cfg.model_config()
    print(f"toggles: fdim={m.use_fdim} mscfe={m.use_mscfe} cafm={m.use_cafm}")
    print(f"input: {m.in_channels}x{m.input_size[0]}x{m.input_size[1]} per view, widths {list(m.widths)}")
    print(f"params={params}")
    print(f"flops={flops}")
    if args.breakdown:
        for op, n in sorted(flop_breakdown(model).items(), key=lambda kv: -kv[1]):
            print(f"  {op:<24}{n:>14}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dvxfuse", description="Dual-view fusion classifier toolkit")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train one configuration")
    t.add_argument("--config", required=True)
    t.set_defaults(func=cmd_train)

    a = sub.add_parser("ablate", help="train all eight module-toggle rows")
    a.add_argument("--config", required=True)
    a.set_defaults(func=cmd_ablate)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True, help="'synthetic' or a dataset directory")
    e.add_argument("--config", required=True)
    e.add_argument("--split", choices=("train", "val", "test"), default="test",
                   help="split of the synthetic stream (ignored for directories)")
    e.add_argument("--raw", action="store_true", help="use raw weights instead of the EMA shadow")
    e.set_defaults(func=cmd_eval)

    g = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    g.add_argument("--tol", type=float, default=1e-3, help="module tolerance (primitives use 1e-5)")
    g.add_argument("--instances", type=int, default=20)
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_gradcheck)

    i = sub.add_parser("info", help="parameter and FLOP count")
    i.add_argument("--config", required=True)
    i.add_argument("--breakdown", action="store_true", help="FLOPs per op")
    i.set_defaults(func=cmd_info)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigParseError, ConfigError) as exc:
        _err(f"config error:\n{exc}")
        return EXIT_INPUT
    except (DatasetError, CheckpointError) as exc:
        _err(f"input error: {exc}")
        return EXIT_INPUT
    except TrainingDivergence as exc:
        _err(f"training diverged: {exc}")
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
