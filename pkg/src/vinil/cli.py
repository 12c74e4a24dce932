"""Command line entry point: ``vinil gen-data | train | eval | cross-eval | report``.

Every config key is also a flag in dotted form (``--hyper.base_lr 0.01``).
Flags override values read from ``--config`` unless ``--force-config`` is given.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from .checkpoint import load_checkpoint, restore_model
from .config import _NESTED, ExperimentConfig
from .datagen import PRESETS, dataset_digest, write_folder_dataset
from .evaluation import embed_gallery, relative_drop, session_eval
from .reports import format_table, write_metrics
from .runner import build_stream, load_dataset, run_experiment

log = logging.getLogger("vinil")


def _parse_bool(text: str) -> bool:
    low = text.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


def _int_tuple(text: str) -> tuple[int, ...]:
    return tuple(int(p) for p in text.split(",") if p.strip())


def _optional_str(text: str) -> str | None:
    return None if text.lower() in ("", "none", "null") else text


def _flag_type(name: str, default):
    if name in ("input_shape", "hidden"):
        return _int_tuple
    if name == "cross_dataset":
        return _optional_str
    if isinstance(default, bool):
        return _parse_bool
    if isinstance(default, (int, float, str)):
        return type(default)
    raise TypeError(f"no flag parser for config key {name!r}")


def config_flags() -> list[tuple[str, callable]]:
    """(dotted key, parser) for every leaf of ExperimentConfig."""
    base = ExperimentConfig()
    out = []
    for f in dataclasses.fields(ExperimentConfig):
        value = getattr(base, f.name)
        if f.name in _NESTED:
            for sub in dataclasses.fields(_NESTED[f.name]):
                out.append((f"{f.name}.{sub.name}", _flag_type(sub.name, getattr(value, sub.name))))
        else:
            out.append((f.name, _flag_type(f.name, value)))
    return out


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--force-config", action="store_true",
                   help="values from --config win over conflicting flags")
    p.add_argument("--full-scale", action="store_true",
                   help="start from 200 epochs, batch 256, k=100")
    g = p.add_argument_group("config keys")
    for key, parser in config_flags():
        g.add_argument(f"--{key}", dest=f"cfg:{key}", type=parser, default=argparse.SUPPRESS,
                       metavar=key.split(".")[-1].upper())


def _set_dotted(d: dict, key: str, value) -> None:
    *path, leaf = key.split(".")
    for part in path:
        d = d.setdefault(part, {})
    d[leaf] = list(value) if isinstance(value, tuple) else value


def _get_dotted(d: dict, key: str):
    for part in key.split("."):
        if not isinstance(d, dict) or part not in d:
            raise KeyError(key)
        d = d[part]
    return d


def resolve_config(args: argparse.Namespace) -> ExperimentConfig:
    """Merge defaults, the optional config file and dotted flags."""
    base = (ExperimentConfig.full_scale() if args.full_scale else ExperimentConfig()).to_dict()
    from_file = {}
    if args.config:
        with open(args.config) as f:
            from_file = json.load(f)
        ExperimentConfig.from_dict(from_file)  # reject unknown keys early
    for key, _ in config_flags():
        try:
            _set_dotted(base, key, _get_dotted(from_file, key))
        except KeyError:
            pass
    for dest, value in vars(args).items():
        if not dest.startswith("cfg:"):
            continue
        key = dest[4:]
        if args.force_config:
            try:
                _get_dotted(from_file, key)
                log.warning("--%s ignored: --force-config keeps the config file value", key)
                continue
            except KeyError:
                pass
        _set_dotted(base, key, value)
    return ExperimentConfig.from_dict(base)


def cmd_gen_data(args) -> int:
    cfg = resolve_config(args)
    if cfg.dataset not in PRESETS:
        raise ValueError(f"gen-data needs a synthetic preset {sorted(PRESETS)}, got {cfg.dataset!r}")
    d = cfg.data
    samples = load_dataset(cfg.dataset, cfg)
    root = write_folder_dataset(samples, args.out)
    print(f"wrote {len(samples)} images ({d.n_categories} categories x {d.instances_per_category} "
          f"instances x {d.views_per_instance} views) to {root}")
    print(f"digest {dataset_digest(samples)}")
    return 0


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    record = run_experiment(cfg)
    print(f"{cfg.tag} seed {cfg.seed}: Acc {100 * record.metrics['Acc']:.3f}  "
          f"For {100 * record.metrics['For']:.3f}  -> {cfg.output_dir}")
    return 0


def _load_run(run_dir, checkpoint=None):
    run_dir = Path(run_dir)
    cfg = ExperimentConfig.from_json_file(run_dir / "config.json")
    if checkpoint is None:
        ckpts = sorted((run_dir / "checkpoints").glob("session_*.ckpt"))
        if not ckpts:
            raise FileNotFoundError(f"no checkpoints under {run_dir / 'checkpoints'}")
        checkpoint = ckpts[-1]
    model = restore_model(cfg.encoder, load_checkpoint(checkpoint))
    return cfg, model, Path(checkpoint)


def cmd_eval(args) -> int:
    cfg, model, ckpt = _load_run(args.run, args.checkpoint)
    k = args.k if args.k is not None else cfg.protocol.k_nn
    stream = build_stream(cfg)
    col = session_eval(embed_gallery(model, stream.gallery, stream.gallery_task_ids), len(stream), k)
    print(f"{ckpt}: k={k} overall {100 * col.overall:.3f}")
    for t, acc in enumerate(col.per_task):
        print(f"  task {t}: {100 * acc:.3f}")
    return 0


def cmd_cross_eval(args) -> int:
    cfg, model, ckpt = _load_run(args.run, args.checkpoint)
    k = args.k if args.k is not None else cfg.protocol.k_nn
    stream = build_stream(cfg)
    same = session_eval(embed_gallery(model, stream.gallery, stream.gallery_task_ids), 1, k).overall
    foreign = [s for s in load_dataset(args.dataset, cfg) if s.split == "gallery"]
    if not foreign:
        raise ValueError(f"dataset {args.dataset!r} has no gallery samples")
    cross = session_eval(embed_gallery(model, foreign), 1, k).overall
    print(f"{ckpt}: same {100 * same:.3f}  cross ({args.dataset}) {100 * cross:.3f}  "
          f"drop {relative_drop(same, cross):.2f}%")
    return 0


def cmd_report(args) -> int:
    incremental, cross_rows = [], []
    for run in args.runs:
        path = Path(run) / "metrics.json"
        if not path.exists():
            raise FileNotFoundError(f"{path} not found; run `vinil train` first")
        m = json.loads(path.read_text())
        incremental += m["incremental"]
        cross_rows += m.get("cross_dataset", [])
    text = format_table(incremental, cross_rows)
    print(text, end="")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        write_metrics(out / "metrics.json", incremental, cross_rows,
                      {"runs": [str(r) for r in args.runs]})
        (out / "table.txt").write_text(text)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vinil", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-session progress")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="render a synthetic preset to a PPM folder")
    _add_config_flags(p)
    p.add_argument("--out", required=True, help="destination folder")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="run one method x supervision experiment")
    _add_config_flags(p)
    p.set_defaults(func=cmd_train)

    for name, func, helptext in (("eval", cmd_eval, "k-NN evaluation of a saved checkpoint"),
                                 ("cross-eval", cmd_cross_eval, "evaluate a checkpoint on another dataset")):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--run", required=True, help="output directory of a train run")
        p.add_argument("--checkpoint", help="checkpoint file (default: last session)")
        p.add_argument("--k", type=int, help="override k_nn")
        if name == "cross-eval":
            p.add_argument("--dataset", required=True, help="preset name or PPM folder")
        p.set_defaults(func=func)

    p = sub.add_parser("report", help="merge metrics.json of several runs into one table")
    p.add_argument("runs", nargs="+", help="run output directories")
    p.add_argument("--out", help="write merged metrics.json and table.txt here")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ValueError, TypeError, KeyError, OSError, ArithmeticError) as exc:
        print(f"vinil {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
