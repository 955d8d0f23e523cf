"""Command-line entry point.

Every subcommand writes its artifacts under ``--out`` (or under
``$CORRVAE_OUT/<subcommand>`` when the flag is omitted), together with the
effective merged config and a manifest of seeds, versions and input digests.
Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import platform
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .config import ConfigError, RunConfig, load_config, write_config
from .datagen import make_dataset, read_dataset, write_dataset, write_pgm
from .evaluation import evaluate, mask_recovery
from .maskpool import export_mask_csv
from .model import load_checkpoint, read_checkpoint, train
from .moo import SpecError, generate, read_spec, traverse, write_traversal
from .numcore import Rng

ENV_OUT = "CORRVAE_OUT"
DATASET_FILE = "dataset.cvds"
log = logging.getLogger("corrvae")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# -- helpers ---------------------------------------------------------------
def _digest(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _out_dir(args) -> Path:
    if args.out:
        return Path(args.out)
    root = os.environ.get(ENV_OUT)
    if not root:
        raise UsageError(f"--out is required (or set {ENV_OUT})")
    return Path(root) / args.command


def _dataset_path(path: str) -> Path:
    p = Path(path)
    if p.is_dir():
        p = p / DATASET_FILE
    if not p.is_file():
        raise UsageError(f"dataset {path} not found")
    return p


def _existing(path: str, what: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"{what} {path} not found")
    return p


def _overrides(pairs: Sequence[str] | None) -> dict[str, str]:
    out = {}
    for item in pairs or ():
        key, sep, value = item.partition("=")
        if not sep:
            raise UsageError(f"--set expects key=value, got {item!r}")
        out[key.strip()] = value.strip()
    return out


def _config(args, base: dict | None = None, **flags) -> RunConfig:
    """Merge: checkpoint config < --config file < --set < explicit flags."""
    flat = dict(base or {})
    if args.config:
        try:
            flat.update(json.loads(_existing(args.config, "config file").read_text()))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {args.config} is not valid JSON: {exc}") from None
    flat.update(_overrides(args.set))
    flat.update({k: v for k, v in flags.items() if v is not None})
    return load_config(None, flat)


def _write_manifest(out: Path, args, argv: Sequence[str], cfg: RunConfig | None,
                    seeds: dict, inputs: Sequence[Path], outputs: Sequence[str]) -> Path:
    manifest = {
        "command": args.command,
        "argv": list(argv),
        "config": cfg.to_flat() if cfg else None,
        "seeds": seeds,
        "versions": {"corrvae": __version__, "numpy": np.__version__,
                     "python": platform.python_version()},
        "inputs": {str(p): _digest(p) for p in inputs},
        "outputs": sorted(outputs),
    }
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def _checkpoint_config(path: Path) -> dict:
    header, _ = read_checkpoint(path)
    return dict(header.get("config", {}))


# -- subcommands -------------------------------------------------------------
def cmd_gen_data(args, argv) -> int:
    out = _out_dir(args)
    if args.n < 1:
        raise UsageError("--n must be at least 1")
    ds = make_dataset(args.n, args.seed, N=args.size, include_shape=args.include_shape)
    out.mkdir(parents=True, exist_ok=True)
    write_dataset(ds, out / DATASET_FILE)
    outputs = [DATASET_FILE]
    for i in range(min(args.preview, len(ds))):
        write_pgm(out / f"sample_{i:03d}.pgm", ds.images[i])
        outputs.append(f"sample_{i:03d}.pgm")
    _write_manifest(out, args, argv, None, {"data": args.seed}, [], outputs)
    print(f"wrote {len(ds)} samples to {out / DATASET_FILE}")
    return 0


def cmd_train(args, argv) -> int:
    cfg = _config(args, **{"data.path": args.data, "train.seed": args.seed,
                           "train.epochs": args.epochs})
    if not cfg.data.path:
        raise UsageError("no dataset: pass --data or set data.path in the config")
    data_path = _dataset_path(cfg.data.path)
    out = _out_dir(args)
    ds = read_dataset(data_path)
    train_set, _ = ds.split(cfg.data.n_test)
    cfg.out = str(out)
    write_config(cfg, out / "config.json")
    result = train(train_set, cfg, out_dir=out)
    _write_manifest(out, args, argv, cfg, {"train": cfg.train.seed}, [data_path],
                    ["config.json", "metrics.csv", "model.ckpt"])
    last = result.metrics[-1]
    print(f"trained {cfg.train.epochs} epochs on {len(train_set)} samples; "
          f"final loss {last['total']:.4f}; checkpoint {result.checkpoint}")
    return 0


def cmd_eval(args, argv) -> int:
    ckpt = _existing(args.ckpt, "checkpoint")
    cfg = _config(args, _checkpoint_config(ckpt), **{"data.path": args.data, "gen.seed": args.seed})
    if not cfg.data.path:
        raise UsageError("no dataset: pass --data")
    data_path = _dataset_path(cfg.data.path)
    out = _out_dir(args)
    model = load_checkpoint(ckpt)
    _, test = read_dataset(data_path).split(cfg.data.n_test)
    report = evaluate(model, test, Rng(cfg.gen.seed, 3), cfg.gen, n_control=args.n_control,
                      n_range=args.n_range, range_batch=args.range_batch, bins=args.bins)
    paths = report.write(out)
    write_config(cfg, out / "config.json")
    _write_manifest(out, args, argv, cfg, {"gen": cfg.gen.seed}, [ckpt, data_path],
                    [p.name for p in paths.values()] + ["config.json"])
    for n, a, b in zip(report.property_names, report.prediction_mse, report.control_mse):
        print(f"{n:>5}: prediction MSE {a:.5f}  control MSE {b:.5f}")
    print(f"range satisfaction {report.range_satisfaction:.3f}  avgMI {report.avg_mi:.4f}  "
          f"pairs {report.recovered_pairs}")
    return 0


def cmd_generate(args, argv) -> int:
    ckpt = _existing(args.ckpt, "checkpoint")
    spec_path = _existing(args.spec, "spec file")
    cfg = _config(args, _checkpoint_config(ckpt), **{"gen.seed": args.seed})
    if args.batch < 1:
        raise UsageError("--batch must be at least 1")
    model = load_checkpoint(ckpt)
    spec = read_spec(spec_path, model.property_names)
    out = _out_dir(args)
    images, reports = generate(model, spec, Rng(cfg.gen.seed, 4), batch=args.batch,
                               opts=cfg.gen, out_dir=out)
    write_config(cfg, out / "config.json")
    _write_manifest(out, args, argv, cfg, {"gen": cfg.gen.seed}, [ckpt, spec_path],
                    [f"image_{i:03d}.pgm" for i in range(len(images))]
                    + ["report.json", "report.csv", "config.json"])
    ok = sum(r.converged for r in reports)
    print(f"generated {len(images)} images, {ok} meet the spec; report in {out / 'report.json'}")
    return 0


def cmd_traverse(args, argv) -> int:
    ckpt = _existing(args.ckpt, "checkpoint")
    cfg = _config(args, _checkpoint_config(ckpt), **{"gen.seed": args.seed})
    model = load_checkpoint(ckpt)
    out = _out_dir(args)
    try:
        tr = traverse(model, args.index, args.lo, args.hi, args.steps, space=args.space,
                      rng=Rng(cfg.gen.seed, 5), opts=cfg.gen)
    except IndexError as exc:
        raise UsageError(str(exc)) from None
    path = write_traversal(out, tr, model.property_names)
    write_config(cfg, out / "config.json")
    _write_manifest(out, args, argv, cfg, {"gen": cfg.gen.seed}, [ckpt],
                    [f"step_{i:03d}.pgm" for i in range(len(tr.values))]
                    + [path.name, "config.json"])
    print(f"{len(tr.values)} steps of {args.space}[{args.index}] written to {out}")
    return 0


def cmd_inspect_mask(args, argv) -> int:
    ckpt = _existing(args.ckpt, "checkpoint")
    model = load_checkpoint(ckpt)
    out = _out_dir(args)
    hard, prob = export_mask_csv(model.mask, model.property_names, out)
    score = mask_recovery(model.hard_mask(), model.property_names)
    (out / "pairs.json").write_text(json.dumps({
        "recovered": score.recovered, "expected": score.expected,
        "precision": score.precision, "recall": score.recall}, indent=2) + "\n")
    _write_manifest(out, args, argv, None, {}, [ckpt], [hard.name, prob.name, "pairs.json"])
    names = model.property_names
    print("latent " + " ".join(f"{n:>5}" for n in names))
    for i, row in enumerate(model.hard_mask()):
        print(f"w{i + 1:<5} " + " ".join(f"{int(v):>5}" for v in row))
    print(f"correlated pairs: {score.recovered}")
    return 0


# -- parser ------------------------------------------------------------------
def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="corrvae", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"corrvae {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def common(sp, config=True):
        sp.add_argument("--out", help=f"output directory (default ${ENV_OUT}/<command>)")
        if config:
            sp.add_argument("--config", help="flat JSON config with dotted keys")
            sp.add_argument("--set", action="append", metavar="KEY=VALUE",
                            help="override one config key; repeatable")

    g = sub.add_parser("gen-data", help="render a synthetic shapes dataset")
    g.add_argument("--n", type=int, default=5000)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--size", type=int, default=16, help="canvas side in pixels")
    g.add_argument("--include-shape", action="store_true", help="add the binary shape property")
    g.add_argument("--preview", type=int, default=0, help="also write the first K images as PGM")
    common(g, config=False)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a model")
    t.add_argument("--data", help="dataset file or directory")
    t.add_argument("--seed", type=int)
    t.add_argument("--epochs", type=int)
    common(t)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on its held-out split")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", help="dataset file or directory (defaults to the training data)")
    e.add_argument("--seed", type=int)
    e.add_argument("--n-control", type=int, default=25)
    e.add_argument("--n-range", type=int, default=10)
    e.add_argument("--range-batch", type=int, default=8)
    e.add_argument("--bins", type=int, default=16)
    common(e)
    e.set_defaults(func=cmd_eval)

    tr = sub.add_parser("traverse", help="sweep one latent coordinate")
    tr.add_argument("--ckpt", required=True)
    tr.add_argument("--index", type=int, required=True)
    tr.add_argument("--space", choices=("w", "wprime"), default="w")
    tr.add_argument("--lo", type=float, default=-3.0)
    tr.add_argument("--hi", type=float, default=3.0)
    tr.add_argument("--steps", type=int, default=11)
    tr.add_argument("--seed", type=int)
    common(tr)
    tr.set_defaults(func=cmd_traverse)

    gen = sub.add_parser("generate", help="generate images meeting a property spec")
    gen.add_argument("--ckpt", required=True)
    gen.add_argument("--spec", required=True, help="JSON constraint spec")
    gen.add_argument("--batch", type=int, default=8)
    gen.add_argument("--seed", type=int)
    common(gen)
    gen.set_defaults(func=cmd_generate)

    im = sub.add_parser("inspect-mask", help="export and summarize the learned mask")
    im.add_argument("--ckpt", required=True)
    common(im, config=False)
    im.set_defaults(func=cmd_inspect_mask)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not args.command:
            raise UsageError("a subcommand is required; see --help")
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(message)s")
        return args.func(args, argv)
    except (UsageError, ConfigError, SpecError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except SystemExit as exc:         # --help / --version
        return int(exc.code or 0)
    except Exception as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
