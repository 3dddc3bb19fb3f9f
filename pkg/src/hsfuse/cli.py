"""Command-line entry point: ``hsfuse <command> [flags]``.

Exit codes: 0 success, 2 config error, 3 data error, 4 numeric failure.
Errors go to stderr as one line: ``error kind=<kind> field=<field> message="..."``.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np
import torch

from .ablation import AXES, ablate, format_rows
from .config import KEY_HELP, RunConfig, load_config
from .data_io import SynthConfig, load_bundle, prepare_scene, save_bundle, synth_scene
from .errors import ConfigError, DataError, HsfuseError
from .metrics import evaluate, render_map
from .text.manifest import generic_manifest, load_manifest, trento_manifest
from .train import heldout_truth, load_checkpoint, predict, save_checkpoint, train, train_counts_map

DATA_DIR_ENV = "HSFUSE_DATA_DIR"

logger = logging.getLogger("hsfuse")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        _emit_error("config", "argv", message)
        sys.exit(2)


def _emit_error(kind: str, field: str | None, message: str) -> None:
    msg = json.dumps(str(message))
    fld = f" field={field}" if field else ""
    print(f"error kind={kind}{fld} message={msg}", file=sys.stderr)


def _config_epilog() -> str:
    defaults = RunConfig().to_dict()
    lines = ["config keys (file passed with --config, TOML key = value):"]
    for key, val in defaults.items():
        lines.append(f"  {key:<18} default {val!r:<22} {KEY_HELP.get(key, '')}")
    return "\n".join(lines)


def _data_path(p: str) -> Path:
    path = Path(p)
    base = os.environ.get(DATA_DIR_ENV)
    if not path.is_absolute() and not path.exists() and base:
        return Path(base) / path
    return path


def _parse_size(text: str) -> tuple[int, int]:
    try:
        m, n = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise ConfigError("size", f"expected MxN, got {text!r}") from None
    return m, n


def _run_config(args) -> RunConfig:
    cfg = load_config(getattr(args, "config", None))
    if args.deterministic:
        cfg = cfg.replace(deterministic=True)
    overrides = {k: v for k, v in (("epochs", getattr(args, "epochs", None)),) if v is not None}
    return cfg.replace(**overrides).validate() if overrides else cfg


def _manifest_for(args, scene):
    if getattr(args, "prompts", None) == "trento":
        return trento_manifest()
    if getattr(args, "prompts", None):
        return load_manifest(args.prompts)
    return generic_manifest(scene.class_names)


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------


def cmd_synth(args) -> int:
    m, n = _parse_size(args.size)
    cfg = SynthConfig(M=m, N=n, D=args.bands, C=args.classes, noise=args.noise)
    scene = synth_scene(cfg, seed=args.seed)
    save_bundle(scene, args.out)
    print(f"wrote synthetic scene {m}x{n}x{args.bands}, {args.classes} classes -> {args.out}")
    return 0


def cmd_prepare(args) -> int:
    scene = load_bundle(_data_path(args.scene))
    if scene.pca_reduced:
        raise DataError("scene is already PCA-reduced; prepare expects a raw bundle")
    save_bundle(prepare_scene(scene, args.dim), args.out)
    print(f"wrote prepared scene ({args.dim} bands) -> {args.out}")
    return 0


def cmd_train(args) -> int:
    cfg = _run_config(args)
    scene = load_bundle(_data_path(args.scene))
    if not scene.pca_reduced:
        raise DataError("scene is not prepared; run `hsfuse prepare` first")
    manifest = _manifest_for(args, scene)
    ckpt, hist = train(cfg, scene, manifest, log_path=args.log)
    save_checkpoint(ckpt, args.out)
    last = hist.records[-1] if hist.records else {}
    print(f"trained {len(hist.records)} steps in {hist.train_seconds:.1f}s, final total "
          f"{last.get('total', float('nan')):.4f} -> {args.out}")
    return 0


def cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    scene = load_bundle(_data_path(args.scene))
    start = time.perf_counter()
    pred = predict(ckpt, scene)
    secs = time.perf_counter() - start
    report = evaluate(
        pred, heldout_truth(scene, ckpt), scene.C,
        class_names=list(scene.class_names),
        train_counts=train_counts_map(scene, ckpt).tolist(),
        runtimes={"Test Time (s)": secs},
    )
    report.save(args.report)
    print(report.table(), end="")
    return 0


def cmd_predict(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    scene = load_bundle(_data_path(args.scene))
    pred = predict(ckpt, scene)
    np.save(args.out, pred)
    print(f"wrote {pred.shape[0]}x{pred.shape[1]} label map -> {args.out}")
    return 0


def cmd_map(args) -> int:
    path = Path(args.pred)
    if not path.is_file():
        raise DataError(f"missing file: {path}")
    pred = np.load(path, allow_pickle=False)
    scene = load_bundle(_data_path(args.scene))
    if pred.shape != scene.labels.shape:
        raise DataError(f"map shape {pred.shape} does not match scene {scene.labels.shape}")
    render_map(pred, scene.palette, args.png)
    print(f"wrote {args.png}")
    return 0


def cmd_ablate(args) -> int:
    cfg = _run_config(args)
    if args.scene:
        scene = load_bundle(_data_path(args.scene))
        if scene.pca_reduced:
            raise DataError("ablate expects an unreduced scene (it reduces per setting)")
    else:
        scene = synth_scene(SynthConfig(), seed=cfg.seed)
    manifest = _manifest_for(args, scene)
    rows = ablate(cfg, args.axis, scene, manifest)
    table = format_rows(args.axis, rows)
    if args.out:
        Path(args.out).write_text(table)
    print(table, end="")
    return 0


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--deterministic", action="store_true",
                        help="seeded, single-threaded, deterministic kernels")
    common.add_argument("--jobs", type=int, default=None, help="cap on worker threads")
    common.add_argument("-v", "--verbose", action="store_true")

    epilog = _config_epilog()
    fmt = argparse.RawDescriptionHelpFormatter
    parser = _Parser(prog="hsfuse", description=__doc__, formatter_class=fmt, epilog=epilog)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, help_text):
        return sub.add_parser(name, help=help_text, description=help_text, parents=[common],
                              formatter_class=fmt, epilog=epilog)

    p = add("synth", "generate a deterministic synthetic scene bundle")
    p.add_argument("--out", required=True)
    p.add_argument("--classes", type=int, default=6)
    p.add_argument("--size", default="64x64", help="MxN")
    p.add_argument("--bands", type=int, default=32)
    p.add_argument("--noise", type=float, default=0.02)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = add("prepare", "PCA-reduce and min-max normalise a raw bundle")
    p.add_argument("--scene", required=True)
    p.add_argument("--dim", type=int, default=15)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_prepare)

    p = add("train", "train a model on a prepared bundle")
    p.add_argument("--scene", required=True)
    p.add_argument("--prompts", help="prompt manifest (TOML/JSON), or 'trento' for the bundled one; "
                   "generic prompts if omitted")
    p.add_argument("--config", help="run config (TOML/JSON); full-size defaults if omitted")
    p.add_argument("--epochs", type=int, help="override the config's epoch count")
    p.add_argument("--log", help="JSON-lines loss log, one record per step")
    p.add_argument("--out", required=True, help="checkpoint path (.npz)")
    p.set_defaults(func=cmd_train)

    p = add("eval", "score a checkpoint on the held-out pixels of a bundle")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--scene", required=True)
    p.add_argument("--report", required=True, help="JSON report; a .txt table is written beside it")
    p.set_defaults(func=cmd_eval)

    p = add("predict", "label every pixel of a bundle")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--scene", required=True)
    p.add_argument("--out", required=True, help="label map (.npy, int32)")
    p.set_defaults(func=cmd_predict)

    p = add("map", "render a label map as PNG with the scene palette")
    p.add_argument("--pred", required=True)
    p.add_argument("--scene", required=True)
    p.add_argument("--png", required=True)
    p.set_defaults(func=cmd_map)

    p = add("ablate", "run one ablation grid and print OA/AA/Kappa per setting")
    p.add_argument("--axis", required=True, choices=AXES)
    p.add_argument("--scene", help="raw (unreduced) bundle; synthetic if omitted")
    p.add_argument("--prompts")
    p.add_argument("--config")
    p.add_argument("--epochs", type=int)
    p.add_argument("--out", help="write the table here as well")
    p.set_defaults(func=cmd_ablate)
    return parser


def run_cli(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.jobs is not None:
        torch.set_num_threads(max(1, args.jobs))
    if args.deterministic:
        torch.set_num_threads(1)
    try:
        return args.func(args)
    except ConfigError as exc:
        _emit_error(exc.kind, exc.field, exc.message)
        return exc.exit_code
    except HsfuseError as exc:
        _emit_error(exc.kind, None, str(exc))
        return exc.exit_code


def main() -> None:
    sys.exit(run_cli())


if __name__ == "__main__":
    main()
