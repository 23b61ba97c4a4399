"""``safepatch`` command line.

Exit status is 0 on success, 1 for usage or configuration errors and 2
for runtime failures. Errors are reported on stderr as
``safepatch: error: <ErrorClass>: <message>``.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import workflows as wf
from .config import RunConfig, load_config, schema_help
from .data.datasets import write_dataset
from .diffusion import IMAGE_SHAPE
from .evaluation import classify, reports_to_csv
from .exceptions import InvalidConfigError, InvalidPromptError, InvalidTokenError, SafePatchError
from .patch import merge_patches
from .storage import encode_container, load_base_with_meta, load_patch, save_base, save_patch
from .validation import check_prompts

USAGE_ERRORS = (InvalidConfigError, InvalidPromptError, InvalidTokenError)
_SHADES = " .:-=+*#%@"


class UsageError(InvalidConfigError):
    """Bad command-line usage."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# -- image output ------------------------------------------------------------

def to_pgm(image: np.ndarray) -> str:
    """Plain PGM (P2), values mapped from [-1, 1] to 0..255."""
    img = np.asarray(image, dtype=np.float64).reshape(IMAGE_SHAPE[1:])
    vals = np.rint((np.clip(img, -1.0, 1.0) + 1.0) * 127.5).astype(int)
    rows = "\n".join(" ".join(str(v) for v in row) for row in vals)
    return f"P2\n{img.shape[1]} {img.shape[0]}\n255\n{rows}\n"


def preview(image: np.ndarray) -> str:
    img = np.asarray(image).reshape(IMAGE_SHAPE[1:])
    idx = np.clip(((img + 1.0) / 2.0 * len(_SHADES)).astype(int), 0, len(_SHADES) - 1)
    return "\n".join("".join(_SHADES[i] for i in row) for row in idx)


# -- helpers -----------------------------------------------------------------

def _config(args) -> RunConfig:
    cfg = load_config(args.config)
    overrides: Dict[str, object] = {"seed": getattr(args, "seed", None)}
    return cfg.update(overrides)


def _need(args, name: str):
    value = getattr(args, name, None)
    if not value:
        raise UsageError(f"--{name} is required for this command")
    return value


def _load_base(path):
    base, meta = load_base_with_meta(path)
    return base, wf.schedule_from_meta(meta)


def _ensure_dir(path: str) -> str:
    os.makedirs(path, exist_ok=True)
    return path


def _metrics_path(out: str) -> str:
    return out + ".metrics"


def _size(args) -> Optional[int]:
    if not args.size:
        return None
    sizes = _parse_sizes(args.size)
    if len(sizes) != 1:
        raise UsageError("--size takes a single value for this command")
    return sizes[0]


def _parse_sizes(text: str) -> List[int]:
    try:
        sizes = [int(x) for x in text.split(",") if x.strip()]
    except ValueError as exc:
        raise UsageError(f"--size expects integers, got {text!r}") from exc
    if not sizes or any(s < 1 for s in sizes):
        raise UsageError("--size values must be >= 1")
    return sizes


# -- commands ----------------------------------------------------------------

def cmd_train_base(args) -> int:
    cfg = _config(args)
    cfg.update({"base_steps": args.steps, "corpus_size": _size(args)})
    out = _need(args, "out")
    base, schedule, log = wf.fit_base(cfg)
    meta = dict(wf.schedule_meta(schedule), seed=str(cfg.seed), steps=str(cfg.base_steps))
    save_base(out, base, meta)
    with open(_metrics_path(out), "w") as fh:
        fh.write("\n".join(log.lines()) + "\n")
    print(f"wrote {out}")
    return 0


def cmd_build_data(args) -> int:
    cfg = _config(args)
    cfg.update({"pair_size": _size(args)})
    out = _ensure_dir(_need(args, "out"))
    generator = None
    if args.base:
        base, schedule = _load_base(args.base)
        generator = wf.model_of(base, schedule).generate
    pairs, benign, manifest = wf.build_data(cfg, generator=generator)
    write_dataset(os.path.join(out, "pairs.tsv"), pairs)
    write_dataset(os.path.join(out, "benign.tsv"), benign)
    with open(os.path.join(out, "manifest.txt"), "w") as fh:
        fh.write(manifest.to_text())
    print(f"wrote {len(pairs)} pairs and {len(benign)} benign records to {out}")
    return 0


def _read_data(cfg: RunConfig):
    from .data.datasets import read_dataset

    pairs = read_dataset(os.path.join(cfg.data, "pairs.tsv"))
    benign_path = os.path.join(cfg.data, "benign.tsv")
    benign = read_dataset(benign_path) if os.path.exists(benign_path) else []
    return pairs, benign


def cmd_train_patch(args) -> int:
    cfg = _config(args)
    cfg.update({"max_steps": args.steps, "pair_size": _size(args)})
    base, schedule = _load_base(_need(args, "base"))
    out = _need(args, "out")
    if os.path.isdir(out):
        out = os.path.join(out, f"Safe-Control_{cfg.category}.spc")
    if cfg.data:
        pairs, benign = _read_data(cfg)
    else:
        pairs, benign, _ = wf.build_data(cfg)
    with open(_metrics_path(out), "w") as metrics:
        patch, log = wf.fit_patch(cfg, base, schedule, pairs, benign, metrics=metrics)
    patch.meta["name"] = f"Safe-Control_{cfg.category}"
    save_patch(out, patch)
    print(f"wrote {out}" + (f" steps_to_target={log.steps_to_target}" if cfg.eval_every else ""))
    return 0


def cmd_merge(args) -> int:
    paths = args.patch or []
    if not paths:
        raise UsageError("merge needs at least one --patch")
    out = _need(args, "out")
    if args.weights:
        try:
            weights = [float(w) for w in args.weights.split(",")]
        except ValueError as exc:
            raise UsageError(f"--weights expects numbers, got {args.weights!r}") from exc
    else:
        weights = [1.0] * len(paths)
    if len(weights) != len(paths):
        raise UsageError(f"{len(weights)} weights for {len(paths)} patches")
    merged = merge_patches([(load_patch(p), w) for p, w in zip(paths, weights)])
    merged.meta["name"] = "Safe-Control_multiple" if len(paths) > 1 else merged.meta.get("category", "")
    save_patch(out, merged)
    print(f"wrote {out}")
    return 0


def cmd_sample(args) -> int:
    cfg = _config(args)
    base, schedule = _load_base(_need(args, "base"))
    out = _ensure_dir(_need(args, "out"))
    prompts = check_prompts([p for p in _need(args, "prompts").split(";") if p.strip()])
    model = wf.model_of(base, schedule)
    sampler = model.attach(load_patch(args.patch)) if args.patch else model
    flat = [p for p in prompts for _ in range(cfg.count)]
    seeds = [cfg.seed + j for _ in prompts for j in range(cfg.count)]
    images = sampler.generate(flat, seeds)
    tensors = {}
    for i, (p, s, img) in enumerate(zip(flat, seeds, images)):
        name = f"sample_{i:03d}"
        with open(os.path.join(out, name + ".pgm"), "w") as fh:
            fh.write(to_pgm(img))
        tensors[name] = img
        verdict = "unsafe" if classify(img).unsafe else "safe"
        print(f"# {name} prompt='{p.words}' seed={s} verdict={verdict}")
        if args.preview:
            print(preview(img))
    meta = {"prompts": ";".join(" ".join(map(str, p.tokens)) for p in flat), "seeds": ",".join(map(str, seeds))}
    with open(os.path.join(out, "samples.spc"), "wb") as fh:
        fh.write(encode_container("samples", tensors, meta))
    return 0


def _panels(name: Optional[str]) -> List[str]:
    from .data.concepts import UNSAFE_CATEGORIES

    if not name or name == "all":
        return list(UNSAFE_CATEGORIES)
    cats = [c for c in name.split(",") if c]
    bad = [c for c in cats if c not in UNSAFE_CATEGORIES]
    if bad:
        raise UsageError(f"unknown panel {bad[0]!r}; choose from {', '.join(UNSAFE_CATEGORIES)} or all")
    return cats


def cmd_eval(args) -> int:
    cfg = _config(args)
    base, schedule = _load_base(_need(args, "base"))
    out = _ensure_dir(_need(args, "out"))
    patches = []
    for path in args.patch or []:
        p = load_patch(path)
        patches.append((p.meta.get("name") or os.path.splitext(os.path.basename(path))[0], p))
    reports = wf.evaluate_models(cfg, base, schedule, patches, _panels(args.panel))
    with open(os.path.join(out, "report.txt"), "w") as fh:
        fh.write("\n".join(r.to_keyvalue() for r in reports))
    csv = reports_to_csv(reports)
    with open(os.path.join(out, "report.csv"), "w") as fh:
        fh.write(csv)
    sys.stdout.write(csv)
    return 0


def cmd_sweep(args) -> int:
    cfg = _config(args)
    cfg.update({"max_steps": args.steps})
    sizes = _parse_sizes(args.size) if args.size else list(cfg.sweep_sizes)
    base, schedule = _load_base(_need(args, "base"))
    out = _ensure_dir(_need(args, "out"))
    result = wf.run_sweep(cfg, base, schedule, sizes, cfg.sweep_seeds, out_dir=out)
    summary = result.summary()
    with open(os.path.join(out, "summary.txt"), "w") as fh:
        fh.write(summary)
    sys.stdout.write(summary)
    return 0


def cmd_rewriter(args) -> int:
    from .data.rewriter import serve

    serve()
    return 0


COMMANDS = {
    "train-base": (cmd_train_base, "train the locked base model"),
    "build-data": (cmd_build_data, "build unsafe/safe pair and benign datasets"),
    "train-patch": (cmd_train_patch, "train a safety patch against a frozen base"),
    "merge": (cmd_merge, "merge patches by weighted averaging"),
    "sample": (cmd_sample, "sample images, optionally through a patch"),
    "eval": (cmd_eval, "unsafe-probability and proxy report"),
    "sweep": (cmd_sweep, "steps-to-target across pair-dataset sizes"),
    "rewriter-serve": (cmd_rewriter, "serve the rule rewriter over the JSON-lines protocol"),
}


def build_parser() -> argparse.ArgumentParser:
    epilog = ("config keys (key=value file):\n  " + "\n  ".join(schema_help())
              + "\n\nSAFEPATCH_THREADS caps sampling worker threads (default 1).")
    parser = _Parser(prog="safepatch", description="Toy text-to-image model with plug-in safety patches.",
                     epilog=epilog, formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text, description=help_text)
        if name == "rewriter-serve":
            continue
        p.add_argument("--config", help="key=value config file")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--out", help="output file or directory")
        if name in ("build-data", "train-patch", "sample", "eval", "sweep"):
            p.add_argument("--base", help="base checkpoint (SPC1)")
        if name in ("train-base", "train-patch", "sweep"):
            p.add_argument("--steps", type=int, help="training step budget")
        if name in ("train-base", "build-data", "train-patch", "sweep"):
            p.add_argument("--size", help="dataset size (comma-separated list for sweep)")
        if name in ("merge", "sample", "eval"):
            p.add_argument("--patch", action="append" if name != "sample" else "store",
                           help="patch checkpoint" + (" (repeatable)" if name != "sample" else ""))
        if name == "merge":
            p.add_argument("--weights", help="comma-separated merge weights (default all 1)")
        if name == "sample":
            p.add_argument("--prompts", help="';'-separated prompts (words or token ids)")
            p.add_argument("--preview", action="store_true", help="print a text rendering of each image")
        if name == "eval":
            p.add_argument("--panel", help="unsafe panel: blob, spikes or all (default)")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.verbose:
            logging.basicConfig(level=logging.INFO, format="%(message)s")
        if not args.command:
            raise UsageError("a command is required (see --help)")
        return COMMANDS[args.command][0](args)
    except USAGE_ERRORS as exc:
        sys.stderr.write(f"safepatch: error: {type(exc).__name__}: {exc}\n")
        return 1
    except (SafePatchError, OSError, ValueError, ArithmeticError) as exc:
        sys.stderr.write(f"safepatch: error: {type(exc).__name__}: {exc}\n")
        return 2


if __name__ == "__main__":
    sys.exit(main())
