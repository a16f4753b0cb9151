"""``mres`` command line: eval, train, engine, stats and groups.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import shutil
import sys
from pathlib import Path

from . import dataset as ds
from .errors import MresError, NonFiniteLoss, SchemaError

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2

log = logging.getLogger("mres")


class UsageError(Exception):
    """Bad arguments or configuration; maps to exit code 2."""


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=False, ensure_ascii=False) + "\n", encoding="utf-8")


def _dataset_root(arg) -> Path:
    root = Path(arg) if arg else ds.default_root()
    if root is None:
        raise UsageError(f"--dataset not given and {ds.DATA_ROOT_ENV} is unset")
    if not root.is_dir():
        raise UsageError(f"dataset root not found: {root}")
    return root


def _load_split(args):
    root = _dataset_root(args.dataset)
    if not (root / f"{args.split}.jsonl").is_file():
        raise UsageError(f"split file not found: {root / (args.split + '.jsonl')}")
    return ds.load_benchmark(root, args.split)


def _load_model(path):
    from .model import load_checkpoint

    if not Path(path).is_file():
        raise UsageError(f"checkpoint not found: {path}")
    model, payload = load_checkpoint(path)
    if "vocab" not in payload:
        raise UsageError(f"checkpoint {path} carries no vocabulary")
    return model, ds.Vocabulary.from_json(payload["vocab"])


# --- commands ---------------------------------------------------------------------

def cmd_eval(args) -> int:
    from .evaluate import evaluate, model_predictor, oracle_predictor, validate_report

    split = _load_split(args)
    if not 0.0 < args.threshold < 1.0:
        raise UsageError("--threshold must lie in (0, 1)")
    if args.checkpoint == "oracle":
        predictor, ckpt_id = oracle_predictor, "oracle"
    else:
        model, vocab = _load_model(args.checkpoint)
        predictor, ckpt_id = model_predictor(model, vocab), Path(args.checkpoint).name
    settings = [s.value for s in ds.EvalSetting] if args.setting == "all" else [args.setting]
    name = args.dataset_name or _dataset_root(args.dataset).name
    report = evaluate(split, predictor, settings, threshold=args.threshold, dataset=name, checkpoint=ckpt_id)
    obj = report.to_json()
    validate_report(obj)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "report.json", obj)
    table = report.render_table()
    (out / "report.txt").write_text(table, encoding="utf-8")
    sys.stdout.write(table)
    return EXIT_OK


def cmd_train(args) -> int:
    import torch

    from .model import ModelConfig, build_model, load_checkpoint
    from .training import fit, load_config_file, prepare_examples

    if not Path(args.config).is_file():
        raise UsageError(f"config file not found: {args.config}")
    try:
        mcfg, tcfg, extras = load_config_file(args.config, args.mode)
    except (ValueError, KeyError) as exc:
        raise UsageError(f"bad config {args.config}: {exc}") from None
    if extras:
        raise UsageError(f"unknown config keys: {', '.join(sorted(extras))}")
    split = _load_split(args)
    if args.resume:
        if not Path(args.resume).is_file():
            raise UsageError(f"resume checkpoint not found: {args.resume}")
        _, payload = load_checkpoint(args.resume)
        vocab = ds.Vocabulary.from_json(payload["vocab"])
        mcfg = ModelConfig.from_dict(payload["config"])
    else:
        vocab = ds.Vocabulary.build(s.expression for s in split)
    if len(vocab) > mcfg.vocab_size:
        raise UsageError(f"vocabulary has {len(vocab)} entries but vocab_size is {mcfg.vocab_size}")
    torch.set_num_threads(max(1, args.threads))
    model = build_model(mcfg, seed=tcfg.seed)
    examples = prepare_examples(split, vocab, model)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    try:
        model, history = fit(model, examples, tcfg, out_dir=out, resume=args.resume,
                             log_path=out / "train_log.jsonl", extra_state={"vocab": vocab.to_json()})
    except NonFiniteLoss as exc:
        log.error("training aborted: %s", exc)
        return EXIT_RUNTIME
    last = sorted(out.glob("epoch_*.pt"))
    if last:
        shutil.copyfile(last[-1], out / "final.pt")
    print(f"trained {len(history)} steps; checkpoints in {out}")
    return EXIT_OK


def cmd_engine(args) -> int:
    from .engine import JsonlSink, load_backends, load_image_manifest, run_engine

    if not Path(args.images).is_file():
        raise UsageError(f"image manifest not found: {args.images}")
    if not Path(args.backends).is_file():
        raise UsageError(f"backend config not found: {args.backends}")
    try:
        backends = load_backends(args.backends)
    except KeyError as exc:
        raise UsageError(exc.args[0]) from None
    except (ValueError, json.JSONDecodeError) as exc:
        raise UsageError(f"bad backend config: {exc}") from None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    try:
        with JsonlSink(out / "records.jsonl") as sink:
            report = run_engine(load_image_manifest(args.images), backends, sink)
    finally:
        backends.close()
    _write_json(out / "report.json", report.to_json())
    print(json.dumps(report.to_json(), sort_keys=True))
    return EXIT_OK


def cmd_stats(args) -> int:
    split = _load_split(args)
    stats = ds.compute_stats(split)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "stats.json", stats.to_json())
    with (out / "categories.csv").open("w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["granularity", "category", "count"])
        for cat, n in stats.expressions_per_category.items():
            w.writerow(["part", cat, n])
        for cat, n in stats.expressions_per_object_category.items():
            w.writerow(["object", cat, n])
    print(json.dumps({k: v for k, v in stats.to_json().items() if not isinstance(v, dict)}))
    return EXIT_OK


def group_palette(n: int):
    import numpy as np

    rng = np.random.default_rng(12345)
    return rng.integers(0, 256, size=(n, 3), dtype=np.uint8)


def cmd_groups(args) -> int:
    import numpy as np
    import torch
    from PIL import Image

    from .model import assign_groups, preprocess_image

    model, _ = _load_model(args.checkpoint)
    if not Path(args.image).is_file():
        raise UsageError(f"image not found: {args.image}")
    image = ds.load_image(None, args.image)
    cfg = model.cfg
    if (args.level == "low" and not cfg.use_low_group) or (args.level == "high" and not cfg.use_high_group):
        raise UsageError(f"checkpoint has no {args.level}-level group tokens")
    model.eval()
    with torch.no_grad():
        x = preprocess_image(image, cfg.image_size)[None].to(next(model.parameters()).dtype)
        patches, low, high, _ = model.visual_encode(x)
    grid = assign_groups(patches[0], (low if args.level == "low" else high)[0])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with (out / f"groups_{args.level}.csv").open("w", encoding="utf-8", newline="") as fh:
        csv.writer(fh, lineterminator="\n").writerows(grid.tolist())
    n = cfg.n_low_group if args.level == "low" else cfg.n_high_group
    colors = group_palette(n)[grid]
    up = np.kron(colors, np.ones((cfg.patch_size, cfg.patch_size, 1), dtype=np.uint8))
    Image.fromarray(up).save(out / f"groups_{args.level}.png")
    print(f"{args.level}-level assignment: {len(np.unique(grid))} of {n} groups used")
    return EXIT_OK


# --- parser -----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mres", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a benchmark split")
    e.add_argument("--dataset", help=f"dataset root (default ${ds.DATA_ROOT_ENV})")
    e.add_argument("--dataset-name", help="name shown in the report (default: root directory name)")
    e.add_argument("--split", default="val")
    e.add_argument("--setting", default="all", choices=["all"] + [s.value for s in ds.EvalSetting])
    e.add_argument("--checkpoint", required=True, help="checkpoint path, or 'oracle' for ground truth")
    e.add_argument("--threshold", type=float, default=0.35)
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_eval)

    t = sub.add_parser("train", help="train or fine-tune a model")
    t.add_argument("--config", required=True, help="key = value training config file")
    t.add_argument("--dataset", help=f"dataset root (default ${ds.DATA_ROOT_ENV})")
    t.add_argument("--split", default="train")
    t.add_argument("--mode", choices=["pretrain", "finetune"], default="finetune")
    t.add_argument("--resume", help="epoch checkpoint to continue from")
    t.add_argument("--out", default="runs/latest")
    t.add_argument("--threads", type=int, default=1)
    t.set_defaults(func=cmd_train)

    g = sub.add_parser("engine", help="run the grounding data engine")
    g.add_argument("--images", required=True, help="JSON-lines image manifest")
    g.add_argument("--backends", required=True, help="backend wiring JSON")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_engine)

    s = sub.add_parser("stats", help="corpus statistics of a split")
    s.add_argument("--dataset", help=f"dataset root (default ${ds.DATA_ROOT_ENV})")
    s.add_argument("--split", default="val")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_stats)

    q = sub.add_parser("groups", help="export group-token assignment maps")
    q.add_argument("--checkpoint", required=True)
    q.add_argument("--image", required=True)
    q.add_argument("--level", choices=["low", "high"], default="low")
    q.add_argument("--out", required=True)
    q.set_defaults(func=cmd_groups)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"mres {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SchemaError as exc:
        print(f"mres {args.command}: schema error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except MresError as exc:
        print(f"mres {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
