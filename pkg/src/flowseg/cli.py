"""Command-line interface: ``flowseg <command> ...``.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime or data
error, 3 numerical divergence during training.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from . import metrics, model, synthdata

logger = logging.getLogger("flowseg")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME, EXIT_DIVERGED = 0, 1, 2, 3


class UsageError(Exception):
    """Bad flags or configuration; maps to exit code 1."""


# -- run configuration ------------------------------------------------------------


@dataclass
class RunConfig:
    dataset_dir: str = "data"
    out_dir: str = "runs"
    latent_dim: int = 6
    flow_type: str = "none"
    flow_steps: int = 0
    learning_rate: float = 1e-4
    batch_size: int = 32
    patience: int = 20
    max_epochs: int = 200
    folds: int = 10
    eval_samples: int = 16
    empty_policy: str = "include"
    seed: int = 0
    hidden_width: int = 64
    context_width: int = 16

    def model_config(self, image_size: int) -> model.ModelConfig:
        keys = {f.name for f in fields(model.ModelConfig)}
        kw = {k: v for k, v in vars(self).items() if k in keys}
        return model.ModelConfig(image_size=image_size, **kw)

    @property
    def policy(self) -> metrics.EmptyPolicy:
        return metrics.EmptyPolicy.parse(self.empty_policy)


CONFIG_HELP = "\n".join(f"  {f.name} (default {f.default!r})" for f in fields(RunConfig))


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    types = {f.name: f.type for f in fields(RunConfig)}
    casts = {"int": int, "float": float, "str": str}
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep or not key:
            raise UsageError(f"{source}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        if key not in types:
            raise UsageError(f"{source}:{lineno}: unknown key {key!r}; known keys: {', '.join(types)}")
        try:
            values[key] = casts[types[key]](value)
        except ValueError:
            raise UsageError(f"{source}:{lineno}: {key} expects {types[key]}, got {value!r}") from None
    cfg = RunConfig(**values)
    try:
        cfg.policy
    except ValueError as exc:
        raise UsageError(f"{source}: {exc}") from None
    return cfg


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise UsageError(f"config file {path} not found")
    return parse_config(path.read_text(), str(path))


def _setup(run: RunConfig):
    data = synthdata.load_dataset(run.dataset_dir)
    try:
        cfg = run.model_config(data.spec.size)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    return data, cfg


def _test_indices(data, cfg) -> np.ndarray:
    return synthdata.split_folds(data, cfg.folds, cfg.seed)[1]


def _checkpoint_paths(run: RunConfig, explicit) -> list[Path]:
    if explicit:
        paths = [Path(p) for p in explicit]
    else:
        paths = sorted(Path(run.out_dir).glob("fold*.ckpt"), key=lambda p: int(p.stem[4:]))
    if not paths:
        raise FileNotFoundError(f"no checkpoints found in {run.out_dir}")
    return paths


def _load_checkpoint(path, data):
    params, cfg = model.load_checkpoint(path)
    if cfg.image_size != data.spec.size:
        raise synthdata.ShapeMismatchError(
            f"checkpoint {path} expects {cfg.image_size}px images, dataset has {data.spec.size}px")
    return params, cfg


# -- commands -----------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    overrides = {"seed": args.seed}
    for flag, key in [("num_examples", "num_examples"), ("size", "size"),
                      ("annotators", "num_annotators"), ("jitter", "boundary_jitter"),
                      ("absence_prob", "absence_prob"), ("ambiguous_fraction", "ambiguous_fraction"),
                      ("noise", "noise_level")]:
        val = getattr(args, flag)
        if val is not None:
            overrides[key] = val
    try:
        spec = synthdata.preset(args.preset, **overrides)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    d = synthdata.generate_dataset(spec)
    out = synthdata.save_dataset(d, args.out)
    amb = int(d.ambiguous.sum()) if len(d) else 0
    print(f"wrote {len(d)} examples ({spec.size}x{spec.size}, {spec.num_annotators} annotators, "
          f"{amb} ambiguous) to {out}")
    return EXIT_OK


def _write_history(path: Path, history) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(model.HISTORY_COLUMNS)
        for row in history:
            w.writerow([repr(row[c]) if isinstance(row[c], float) else row[c]
                        for c in model.HISTORY_COLUMNS])


def cmd_train(args) -> int:
    run = load_config(args.config)
    data, cfg = _setup(run)
    out = Path(run.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    splits, test = synthdata.split_folds(data, cfg.folds, cfg.seed)
    for k, (tr, va) in enumerate(splits):
        res = model.train_fold(data.subset(tr), data.subset(va), cfg, fold=k)
        model.save_checkpoint(out / f"fold{k}.ckpt", res.params, cfg)
        _write_history(out / f"fold{k}_history.csv", res.history)
        print(f"fold {k}: {len(res.history)} epochs, best epoch {res.best_epoch}, "
              f"val loss {res.history[res.best_epoch - 1]['val_loss']:.4f}")
    split_info = {"test": [int(i) for i in test],
                  "folds": [{"train": [int(i) for i in tr], "val": [int(i) for i in va]}
                            for tr, va in splits]}
    (out / "split.json").write_text(json.dumps(split_info, sort_keys=True) + "\n")
    return EXIT_OK


def _evaluate_run(run: RunConfig, checkpoints, iou_mode: str) -> dict:
    data, cfg = _setup(run)
    a = data.spec.num_annotators
    if iou_mode == "average" and a != 1:
        raise UsageError(f"average IoU needs single-annotator data; dataset has {a} annotators")
    if iou_mode == "hungarian" and a == 1:
        logger.info("hungarian IoU on single-annotator data")
    test = _test_indices(data, cfg)
    per_fold = []
    for k, path in enumerate(_checkpoint_paths(run, checkpoints)):
        params, ckpt_cfg = _load_checkpoint(path, data)
        # evaluation settings come from the run config, weights from the checkpoint
        ckpt_cfg.eval_samples = cfg.eval_samples
        rng = np.random.default_rng([cfg.seed, k, 1])
        try:
            per_fold.append(model.evaluate(params, ckpt_cfg, data, test, rng, iou_mode))
        except ValueError as exc:
            raise UsageError(str(exc)) from None
    return model.summarize_folds(per_fold)


def cmd_eval(args) -> int:
    runs = [load_config(p) for p in args.config]
    if args.checkpoints and len(runs) > 1:
        raise UsageError("--checkpoints can only be combined with a single --config")
    results = {}
    for path, run in zip(args.config, runs):
        results[Path(path).stem] = _evaluate_run(run, args.checkpoints, args.iou)
    report = next(iter(results.values())) if len(results) == 1 else {"runs": results}
    text = json.dumps(report, indent=2, sort_keys=True) + "\n"
    out = Path(args.out) if args.out else Path(runs[0].out_dir) / "metrics.json"
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(text)
    sys.stdout.write(text)
    return EXIT_OK


def write_pgm(path, values: np.ndarray) -> None:
    """Binary 8-bit PGM of ``values`` in [0, 1]."""
    img = np.clip(np.round(255.0 * np.asarray(values, dtype=np.float64)), 0, 255).astype(np.uint8)
    h, w = img.shape
    Path(path).write_bytes(b"P5\n%d %d\n255\n" % (w, h) + img.tobytes())


def cmd_sample(args) -> int:
    run = load_config(args.config)
    data, _ = _setup(run)
    if not 0 <= args.index < len(data):
        raise UsageError(f"--index {args.index} out of range for {len(data)} examples")
    if args.n < 2:
        raise UsageError("--n must be at least 2 for mean/std maps")
    ckpt = _checkpoint_paths(run, [args.checkpoint] if args.checkpoint else None)[0]
    params, cfg = _load_checkpoint(ckpt, data)
    rng = np.random.default_rng([run.seed, args.index, 2])
    probs = model.sample_probabilities(params, cfg, data[args.index].image, args.n, rng)
    shape = (cfg.image_size, cfg.image_size)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_pgm(out / "mean.pgm", probs.mean(axis=0).reshape(shape))
    write_pgm(out / "std.pgm", 2.0 * probs.std(axis=0).reshape(shape))
    (out / "samples.u8").write_bytes((probs > 0.5).astype(np.uint8).tobytes())
    print(f"wrote mean.pgm, std.pgm and {args.n} samples to {out}")
    return EXIT_OK


def ged_curve_rows(params, cfg, data, indices, sizes, repeats, rng, policy) -> list[dict]:
    """Test-set GED per sample size; spread is over repeated test-set evaluations."""
    per_example = []
    for i in indices:
        ex = data[int(i)]
        sampler = lambda n, r, x=ex.image: model.predict_samples(params, cfg, x, n, r)
        per_example.append(metrics.ged_curve(ex.masks, sampler, sizes, repeats, rng, policy))
    rows = []
    for j, n in enumerate(sizes):
        vals = np.mean([curve[j]["values"] for curve in per_example], axis=0)
        rows.append({"size": int(n), "mean": float(vals.mean()), "std": float(vals.std())})
    return rows


def cmd_ged_curve(args) -> int:
    run = load_config(args.config)
    data, _ = _setup(run)
    try:
        sizes = [int(s) for s in args.sizes.split(",")]
    except ValueError:
        raise UsageError(f"--sizes expects comma-separated integers, got {args.sizes!r}") from None
    if any(s < 2 for s in sizes):
        raise UsageError("every sample size must be at least 2")
    ckpt = _checkpoint_paths(run, [args.checkpoint] if args.checkpoint else None)[0]
    params, cfg = _load_checkpoint(ckpt, data)
    test = _test_indices(data, run.model_config(data.spec.size))
    rows = ged_curve_rows(params, cfg, data, test, sizes, args.repeats,
                          np.random.default_rng([run.seed, 3]), run.policy)
    out = Path(args.out) if args.out else Path(run.out_dir) / "ged_curve.csv"
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["size", "mean", "std"])
        for r in rows:
            w.writerow([r["size"], repr(r["mean"]), repr(r["std"])])
    print(f"wrote {len(rows)} rows to {out}")
    return EXIT_OK


def cmd_prior_variance(args) -> int:
    run = load_config(args.config)
    data, _ = _setup(run)
    ckpt = _checkpoint_paths(run, [args.checkpoint] if args.checkpoint else None)[0]
    params, cfg = _load_checkpoint(ckpt, data)
    test = _test_indices(data, run.model_config(data.spec.size))
    scores = model.prior_variance_score(params, cfg, data.images[test])
    order = sorted(range(len(test)), key=lambda j: (-scores[j], test[j]))
    out = Path(args.out) if args.out else Path(run.out_dir) / "prior_variance.csv"
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["example_index", "mu_lv"])
        for j in order:
            w.writerow([int(test[j]), repr(float(scores[j]))])
    print(f"wrote {len(test)} rows to {out}")
    return EXIT_OK


# -- argument parsing -------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="flowseg", description="Probabilistic segmentation with flow posteriors.",
                formatter_class=argparse.RawDescriptionHelpFormatter,
                epilog="config files hold 'key = value' lines ('#' comments); keys:\n" + CONFIG_HELP)
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="generate a synthetic dataset directory")
    g.add_argument("--preset", default="lidc-like", choices=sorted(synthdata.PRESETS),
                   help="dataset preset (default lidc-like)")
    g.add_argument("--seed", type=int, default=0, help="generator seed (default 0)")
    g.add_argument("--out", required=True, help="output directory")
    g.add_argument("--num-examples", type=int, help="override the number of examples")
    g.add_argument("--size", type=int, help="override the image side in pixels")
    g.add_argument("--annotators", type=int, help="override the number of annotators")
    g.add_argument("--jitter", type=float, help="override the boundary jitter (pixels)")
    g.add_argument("--absence-prob", type=float, help="override the absence probability")
    g.add_argument("--ambiguous-fraction", type=float, help="override the ambiguous fraction")
    g.add_argument("--noise", type=float, help="override the background noise level")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="cross-validated training; writes fold checkpoints")
    t.add_argument("--config", required=True, help="run config file")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="test-set GED and IoU as JSON")
    e.add_argument("--config", required=True, action="append",
                   help="run config file; repeat to compare runs")
    e.add_argument("--checkpoints", nargs="+", help="checkpoint files (default: out_dir/fold*.ckpt)")
    e.add_argument("--iou", default="auto", choices=["auto", "hungarian", "average"],
                   help="IoU variant (default: hungarian for several annotators, else average)")
    e.add_argument("--out", help="metrics JSON path (default: out_dir/metrics.json)")
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("sample", help="mean/std PGM maps and raw sample masks for one example")
    s.add_argument("--config", required=True, help="run config file")
    s.add_argument("--checkpoint", help="checkpoint file (default: first fold)")
    s.add_argument("--index", type=int, required=True, help="dataset example index")
    s.add_argument("--n", type=int, default=16, help="number of samples (default 16)")
    s.add_argument("--out-dir", required=True, help="directory for mean.pgm, std.pgm, samples.u8")
    s.set_defaults(func=cmd_sample)

    c = sub.add_parser("ged-curve", help="GED mean/std against the number of samples")
    c.add_argument("--config", required=True, help="run config file")
    c.add_argument("--checkpoint", help="checkpoint file (default: first fold)")
    c.add_argument("--sizes", default="2,4,8,16", help="comma-separated sample counts")
    c.add_argument("--repeats", type=int, default=50, help="evaluations per size (default 50)")
    c.add_argument("--out", help="CSV path (default: out_dir/ged_curve.csv)")
    c.set_defaults(func=cmd_ged_curve)

    v = sub.add_parser("prior-variance", help="mean prior variance per test example as CSV")
    v.add_argument("--config", required=True, help="run config file")
    v.add_argument("--checkpoint", help="checkpoint file (default: first fold)")
    v.add_argument("--out", help="CSV path (default: out_dir/prior_variance.csv)")
    v.set_defaults(func=cmd_prior_variance)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"flowseg: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except model.DivergenceError as exc:
        print(f"flowseg: diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (synthdata.DatasetFormatError, model.CheckpointError, OSError, ValueError) as exc:
        print(f"flowseg: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
