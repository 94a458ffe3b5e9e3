"""Command-line entry point.

Five subcommands cover the operator surface: `gen-data` writes a synthetic
dataset, `train` runs one strategy into a run directory, `eval` scores
checkpoints with the linear probe, `grad-check` runs the gradient
verification suites, and `preview` renders transformed images next to their
originals.

Every command is deterministic given its flags and seeds.  `train` accepts
`--config path` holding key=value lines (the same format config.txt is
written in, so a snapshot reproduces its run); explicit flags override file
values, which override the strategy defaults.

Exit codes: 0 success, 1 validation error (bad flags or values), 2 runtime
or file error, 3 gradient-suite failure.
"""

from __future__ import annotations

import argparse
import glob
import os
import re
import sys

import numpy as np

from .evaluator import encoder_from_checkpoint, extract_features, linear_eval
from .gradcheck import (
    TRANSFORM_NAMES,
    check_compose,
    check_end_to_end,
    check_transform,
    format_report,
    run_all,
)
from .models import (
    CheckpointError,
    CheckpointIOError,
    TransformNet,
    load_checkpoint,
    restore_stores,
)
from .synthdata import (
    DatasetError,
    DatasetIOError,
    SyntheticSpec,
    generate,
    load_dataset,
    save_dataset,
    write_pgm,
)
from .tensor import Rng, Tensor, no_grad
from .trainer import STRATEGIES, TrainConfig, sample_random_params, train
from .transforms import (
    DEFAULT_ORDER,
    PARAM_COLUMNS,
    CompositionOrder,
    NoiseRealization,
    TransformParams,
    compose,
)

__all__ = ["main"]


class _Parser(argparse.ArgumentParser):
    """argparse exits with 2 on bad flags; here that is a validation error."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _parse_bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes"):
        return True
    if t in ("0", "false", "no"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


def _int_tuple(text: str) -> tuple:
    return tuple(int(p) for p in text.split(","))


# How config-file strings coerce onto TrainConfig fields.
_CONFIG_FIELDS = {
    "strategy": str,
    "alpha0": float, "alpha1": float, "alpha2": float, "alpha3": float, "alpha4": float,
    "lr_f": float, "lr_m": float,
    "batch_size": int, "epochs": int, "seed": int, "checkpoint_every": int,
    "order": CompositionOrder.parse,
    "supervision_fraction": float, "label_fraction": float,
    "tau": float, "use_cosine": _parse_bool, "dtype": str,
    "encoder_widths": _int_tuple, "tnet_widths": _int_tuple,
    "head_hidden": int, "head_out": int,
}


def _read_config(path) -> dict:
    """key=value lines; blank lines and # comments ignored."""
    out = {}
    with open(path) as fh:
        for no, raw in enumerate(fh, 1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{no}: expected key=value, got {line!r}")
            key, val = (p.strip() for p in line.split("=", 1))
            if key not in _CONFIG_FIELDS:
                raise ValueError(f"{path}:{no}: unknown key {key!r}")
            try:
                out[key] = _CONFIG_FIELDS[key](val)
            except ValueError as e:
                raise ValueError(f"{path}:{no}: bad value for {key}: {e}") from e
    return out


def _strategy_name(text: str) -> str:
    name = text.replace("-", "_")
    if name not in STRATEGIES:
        raise ValueError(f"unknown strategy {text!r}, expected one of "
                         + ", ".join(s.replace("_", "-") for s in STRATEGIES))
    return name


# -- gen-data -----------------------------------------------------------------


def cmd_gen_data(args) -> int:
    spec = SyntheticSpec(n_images=args.n, size=args.size, seed=args.seed,
                         positive_fraction=args.positive_fraction)
    ds = generate(spec)
    save_dataset(ds, args.out)
    print(f"wrote {args.out}: {len(ds)} images of {args.size}x{args.size}, "
          f"{int(ds.labels.sum())} positive")
    return 0


# -- train --------------------------------------------------------------------


_TRAIN_FLAG_FIELDS = tuple(k for k in _CONFIG_FIELDS if k != "strategy")


def cmd_train(args) -> int:
    merged = {}
    if args.config:
        merged.update(_read_config(args.config))
    for field in _TRAIN_FLAG_FIELDS:
        v = getattr(args, field)
        if v is not None:
            merged[field] = v
    strategy = merged.pop("strategy", None)
    if args.strategy is not None:
        strategy = _strategy_name(args.strategy)
    if strategy is None:
        raise ValueError("no strategy given: pass --strategy or a --config that names one")

    ds = load_dataset(args.data)
    cfg = TrainConfig.for_strategy(strategy, **merged)
    res = train(cfg, ds.images, ds.labels, args.out, groups=ds.groups,
                log=lambda msg: print(msg, flush=True))
    print(f"run complete: {res.n_batches} batches, "
          f"{len(res.checkpoints)} checkpoints in {res.out_dir}")
    return 0


# -- eval ---------------------------------------------------------------------


def _epoch_of(path, ordinal: int) -> int:
    m = re.search(r"ep(\d+)\.augd$", os.path.basename(os.fspath(path)))
    return int(m.group(1)) if m else ordinal


def cmd_eval(args) -> int:
    ckpts = list(args.ckpt)
    if args.run:
        ckpts.extend(sorted(glob.glob(os.path.join(args.run, "ckpt_ep*.augd"))))
    if not ckpts:
        raise ValueError("no checkpoints: pass --ckpt files or a --run directory")
    ds = load_dataset(args.data)
    rows = ["epoch,auc_mean,auc_std"]
    for i, ck in enumerate(ckpts):
        enc = encoder_from_checkpoint(ck)
        feats = extract_features(enc, ds.images)
        rep = linear_eval(feats, ds.labels, Rng(args.seed, stream=7))
        row = rep.csv_row(_epoch_of(ck, i))
        rows.append(row)
        print(f"{ck}: auc {rep.auc_mean:.4f} +- {rep.auc_std:.4f}")
    report_path = args.out
    if args.run:
        metrics = os.path.join(args.run, "metrics.csv")
        if os.path.exists(metrics):  # append-only eval rows after the batch rows
            with open(metrics, "a") as fh:
                fh.write("\n".join(rows[1:]) + "\n")
        if report_path is None:
            report_path = os.path.join(args.run, "eval_report.csv")
    if report_path:
        with open(report_path, "w") as fh:
            fh.write("\n".join(rows) + "\n")
        print(f"wrote {report_path}")
    return 0


# -- grad-check ---------------------------------------------------------------


def cmd_grad_check(args) -> int:
    if args.transform:
        name = args.transform
        if name == "compose":
            reports = [check_compose(seed=args.seed, draws=args.draws, h=args.h, tol=args.tol)]
        elif name == "end-to-end":
            reports = [check_end_to_end(seed=args.seed)]
        else:
            reports = [check_transform(name, seed=args.seed, draws=args.draws,
                                       h=args.h, tol=args.tol)]
    else:
        reports = run_all(seed=args.seed, draws=args.draws, h=args.h, tol=args.tol)
    ok = True
    for r in reports:
        print(format_report(r))
        ok = ok and r.passed
    print("all suites passed" if ok else "FAILED", flush=True)
    return 0 if ok else 3


# -- preview ------------------------------------------------------------------


def _transform_net_from_checkpoint(path) -> TransformNet:
    entries = load_checkpoint(path)
    widths = []
    while f"tnet.block{len(widths) + 1}.conv.w" in entries:
        widths.append(entries[f"tnet.block{len(widths) + 1}.conv.w"].shape[0])
    if not widths:
        raise ValueError(f"{path} holds no transform-network tensors")
    in_ch = entries["tnet.block1.conv.w"].shape[1]
    n_out = entries["tnet.head.w"].shape[0]
    net = TransformNet(in_channels=in_ch, widths=tuple(widths), n_out=n_out, dtype=np.float64)
    restore_stores(entries, {"tnet": net.store})
    return net


def _preview_params(spec: str, batch: int, rng: Rng) -> TransformParams:
    if spec == "random":
        return sample_random_params(rng, batch, np.float64)
    if spec == "neutral":
        return TransformParams.neutral(batch)
    vals = [float(p) for p in spec.split(",")]
    if len(vals) != len(PARAM_COLUMNS):
        raise ValueError(f"--lambdas needs 'random', 'neutral', or {len(PARAM_COLUMNS)} "
                         f"comma-separated values, got {spec!r}")
    m = np.tile(np.array(vals, dtype=np.float64), (batch, 1))
    return TransformParams.from_matrix(Tensor(m))


def _lambda_row(params: TransformParams, source: str, index: int, row: int) -> str:
    vals = [f"{getattr(params, c).data[row]:.9g}" for c in PARAM_COLUMNS]
    return ",".join([source, str(index)] + vals)


def cmd_preview(args) -> int:
    ds = load_dataset(args.data)
    indices = args.index if args.index else list(range(min(4, len(ds))))
    for i in indices:
        if not (0 <= i < len(ds)):
            raise ValueError(f"index {i} outside dataset of {len(ds)} images")
    os.makedirs(args.out, exist_ok=True)
    x = ds.images[indices].astype(np.float64)
    B = x.shape[0]
    rng = Rng(args.seed, stream=11)
    order = CompositionOrder.parse(args.order) if args.order else DEFAULT_ORDER

    rows = ["source,index," + ",".join(PARAM_COLUMNS)]
    params = _preview_params(args.lambdas, B, rng)
    noise = NoiseRealization.draw(rng, x.shape, np.float64)
    with no_grad():
        out = compose(Tensor(x), params, noise, order).data
    for r, i in enumerate(indices):
        write_pgm(x[r, 0], os.path.join(args.out, f"orig_{i:04d}.pgm"))
        write_pgm(out[r, 0], os.path.join(args.out, f"aug_{i:04d}.pgm"))
        rows.append(_lambda_row(params, "lambda", i, r))

    if args.ckpt:
        tnet = _transform_net_from_checkpoint(args.ckpt)
        noise_m = NoiseRealization.draw(rng, x.shape, np.float64)
        with no_grad():
            strengths = tnet.forward(Tensor(x))
            params_m = TransformParams.from_matrix(Tensor(strengths.data))
            out_m = compose(Tensor(x), params_m, noise_m, order).data
        for r, i in enumerate(indices):
            write_pgm(out_m[r, 0], os.path.join(args.out, f"mnet_{i:04d}.pgm"))
            rows.append(_lambda_row(params_m, "mnet", i, r))

    csv_path = os.path.join(args.out, "lambdas.csv")
    with open(csv_path, "w") as fh:
        fh.write("\n".join(rows) + "\n")
    print(f"wrote {2 * B + (B if args.ckpt else 0)} images and {csv_path}")
    return 0


# -- wiring -------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="augopt",
                     description="Learned augmentation strengths for contrastive training.")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("gen-data", help="write a synthetic dataset")
    p.add_argument("--out", required=True, help="output pixel file; labels go to a sibling .csv")
    p.add_argument("--n", type=int, default=2000, help="number of images")
    p.add_argument("--size", type=int, default=32, help="image side, multiple of 16")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--positive-fraction", type=float, default=0.5)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train one strategy into a run directory")
    p.add_argument("--data", required=True, help="dataset pixel file")
    p.add_argument("--out", required=True, help="run directory")
    p.add_argument("--strategy",
                   help="one of " + ", ".join(s.replace("_", "-") for s in STRATEGIES))
    p.add_argument("--config", help="key=value file; explicit flags override it")
    for field, typ in _CONFIG_FIELDS.items():
        if field == "strategy":
            continue
        flag = "--" + field.replace("_", "-")
        p.add_argument(flag, type=typ, default=None, dest=field)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score checkpoints with the linear probe")
    p.add_argument("--data", required=True, help="evaluation dataset pixel file")
    p.add_argument("--ckpt", action="append", default=[], help="checkpoint file (repeatable)")
    p.add_argument("--run", help="run directory; evaluates every ckpt_ep*.augd in it")
    p.add_argument("--out", help="write epoch,auc_mean,auc_std rows here")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("grad-check", help="run the gradient verification suites")
    p.add_argument("--transform", choices=TRANSFORM_NAMES + ("compose", "end-to-end"),
                   help="run a single suite instead of all of them")
    p.add_argument("--h", type=float, default=1e-4, help="finite-difference step")
    p.add_argument("--tol", type=float, default=1e-4, help="max relative error allowed")
    p.add_argument("--draws", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_grad_check)

    p = sub.add_parser("preview", help="render original and transformed image pairs")
    p.add_argument("--data", required=True, help="dataset pixel file")
    p.add_argument("--out", required=True, help="directory for PGM files and lambdas.csv")
    p.add_argument("--index", type=int, action="append",
                   help="image index (repeatable; default first four)")
    p.add_argument("--lambdas", default="random",
                   help="'random', 'neutral', or seven comma-separated strengths")
    p.add_argument("--ckpt", help="checkpoint whose transform network also previews")
    p.add_argument("--order", help="comma-separated composition order")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_preview)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if not hasattr(args, "func"):
        parser.print_usage(sys.stderr)
        return 1
    try:
        return args.func(args)
    except (DatasetIOError, CheckpointIOError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (DatasetError, CheckpointError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
