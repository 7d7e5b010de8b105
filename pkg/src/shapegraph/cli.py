"""Command-line front end: ``shapegraph <command> [flags]``.

Every command validates its flags into a RunConfig before touching data,
writes only inside ``--out``, and embeds the RunConfig (and its hash) in
each file it produces. Exit codes: 0 ok, 2 usage, 3 data error, 4 numeric
failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dataio import DataError, LabeledDataset, TransformSpec, read_idx, read_manifest_dir, synthetic_shapes
from .dgcnn import ArchMismatch, DgcnnModel, ModelConfig, embed, load_model
from .dgcnn import KTooLarge as GraphKTooLarge
from .evalret import (
    KTooLarge,
    RetrievalIndex,
    invariance_suite,
    map_at_k,
    standard_transform_specs,
    ssim_retrieval_map,
    svg_line_chart,
    write_embeddings_csv,
    write_report,
)
from .sampler import SamplerConfig, read_cloud_cache, sample_dataset, write_cloud_cache
from .tensorcore import NonFinite
from .train import NonFiniteLoss, TrainConfig, evaluate, train

log = logging.getLogger("shapegraph")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
SWEEP_S = (5, 10, 15, 20, 25, 30, 35)


class UsageError(ValueError):
    pass


def default_seed() -> int:
    env = os.environ.get("SHAPEGRAPH_SEED")
    if env is None:
        return 0
    try:
        return int(env)
    except ValueError:
        raise UsageError(f"SHAPEGRAPH_SEED must be an integer, got {env!r}") from None


# --------------------------------------------------------------------------
# run configuration

def _file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()[:16]


@dataclass
class RunConfig:
    """Validated flags of one command invocation.

    Input files are recorded by name and content digest, and ``--out`` and
    ``--jobs`` are left out, so the same computation on the same data hashes
    identically wherever it runs and however many workers it uses.
    """

    command: str
    params: dict
    inputs: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        return {"command": self.command, "params": self.params, "inputs": self.inputs}

    @property
    def hash(self) -> str:
        blob = json.dumps(self.as_dict(), sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def meta(self) -> dict:
        return {"config_hash": self.hash, "run_config": self.as_dict()}

    def header(self, **extra) -> dict:
        h = {"config_hash": self.hash, "run_config": json.dumps(self.as_dict(), sort_keys=True)}
        h.update(extra)
        return h


_INPUT_FLAGS = ("images", "labels", "manifest", "cache", "test_cache", "checkpoint")
_UNHASHED = ("out", "jobs", "config", "func", "verbose") + _INPUT_FLAGS


def build_run_config(args: argparse.Namespace) -> RunConfig:
    params = {k: v for k, v in sorted(vars(args).items()) if k not in _UNHASHED}
    inputs = {}
    for key in _INPUT_FLAGS:
        path = getattr(args, key, None)
        if path is not None:
            if not Path(path).is_file():
                raise DataError(f"--{key.replace('_', '-')}: no such file {path}")
            inputs[key] = {"name": Path(path).name, "sha256": _file_digest(path)}
    return RunConfig(args.command, params, inputs)


def _parse_range(text: str | None, n: int) -> range:
    if text is None:
        return range(n)
    lo, _, hi = text.partition(":")
    try:
        r = range(int(lo or 0), int(hi) if hi else n)
    except ValueError:
        raise UsageError(f"bad range {text!r}, expected START:END") from None
    if r.start < 0 or r.stop > n or r.start >= r.stop:
        raise DataError(f"range {text} outside the dataset of {n} items")
    return r


def _int_list(text: str) -> list[int]:
    try:
        vals = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not vals:
        raise argparse.ArgumentTypeError("empty list")
    return vals


def _positive(kind):
    def conv(text):
        v = kind(text)
        if v <= 0:
            raise argparse.ArgumentTypeError(f"must be > 0, got {text}")
        return v

    return conv


# --------------------------------------------------------------------------
# shared pieces

def load_dataset(args, which: str = "range") -> LabeledDataset:
    sources = [args.images is not None, args.manifest is not None, args.synthetic is not None]
    if sum(sources) != 1:
        raise UsageError("give exactly one of --idx-images/--idx-labels, --manifest, --synthetic")
    if args.images is not None:
        if args.labels is None:
            raise UsageError("--idx-images needs --idx-labels")
        ds = read_idx(args.images, args.labels)
    elif args.manifest is not None:
        ds = read_manifest_dir(args.manifest)
    else:
        ds = synthetic_shapes(args.synthetic, size=args.synthetic_size, seed=args.synthetic_seed)
    return ds.subset(_parse_range(getattr(args, which), len(ds)))


def sampler_config(args) -> SamplerConfig:
    s = getattr(args, "s", None) or 20
    return SamplerConfig(s=s, batch_size=args.kmeans_batch, iters=args.kmeans_iters, seed=args.kmeans_seed)


def model_config(args, num_classes: int, s: int) -> ModelConfig:
    k = args.knn
    if k >= s:
        raise UsageError(f"--knn {k} must be smaller than the cloud size {s}")
    return ModelConfig(num_classes=num_classes, k=k)


def train_config(args) -> TrainConfig:
    return TrainConfig(
        batch_size=args.batch_size, epochs=args.epochs, lr_max=args.lr_max, lr_min=args.lr_min,
        restart_period_epochs=args.restart_period, restart_mult=args.restart_mult, seed=args.seed,
        val_fraction=args.val_fraction,
    )


def out_path(args, name: str) -> Path:
    if Path(name).name != name:
        raise UsageError(f"output name {name!r} must be a plain file name")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out / name


def _num_classes(labels: np.ndarray, hint: int | None) -> int:
    return hint if hint is not None else int(labels.max()) + 1


# --------------------------------------------------------------------------
# commands

def cmd_sample(args, rc: RunConfig) -> int:
    ds = load_dataset(args)
    clouds = sample_dataset(ds, sampler_config(args), jobs=args.jobs)
    path = out_path(args, args.name)
    write_cloud_cache(path, clouds, ds.labels, meta=rc.meta())
    counts = np.bincount(ds.labels, minlength=ds.class_count)
    print(f"wrote {len(ds)} clouds of {args.s} points to {path}")
    for c, n in enumerate(counts):
        print(f"class {c}: {n}")
    return EXIT_OK


def cmd_train(args, rc: RunConfig) -> int:
    clouds, labels = read_cloud_cache(args.cache)
    test = read_cloud_cache(args.test_cache) if args.test_cache else None
    n_cls = _num_classes(np.concatenate([labels] + ([test[1]] if test else [])), args.num_classes)
    model = DgcnnModel.init(model_config(args, n_cls, clouds.shape[1]), seed=args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    model, report = train(model, clouds, labels, train_config(args), out_dir=out, resume=args.resume,
                          test=test, meta=rc.meta())
    extra = {} if report.test_acc is None else {"test_acc": f"{report.test_acc:.6f}"}
    report.write_csv(out_path(args, "train_report.csv"), header=rc.header(best_epoch=report.best_epoch, **extra))
    if report.test_acc is not None:
        print(f"test_acc {report.test_acc:.6f}")
    return EXIT_OK


def cmd_eval(args, rc: RunConfig) -> int:
    model = load_model(args.checkpoint)
    clouds, labels = read_cloud_cache(args.cache)
    acc = evaluate(model, clouds, labels)
    write_report(out_path(args, "eval.csv"), rc.header(), ["n", "accuracy"], [(len(labels), acc)])
    print(f"accuracy {acc:.6f}")
    return EXIT_OK


def _map_outputs(args, rc: RunConfig, report, name: str, series: str) -> None:
    rows = [(k, report.map_at[k]) for k in args.k]
    write_report(out_path(args, f"{name}.csv"), rc.header(k=",".join(map(str, args.k))), ["k", "map"], rows)
    if args.svg:
        svg_line_chart(out_path(args, f"{name}.svg"), {series: rows})
    for k, v in rows:
        print(f"MAP@{k} {v:.6f}")


def cmd_retrieve(args, rc: RunConfig) -> int:
    model = load_model(args.checkpoint)
    clouds, labels = read_cloud_cache(args.cache)
    index = RetrievalIndex(embed(model, clouds), labels)
    _map_outputs(args, rc, map_at_k(index, None, args.k), "retrieval", "embedding")
    if args.export_embeddings:
        write_embeddings_csv(out_path(args, "embeddings.csv"), index)
    return EXIT_OK


def cmd_ssim_baseline(args, rc: RunConfig) -> int:
    ds = load_dataset(args)
    report = ssim_retrieval_map(ds.images, ds.labels, args.k)
    _map_outputs(args, rc, report, "ssim_retrieval", "ssim")
    return EXIT_OK


def cmd_invariance(args, rc: RunConfig) -> int:
    model = load_model(args.checkpoint)
    ds = load_dataset(args)
    specs = standard_transform_specs(args.seed) + [
        TransformSpec(scale_lo=0.5, scale_hi=1.0, rng_seed=args.seed, name="scale[0.5,1]")
    ]
    rows = invariance_suite(model, ds.images, ds.labels, specs, sampler_config(args))
    table = [(r.name, r.n, r.excluded, r.clean_acc, r.acc, r.delta) for r in rows]
    write_report(out_path(args, "invariance.csv"), rc.header(), ["transform", "n", "excluded", "clean_acc", "acc", "delta"], table)
    for r in rows:
        print(f"{r.name}: acc {r.acc:.4f} clean {r.clean_acc:.4f} delta {r.delta:+.4f} (n={r.n})")
    return EXIT_OK


def sparsity_sweep(train_ds: LabeledDataset, test_ds: LabeledDataset, s_values, knn: int,
                   sampler: SamplerConfig, tcfg: TrainConfig, jobs: int = 1, out_dir=None, meta=None) -> list[tuple]:
    """Train and test one model per cloud size; returns rows (S, k, test_acc).

    The neighbour count is capped at S - 1 so that the smallest clouds still
    have a valid graph.
    """
    rows = []
    for s in s_values:
        cfg = SamplerConfig(s=s, batch_size=sampler.batch_size, iters=sampler.iters, seed=sampler.seed)
        xtr = sample_dataset(train_ds, cfg, jobs)
        xte = sample_dataset(test_ds, cfg, jobs)
        k = min(knn, s - 1)
        model = DgcnnModel.init(ModelConfig(num_classes=train_ds.class_count, k=k), seed=tcfg.seed)
        model, _ = train(model, xtr, train_ds.labels, tcfg)
        acc = evaluate(model, xte, test_ds.labels)
        log.info("S=%d k=%d test acc %.4f", s, k, acc)
        rows.append((s, k, acc))
        if out_dir is not None:
            write_cloud_cache(Path(out_dir) / f"test_S{s}.spc", xte, test_ds.labels, meta=meta)
    return rows


def cmd_sparsity_sweep(args, rc: RunConfig) -> int:
    train_ds = load_dataset(args, "train_range")
    test_ds = load_dataset(args, "test_range")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = sparsity_sweep(train_ds, test_ds, args.s_values, args.knn, sampler_config(args), train_config(args),
                          args.jobs, out_dir=out, meta=rc.meta())
    write_report(out_path(args, "sparsity.csv"), rc.header(), ["s", "k", "test_acc"], rows)
    if args.svg:
        svg_line_chart(out_path(args, "sparsity.svg"), {"test accuracy": [(s, a) for s, _, a in rows]},
                       xlabel="points per cloud", ylabel="accuracy")
    for s, k, a in rows:
        print(f"S={s} k={k} test_acc {a:.4f}")
    return EXIT_OK


# --------------------------------------------------------------------------
# argument parsing

def _dataset_flags(p, ranges=("range",)):
    g = p.add_argument_group("dataset")
    g.add_argument("--idx-images", dest="images", help="IDX image file (.gz accepted)")
    g.add_argument("--idx-labels", dest="labels", help="IDX label file (.gz accepted)")
    g.add_argument("--manifest", help="CSV manifest with path,label columns")
    g.add_argument("--synthetic", type=_positive(int), metavar="N", help="generated line drawings, N per class")
    g.add_argument("--synthetic-size", type=_positive(int), default=64)
    g.add_argument("--synthetic-seed", type=int, default=0)
    for r in ranges:
        g.add_argument(f"--{r.replace('_', '-')}", dest=r, metavar="START:END", help="item subset")


def _sampler_flags(p, s_required=True):
    g = p.add_argument_group("sampling")
    if s_required:
        g.add_argument("--s", type=_positive(int), required=True, help="points per cloud")
    g.add_argument("--kmeans-iters", type=_positive(int), help="mini-batch iterations (default by S)")
    g.add_argument("--kmeans-batch", type=_positive(int), default=32)
    g.add_argument("--kmeans-seed", type=int, help="fixed k-means seed instead of the content-derived one")


def _train_flags(p):
    g = p.add_argument_group("training")
    g.add_argument("--knn", type=_positive(int), default=5, help="graph neighbours per point")
    g.add_argument("--epochs", type=int, default=30)
    g.add_argument("--batch-size", type=_positive(int), default=32)
    g.add_argument("--lr-max", type=_positive(float), default=0.1)
    g.add_argument("--lr-min", type=_positive(float), default=1e-3)
    g.add_argument("--restart-period", type=_positive(int), default=10, help="first SGDR cycle in epochs")
    g.add_argument("--restart-mult", type=_positive(int), default=2)
    g.add_argument("--val-fraction", type=float, default=0.1)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="shapegraph", description="Shape point clouds and graph CNN experiments.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def command(name, func, help_text):
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.set_defaults(func=func)
        p.add_argument("--out", required=True, help="output directory; nothing is written elsewhere")
        p.add_argument("--seed", type=int, default=None, help="global seed (default $SHAPEGRAPH_SEED or 0)")
        p.add_argument("--jobs", type=_positive(int), default=1, help="worker processes for sampling")
        p.add_argument("--config", help="file of key=value lines overriding flags")
        return p

    p = command("sample", cmd_sample, "Sample a dataset into an SPC1 cloud cache.")
    _dataset_flags(p)
    _sampler_flags(p)
    p.add_argument("--name", default="clouds.spc", help="cache file name inside --out")

    p = command("train", cmd_train, "Train a classifier on a cloud cache.")
    p.add_argument("--cache", required=True, help="training SPC1 cache")
    p.add_argument("--test-cache", help="held-out SPC1 cache scored after training")
    p.add_argument("--num-classes", type=_positive(int))
    p.add_argument("--resume", action="store_true", help="continue from the state in --out")
    _train_flags(p)

    p = command("eval", cmd_eval, "Accuracy of a checkpoint on a cloud cache.")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--cache", required=True)

    p = command("retrieve", cmd_retrieve, "MAP@k of embedding nearest neighbours on a cloud cache.")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--cache", required=True)
    p.add_argument("--k", type=_int_list, default=[10, 20, 30], help="comma-separated k values")
    p.add_argument("--svg", action="store_true", help="also draw MAP against k")
    p.add_argument("--export-embeddings", action="store_true")

    p = command("ssim-baseline", cmd_ssim_baseline, "MAP@k when ranking images by SSIM.")
    _dataset_flags(p)
    p.add_argument("--k", type=_int_list, default=[10, 20, 30])
    p.add_argument("--svg", action="store_true")

    p = command("invariance", cmd_invariance, "Accuracy under test-time image transformations.")
    p.add_argument("--checkpoint", required=True)
    _dataset_flags(p)
    _sampler_flags(p)

    p = command("sparsity-sweep", cmd_sparsity_sweep, "Test accuracy against points per cloud.")
    _dataset_flags(p, ranges=("train_range", "test_range"))
    _sampler_flags(p, s_required=False)
    _train_flags(p)
    p.add_argument("--s-values", type=_int_list, default=list(SWEEP_S))
    p.add_argument("--svg", action="store_true")
    return parser


def _apply_config_file(parser, argv: list[str], args) -> list[str]:
    """Append ``--key value`` tokens from a key=value file so they win over the command line."""
    sub = parser._subparsers._group_actions[0].choices[args.command]
    extra = []
    for n, line in enumerate(Path(args.config).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        flag = "--" + key.strip().replace("_", "-")
        action = sub._option_string_actions.get(flag)
        if not sep or action is None or flag in ("--config", "--out"):
            raise UsageError(f"{args.config}:{n}: unknown or disallowed key {key.strip()!r}")
        value = value.strip()
        if action.nargs == 0:
            if value.lower() in ("1", "true", "yes"):
                extra.append(flag)
        else:
            extra += [flag, value]
    return argv + extra


def parse_args(argv: list[str]) -> argparse.Namespace:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        if not Path(args.config).is_file():
            parser.error(f"--config: no such file {args.config}")
        try:
            args = parser.parse_args(_apply_config_file(parser, argv, args))
        except UsageError as exc:
            parser.error(str(exc))
    if args.seed is None:
        try:
            args.seed = default_seed()
        except UsageError as exc:
            parser.error(str(exc))
    return args


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    args = parse_args(argv)  # argparse exits with status 2 on bad usage
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        rc = build_run_config(args)
        return args.func(args, rc)
    except (UsageError, KTooLarge, GraphKTooLarge) as exc:
        print(f"shapegraph {args.command}: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, ArchMismatch, FileNotFoundError, IsADirectoryError) as exc:
        print(f"shapegraph {args.command}: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NonFiniteLoss, NonFinite, FloatingPointError) as exc:
        print(f"shapegraph {args.command}: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"shapegraph {args.command}: invalid setting: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
