"""Command-line entry point: ``illumnorm <command> [flags]``.

Configuration comes from an optional flat ``section.field = value`` text file
(``--config``), then ``--set section.field=value`` pairs, then the dedicated
flags.  Sections are ``gen``, ``arch``, ``train``, ``classifier`` and
``eval``; values are Python literals (``1e-4``, ``(16, 32)``, ``'tae'``) or
bare words.  Unknown keys are rejected.  Every command that writes output also
writes the fully resolved configuration next to it, and that file can be fed
back through ``--config`` to repeat the run.

Exit codes: 0 success, 1 usage or invalid configuration, 2 data error
(missing/corrupt files, mismatched index), 3 numeric failure.
"""

from __future__ import annotations

import argparse
import ast
import logging
import sys
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

import numpy as np

from .dataset import ManifestError, SamplingError, load_manifest, read_image, write_image
from .evaluation import (
    ALL_SETUPS,
    DEFAULT_SEEDS,
    ClassifierConfig,
    export_latents,
    image_grid,
    multi_seed_report,
)
from .latent_index import IndexMismatch, LatentIndex, build_index, embed_images, knn, nn_reconstruct_batch, reconstruct
from .model import ArchConfig, load_checkpoint
from .synthgen import GenConfig, generate_dataset
from .training import TrainConfig, TrainingDiverged, train

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


@dataclass(frozen=True)
class EvalOptions:
    seeds: tuple[int, ...] = DEFAULT_SEEDS
    setups: tuple[str, ...] = ALL_SETUPS
    jobs: int = 1

    def __post_init__(self):
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        object.__setattr__(self, "setups", tuple(self.setups))
        unknown = [s for s in self.setups if s not in ALL_SETUPS]
        if unknown:
            raise ValueError(f"unknown setups {unknown}; choose from {list(ALL_SETUPS)}")
        if not self.seeds:
            raise ValueError("at least one seed is required")
        if self.jobs < 1:
            raise ValueError("jobs must be >= 1")


SECTIONS = {"gen": GenConfig, "arch": ArchConfig, "train": TrainConfig, "classifier": ClassifierConfig, "eval": EvalOptions}


@dataclass(frozen=True)
class RunConfig:
    gen: GenConfig = GenConfig()
    arch: ArchConfig = ArchConfig()
    train: TrainConfig = TrainConfig()
    classifier: ClassifierConfig = ClassifierConfig()
    eval: EvalOptions = EvalOptions()

    def with_values(self, values: dict) -> "RunConfig":
        """Apply ``{"section.field": value}`` updates; unknown keys raise ``UsageError``."""
        grouped: dict[str, dict] = {}
        for key, value in values.items():
            section, _, name = key.partition(".")
            if section not in SECTIONS or name not in {f.name for f in fields(SECTIONS[section])}:
                raise UsageError(f"unknown config key {key!r}")
            grouped.setdefault(section, {})[name] = value
        updated = {}
        for section, kw in grouped.items():
            try:
                updated[section] = replace(getattr(self, section), **kw)
            except (TypeError, ValueError) as e:
                raise UsageError(f"invalid {section} config: {e}") from e
        return replace(self, **updated)

    def lines(self) -> list[str]:
        out = []
        for section in SECTIONS:
            for name, value in asdict(getattr(self, section)).items():
                out.append(f"{section}.{name} = {value!r}")
        return out

    def write(self, path) -> None:
        Path(path).write_text("\n".join(self.lines()) + "\n")


def parse_value(text: str):
    text = text.strip()
    try:
        return ast.literal_eval(text)
    except (ValueError, SyntaxError):
        return text


def read_config_file(path) -> dict:
    values = {}
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as e:
        raise UsageError(f"cannot read config file: {e}") from e
    for n, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{n}: expected 'key = value'")
        key, value = line.split("=", 1)
        values[key.strip()] = parse_value(value)
    return values


def resolve_config(args, flag_values: dict) -> RunConfig:
    values = {}
    if getattr(args, "config", None):
        values.update(read_config_file(args.config))
    for pair in getattr(args, "set", None) or []:
        if "=" not in pair:
            raise UsageError(f"--set expects key=value, got {pair!r}")
        key, value = pair.split("=", 1)
        values[key.strip()] = parse_value(value)
    values.update({k: v for k, v in flag_values.items() if v is not None})
    return RunConfig().with_values(values)


# -- commands --------------------------------------------------------------


def cmd_gen_data(args) -> int:
    run = resolve_config(
        args,
        {
            "gen.train_scenes": args.scenes,
            "gen.test_scenes": args.test_scenes if args.test_scenes is not None else args.scenes,
            "gen.variants": args.variants,
            "gen.seed": args.seed,
            "gen.size": args.size,
            "gen.balance": args.balance,
        },
    )
    manifest = generate_dataset(run.gen, args.out, overwrite=args.overwrite)
    run.write(Path(args.out) / "config.txt")
    print(f"wrote {len(manifest)} train and {run.gen.test_scenes} test scenes to {args.out}")
    return EXIT_OK


def _train_flags(args) -> dict:
    return {
        "arch.variant": args.variant,
        "arch.latent_dim": args.latent_dim,
        "train.loss_mode": args.loss,
        "train.seed": args.seed,
        "train.kl_weight": args.beta,
        "train.epochs": args.epochs,
        "train.lr": args.lr,
        "train.batch_size": args.batch_size,
        "train.margin": args.margin,
        "train.policy": args.policy,
    }


def _with_data_shape(run: RunConfig, manifest, explicit: bool) -> RunConfig:
    if explicit:
        return run
    try:
        return replace(run, arch=replace(run.arch, input_shape=manifest.image_shape))
    except ValueError as e:
        raise UsageError(f"architecture does not fit the data: {e}") from e


def _explicit_keys(args) -> set:
    """Keys set by ``--config`` or ``--set`` (as opposed to derived defaults)."""
    keys = set(read_config_file(args.config)) if getattr(args, "config", None) else set()
    keys |= {p.split("=", 1)[0].strip() for p in (getattr(args, "set", None) or [])}
    return keys


def cmd_train(args) -> int:
    run = resolve_config(args, _train_flags(args))
    manifest = load_manifest(args.data, "train")
    run = _with_data_shape(run, manifest, "arch.input_shape" in _explicit_keys(args))
    out = Path(args.out or f"runs/{run.arch.variant}-{run.train.loss_mode}-s{run.train.seed}")
    out.mkdir(parents=True, exist_ok=True)
    run.write(out / "config.txt")
    _, hist = train(
        manifest,
        run.arch,
        run.train,
        checkpoint_path=out / "model.pt",
        metrics_path=out / "history.csv",
        progress=args.progress,
    )
    print(f"trained {run.arch.variant} ({run.train.loss_mode}) for {len(hist)} epochs; final loss {hist.total[-1] if len(hist) else float('nan'):.4f}")
    print(f"checkpoint: {out / 'model.pt'}")
    return EXIT_OK


def _load_model(path):
    try:
        return load_checkpoint(path).model
    except FileNotFoundError:
        raise
    except Exception as e:  # torch raises a zoo of unpickling errors
        raise ManifestError(f"cannot load checkpoint {path}: {e}") from e


def _echo_args(out: Path, args) -> None:
    """Sidecar ``<out>.config.txt`` recording the arguments behind a single-file output."""
    skip = {"func", "verbose", "command"}
    lines = [f"{k} = {v!r}" for k, v in sorted(vars(args).items()) if k not in skip]
    out.with_name(out.name + ".config.txt").write_text("\n".join(lines) + "\n")


def cmd_index(args) -> int:
    model = _load_model(args.checkpoint)
    manifest = load_manifest(args.data, args.split)
    index = build_index(model, manifest)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    index.save(out)
    _echo_args(out, args)
    print(f"indexed {len(index)} images ({index.dim}-d) -> {out}")
    return EXIT_OK


def _load_index_for(model, path) -> LatentIndex:
    index = LatentIndex.load(path)
    index.check_model(model)
    return index


def _read_images(paths, shape):
    images = []
    for p in paths:
        img = read_image(p)
        if tuple(img.shape) != tuple(shape):
            raise ManifestError(f"{p}: image shape {img.shape} does not match model input {tuple(shape)}")
        images.append(img)
    return np.stack(images)


def cmd_predict(args) -> int:
    model = _load_model(args.checkpoint)
    index = _load_index_for(model, args.index)
    images = _read_images(args.images, model.arch.input_shape)
    for path, emb in zip(args.images, embed_images(model, images)):
        e = knn(index, emb, 1)[0]
        print(f"{path}\t{e.label.key}\tscene={e.scene_id}\tvariant={e.variant_id}\tdistance={e.distance:.6g}")
    return EXIT_OK


def cmd_reconstruct(args) -> int:
    model = _load_model(args.checkpoint)
    index = _load_index_for(model, args.index)
    images = _read_images(args.images, model.arch.input_shape)
    direct = reconstruct(model, images)
    nn = nn_reconstruct_batch(index, model, images)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_image(out, image_grid([[x, d, n] for x, d, n in zip(images, direct, nn)]))
    _echo_args(out, args)
    print(f"input | direct | nn reconstruction for {len(images)} image(s) -> {out}")
    return EXIT_OK


def _parse_seeds(text: str) -> tuple[int, ...]:
    if "," in text:
        return tuple(int(s) for s in text.split(",") if s.strip())
    n = int(text)
    if n < 1:
        raise ValueError("--seeds needs a positive count")
    return tuple(range(n))


def cmd_evaluate(args) -> int:
    flags = _train_flags(args)
    try:
        flags["eval.seeds"] = _parse_seeds(args.seeds) if args.seeds else None
    except ValueError as e:
        raise UsageError(f"--seeds: {e}") from e
    flags["eval.setups"] = tuple(s.strip() for s in args.setups.split(",")) if args.setups else None
    flags["eval.jobs"] = args.jobs
    run = resolve_config(args, flags)
    train_m = load_manifest(args.data, "train")
    test_m = load_manifest(args.data, "test")
    run = _with_data_shape(run, train_m, "arch.input_shape" in _explicit_keys(args))
    if "classifier.epochs" not in _explicit_keys(args):
        run = replace(run, classifier=replace(run.classifier, epochs=run.train.epochs, batch_size=run.train.batch_size, lr=run.train.lr))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    run.write(out / "config.txt")
    report = multi_seed_report(
        run.arch,
        run.train,
        train_m,
        test_m,
        seeds=run.eval.seeds,
        setups=run.eval.setups,
        classifier=run.classifier,
        cache_dir=args.cache or out / "checkpoints",
        jobs=run.eval.jobs,
    )
    report.save(out / "report.json")
    table = report.table()
    (out / "table.txt").write_text(table + "\n")
    print(table)
    failed = [r.setup for r in report.rows if r.mean is None]
    if failed:
        print(f"all seeds failed for: {', '.join(failed)}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


def cmd_export_latents(args) -> int:
    model = _load_model(args.checkpoint)
    manifest = load_manifest(args.data, args.split)
    export = export_latents(model, manifest, args.projection)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    export.to_csv(out)
    _echo_args(out, args)
    print(f"{len(export.scene_ids)} rows -> {out}")
    return EXIT_OK


# -- argument parsing --------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _config_flags(p):
    p.add_argument("--config", help="flat key = value config file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key (repeatable)")


def _training_flags(p):
    p.add_argument("--data", default="data", help="dataset root")
    p.add_argument("--variant", choices=["ae", "vae", "tae"])
    p.add_argument("--loss", choices=["impossible", "vanilla"])
    p.add_argument("--seed", type=int)
    p.add_argument("--beta", type=float, help="KL weight for the VAE")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--margin", type=float)
    p.add_argument("--latent-dim", type=int)
    p.add_argument("--policy", choices=["seat", "pose", "location"])


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="illumnorm", description="Illumination-invariant autoencoders on multi-variant scenes.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="render the synthetic cabin dataset")
    _config_flags(p)
    p.add_argument("--out", required=True)
    p.add_argument("--scenes", type=int, help="scenes per split")
    p.add_argument("--test-scenes", type=int, help="test scenes (defaults to --scenes)")
    p.add_argument("--variants", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--size", type=int)
    p.add_argument("--balance", choices=["balanced", "random"])
    p.add_argument("--overwrite", action="store_true")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train one encoder-decoder")
    _config_flags(p)
    _training_flags(p)
    p.add_argument("--out", help="run directory (default runs/<variant>-<loss>-s<seed>)")
    p.add_argument("--progress", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("index", help="embed every training image into a latent index")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", default="data")
    p.add_argument("--split", default="train", choices=["train", "test"])
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_index)

    for name, func, help_ in (
        ("predict", cmd_predict, "label images by their nearest training embedding"),
        ("reconstruct", cmd_reconstruct, "direct and NN reconstructions side by side"),
    ):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--index", required=True)
        p.add_argument("images", nargs="+")
        if name == "reconstruct":
            p.add_argument("--out", required=True, help="output PNG")
        p.set_defaults(func=func)

    p = sub.add_parser("evaluate", help="multi-seed accuracy table")
    _config_flags(p)
    _training_flags(p)
    p.add_argument("--out", required=True)
    p.add_argument("--setups", help=f"comma list from {','.join(ALL_SETUPS)}")
    p.add_argument("--seeds", help="seed count N (0..N-1) or comma list")
    p.add_argument("--jobs", type=int)
    p.add_argument("--cache", help="checkpoint cache directory (default <out>/checkpoints)")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("export-latents", help="write embeddings (optionally PCA-2) as CSV")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", default="data")
    p.add_argument("--split", default="train", choices=["train", "test"])
    p.add_argument("--projection", default="none", choices=["none", "pca2"])
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export_latents)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (TrainingDiverged, FloatingPointError) as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ManifestError, SamplingError, IndexMismatch, OSError, ValueError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
