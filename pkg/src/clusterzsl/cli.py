"""Command-line entry point: ``clusterzsl <command> ...``.

Configuration resolves as defaults < preset < config file < command-line flags.
Every failure prints a single ``error: <kind>: <message>`` line to stderr and
exits nonzero (2 for usage problems, 1 otherwise).
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import datasets, pipeline
from .datasets import Dataset, SyntheticSpec, generate_synthetic, load_dataset
from .evalmetrics import clustering_nmi, pca_project_2d, variance_stats, write_projection
from .pipeline import ABLATION_ROWS, PRESETS, EpisodeSpec, TrainConfig, stage_seeds
from .zslmodel import ZslModel

CHECKPOINT_NAME = "model.cfzm"
CONFIG_NAME = "config.cfg"
MANIFEST_NAME = "manifest.txt"
METRICS_NAME = "metrics.txt"


class UsageError(Exception):
    pass


class CliError(Exception):
    def __init__(self, kind: str, message: str):
        super().__init__(message)
        self.kind = kind


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# -- configuration ----------------------------------------------------------------

CONFIG_FIELDS = {f.name: f for f in dataclasses.fields(TrainConfig)}


def kebab(name: str) -> str:
    return name.replace("_", "-")


def _field_type(name: str):
    return type(TrainConfig.__dataclass_fields__[name].default)


def parse_value(name: str, text: str):
    kind = _field_type(name)
    text = text.strip()
    if kind is bool:
        low = text.lower()
        if low in ("true", "yes", "1", "on"):
            return True
        if low in ("false", "no", "0", "off"):
            return False
        raise CliError("config", f"{kebab(name)}: expected a boolean, got {text!r}")
    try:
        return kind(text)
    except ValueError:
        raise CliError("config", f"{kebab(name)}: expected {kind.__name__}, got {text!r}") from None


def format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def parse_config_text(text: str) -> dict:
    """Flat ``key = value`` lines; ``#`` starts a comment. Keys are kebab-case
    TrainConfig fields (underscores are accepted and normalized)."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise CliError("config", f"line {lineno}: expected key=value, got {raw.strip()!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        name = key.replace("-", "_")
        if name not in CONFIG_FIELDS:
            raise CliError("config", f"unknown config key {key!r} on line {lineno}")
        out[name] = parse_value(name, value)
    return out


def config_text(config: TrainConfig) -> str:
    return "".join(f"{kebab(k)} = {format_value(v)}\n" for k, v in dataclasses.asdict(config).items())


def resolve_config(args) -> tuple[TrainConfig, dict[str, str]]:
    """Merge the layers and remember where each non-default value came from."""
    values, source = {}, {}
    if getattr(args, "preset", None):
        for k, v in PRESETS[args.preset].items():
            values[k], source[k] = v, f"preset:{args.preset}"
    cfg_path = getattr(args, "config", None)
    if cfg_path:
        try:
            text = Path(cfg_path).read_text()
        except OSError as exc:
            raise CliError("io", f"cannot read config {cfg_path}: {exc.strerror}") from None
        for k, v in parse_config_text(text).items():
            values[k], source[k] = v, "file"
    for name in CONFIG_FIELDS:
        v = getattr(args, "cfg_" + name, None)
        if v is not None:
            values[name], source[name] = v, "flag"
    for flag, name in (("no_finetune", "use_gaussian_finetune"), ("no_projection", "use_projection"),
                       ("no_noise", "use_noise")):
        if getattr(args, flag, False):
            values[name], source[name] = False, "flag"
    try:
        config = TrainConfig(**values).validate()
    except ValueError as exc:
        raise CliError("config", str(exc)) from None
    return config, source


def add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat key=value config file")
    p.add_argument("--preset", choices=sorted(PRESETS), help="dataset preset (d_p, alpha, attribute width)")
    for name in CONFIG_FIELDS:
        kind = _field_type(name)
        if kind is bool:
            p.add_argument(f"--{kebab(name)}", dest="cfg_" + name, type=_bool_arg, metavar="BOOL")
        else:
            p.add_argument(f"--{kebab(name)}", dest="cfg_" + name, type=kind)
    p.add_argument("--no-finetune", action="store_true", help="skip Gaussian fine-tuning of F")
    p.add_argument("--no-projection", action="store_true", help="reconstruct raw features, no mapping M")
    p.add_argument("--no-noise", action="store_true", help="train on clean reconstruction targets")


def _bool_arg(text: str) -> bool:
    low = text.lower()
    if low in ("true", "yes", "1", "on"):
        return True
    if low in ("false", "no", "0", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


# -- manifest / outputs -------------------------------------------------------------

def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


class Manifest:
    """Line-oriented run record: ``section.key<TAB>value``."""

    def __init__(self, argv: list[str]):
        self.lines = [("command", " ".join(["clusterzsl", *argv]))]
        threads = os.environ.get("CFZ_THREADS")
        self.add("env", "CFZ_THREADS", threads if threads else "unset")

    def add(self, section: str, key: str, value) -> None:
        self.lines.append((f"{section}.{key}", format_value(value) if not isinstance(value, str) else value))

    def add_config(self, config: TrainConfig, source: dict[str, str]) -> None:
        for k, v in dataclasses.asdict(config).items():
            self.add("config", kebab(k), f"{format_value(v)}\t{source.get(k, 'default')}")
        for stage, s in stage_seeds(config.seed).items():
            self.add("seed", stage, s)

    def add_inputs(self, directory) -> None:
        for name, path in datasets.dataset_paths(directory).items():
            self.add("input", f"{name}.sha256", file_digest(path))

    def add_metrics(self, metrics: dict) -> None:
        for k, v in metrics.items():
            self.add("metric", k, v)

    def write(self, path) -> None:
        Path(path).write_text("".join(f"{k}\t{v}\n" for k, v in self.lines))


def write_metrics(path, metrics: dict) -> None:
    """``key=value`` per line in insertion order; floats use full precision."""
    Path(path).write_text("".join(f"{k}={format_value(v)}\n" for k, v in metrics.items()))


def read_metrics(path) -> dict[str, str]:
    out = {}
    for line in Path(path).read_text().splitlines():
        if line.strip():
            k, v = line.split("=", 1)
            out[k] = v
    return out


def _out_dir(path) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CliError("io", f"cannot create output directory {out}: {exc.strerror}") from None
    return out


def _load_data(directory, preset: str | None = None) -> Dataset:
    try:
        ds = load_dataset(directory)
    except FileNotFoundError as exc:
        raise CliError("io", f"missing dataset file {exc.filename}") from None
    if preset and preset in datasets.PRESET_ATTRIBUTE_DIMS:
        want = datasets.PRESET_ATTRIBUTE_DIMS[preset]
        if ds.attributes.shape[1] != want:
            raise CliError("data", f"preset {preset} expects {want}-d attributes, dataset has {ds.attributes.shape[1]}")
    return ds


def _check_compatible(model: ZslModel, ds: Dataset) -> None:
    if model.d_f != ds.features.shape[1]:
        raise CliError("dims", f"checkpoint feature width {model.d_f} != dataset width {ds.features.shape[1]}")
    if model.d_a != ds.attributes.shape[1]:
        raise CliError("dims", f"checkpoint attribute width {model.d_a} != dataset width {ds.attributes.shape[1]}")
    if not np.array_equal(model.seen_classes, ds.split.seen):
        raise CliError("dims", "checkpoint seen classes differ from the dataset split")


def _load_checkpoint(path) -> ZslModel:
    try:
        return ZslModel.load(path)
    except FileNotFoundError:
        raise CliError("io", f"missing checkpoint {path}") from None


def _eval_config(args) -> tuple[TrainConfig, dict[str, str]]:
    """Evaluation reuses the training config saved next to the checkpoint unless one is given."""
    if not args.config:
        sibling = Path(args.checkpoint).with_name(CONFIG_NAME)
        if sibling.exists():
            args.config = str(sibling)
    return resolve_config(args)


# -- commands -------------------------------------------------------------------------

def cmd_gen_data(args, argv) -> None:
    spec = SyntheticSpec(k_seen=args.k_seen, k_unseen=args.k_unseen, d_a=args.d_a, d_f=args.d_f,
                         samples_per_class=args.samples_per_class, cluster_spread=args.cluster_spread,
                         overlap=args.overlap, nuisance_rank=args.nuisance_rank,
                         nuisance_scale=args.nuisance_scale, test_fraction=args.test_fraction, seed=args.seed)
    try:
        spec.validate()
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    out = _out_dir(args.out)
    generate_synthetic(spec).save(out)
    man = Manifest(argv)
    for k, v in dataclasses.asdict(spec).items():
        man.add("spec", kebab(k), v)
    man.add_inputs(out)
    man.write(out / MANIFEST_NAME)


def cmd_train(args, argv) -> None:
    config, source = resolve_config(args)
    ds = _load_data(args.data, args.preset)
    out = _out_dir(args.out)
    man = Manifest(argv)
    man.add_config(config, source)
    man.add_inputs(args.data)
    res = pipeline.train(ds, config)
    res.model.save(out / CHECKPOINT_NAME)
    (out / CONFIG_NAME).write_text(config_text(config))
    metrics = {f"final_{k}": v[-1] for k, v in res.traces.items() if v}
    for k, v in res.timings.items():
        man.add("time", k, v)
    for k, v in res.traces.items():
        man.add("trace", k, ",".join(format_value(float(t)) for t in v))
    man.add_metrics(metrics)
    man.add("output", "checkpoint.sha256", file_digest(out / CHECKPOINT_NAME))
    write_metrics(out / METRICS_NAME, metrics)
    man.write(out / MANIFEST_NAME)


def cmd_synthesize(args, argv) -> None:
    config, source = _eval_config(args)
    ds = _load_data(args.data, args.preset)
    model = _load_checkpoint(args.checkpoint)
    _check_compatible(model, ds)
    if args.n is not None:
        config = config.replace(n_synth_per_unseen=args.n)
    x, y = pipeline.stage_synthesize_unseen(model, ds.attributes, ds.split, config, include_seen=args.include_seen)
    out = _out_dir(args.out)
    datasets.save_feature_file(out / "synthesized.cfz", x)
    datasets.save_label_file(out / "synthesized.clz", y)
    man = Manifest(argv)
    man.add_config(config, source)
    man.add_inputs(args.data)
    man.add("input", "checkpoint.sha256", file_digest(args.checkpoint))
    man.add("output", "rows", x.shape[0])
    man.write(out / MANIFEST_NAME)


def _eval_zsl(model, ds, config) -> dict:
    x, y = pipeline.zsl_training_set(model, ds, config)
    clf = pipeline.stage_train_final_classifier(x, y, ds.split.unseen, config)
    rows = ds.test_unseen_rows
    per_class, mean = pipeline.evaluate_zsl(clf, model, ds.features[rows], ds.labels[rows])
    metrics = {"zsl_acc": mean}
    metrics.update({f"zsl_acc_class_{c}": a for c, a in per_class.items()})
    return metrics


def _eval_gzsl(model, ds, config) -> dict:
    x, y = pipeline.gzsl_training_set(model, ds, config)
    classes = np.concatenate([ds.split.seen, ds.split.unseen])
    clf = pipeline.stage_train_final_classifier(x, y, classes, config)
    s, u = ds.test_seen_rows, ds.test_unseen_rows
    r = pipeline.evaluate_gzsl(clf, model, ds.features[s], ds.labels[s], ds.features[u], ds.labels[u])
    return {"gzsl_u": r.u, "gzsl_s": r.s, "gzsl_h": r.h}


def _eval_clusterability(model, ds, config, out: Path) -> dict:
    rows = pipeline.clusterability_rows(ds)
    real = model.embed(ds.features[rows])
    labels = ds.labels[rows]
    stats = variance_stats(real, labels)
    metrics = {"nmi": clustering_nmi(real, labels, seed=config.seed),
               "nmi_raw": clustering_nmi(ds.features[rows], labels, seed=config.seed),
               "intra_class_variance": stats.intra_class_variance,
               "inter_class_mean_distance": stats.inter_class_mean_distance}
    synth_x, synth_y = pipeline.zsl_training_set(model, ds, config)
    points = pca_project_2d(np.vstack([real, synth_x]))
    sources = ["real"] * len(labels) + ["synthesized"] * len(synth_y)
    write_projection(out / "projection.tsv", points, np.concatenate([labels, synth_y]), sources)
    return metrics


def _eval_fewshot(model, ds, config, args) -> dict:
    spec = EpisodeSpec(n_way=args.n_way, k_shot=args.k_shot, n_query=args.n_query,
                       n_episodes=args.episodes, seed=config.seed)
    base = ds.train_rows
    novel = ds.test_unseen_rows
    bx, by, nx, ny = ds.features[base], ds.labels[base], ds.features[novel], ds.labels[novel]
    try:
        base_res = pipeline.run_fewshot(bx, by, nx, ny, spec, config, mode="baseline")
        fmap = model.finetune_map if model.finetune_enabled else None
        gauss = pipeline.run_fewshot(bx, by, nx, ny, spec, config, mode="gaussian", fmap=fmap)
    except ValueError as exc:
        raise CliError("data", str(exc)) from None
    return {"fewshot_mean": gauss.mean, "fewshot_ci95": gauss.ci95,
            "fewshot_baseline_mean": base_res.mean, "fewshot_baseline_ci95": base_res.ci95,
            "fewshot_n_way": spec.n_way, "fewshot_k_shot": spec.k_shot, "fewshot_episodes": spec.n_episodes}


def cmd_eval(args, argv) -> None:
    config, source = _eval_config(args)
    ds = _load_data(args.data, args.preset)
    model = _load_checkpoint(args.checkpoint)
    _check_compatible(model, ds)
    out = _out_dir(args.out)
    t = time.perf_counter()
    if args.protocol == "zsl":
        metrics = _eval_zsl(model, ds, config)
    elif args.protocol == "gzsl":
        metrics = _eval_gzsl(model, ds, config)
    elif args.protocol == "clusterability":
        metrics = _eval_clusterability(model, ds, config, out)
    else:
        metrics = _eval_fewshot(model, ds, config, args)
    man = Manifest(argv)
    man.add_config(config, source)
    man.add_inputs(args.data)
    man.add("input", "checkpoint.sha256", file_digest(args.checkpoint))
    man.add("time", args.protocol, time.perf_counter() - t)
    man.add_metrics(metrics)
    write_metrics(out / METRICS_NAME, metrics)
    man.write(out / MANIFEST_NAME)


def cmd_ablation(args, argv) -> None:
    config, source = resolve_config(args)
    ds = _load_data(args.data, args.preset)
    out = _out_dir(args.out)
    man = Manifest(argv)
    man.add_config(config, source)
    man.add_inputs(args.data)
    t = time.perf_counter()
    table = pipeline.run_ablation(ds, config)
    man.add("time", "ablation", time.perf_counter() - t)
    metrics = {}
    lines = ["row\tzsl_acc\tnmi\tseed"]
    for row in ABLATION_ROWS:
        r = table[row]
        man.add("seed", f"ablation.{row}", r["seed"])
        metrics[f"{row}.zsl_acc"] = r["zsl_acc"]
        metrics[f"{row}.nmi"] = r["nmi"]
        lines.append(f"{row}\t{format_value(r['zsl_acc'])}\t{format_value(r['nmi'])}\t{r['seed']}")
    (out / "ablation.tsv").write_text("\n".join(lines) + "\n")
    man.add_metrics(metrics)
    write_metrics(out / METRICS_NAME, metrics)
    man.write(out / MANIFEST_NAME)


def cmd_report(args, argv) -> None:
    """Collect the metrics files of several run directories into one table."""
    runs = []
    for d in args.runs:
        path = Path(d) / METRICS_NAME
        if not path.exists():
            raise CliError("io", f"no {METRICS_NAME} in {d}")
        runs.append((d, read_metrics(path)))
    keys = []
    for _, m in runs:
        keys += [k for k in m if k not in keys]
    lines = ["run\t" + "\t".join(keys)]
    lines += [d + "\t" + "\t".join(m.get(k, "") for k in keys) for d, m in runs]
    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)


# -- parser / main ---------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="clusterzsl", description="Clusterable-feature zero-shot learning.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="write a synthetic attribute-conditioned benchmark")
    d = SyntheticSpec()
    for f in dataclasses.fields(SyntheticSpec):
        g.add_argument(f"--{kebab(f.name)}", type=type(getattr(d, f.name)), default=getattr(d, f.name))
    g.add_argument("--out", required=True)

    t = sub.add_parser("train", help="fine-tune F, then train the CVAE stack; writes a checkpoint")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    add_config_flags(t)

    s = sub.add_parser("synthesize", help="sample unseen-class features from a checkpoint")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--n", type=int, help="samples per class")
    s.add_argument("--include-seen", action="store_true")
    add_config_flags(s)

    e = sub.add_parser("eval", help="evaluate a checkpoint under one protocol")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--protocol", required=True, choices=["zsl", "gzsl", "clusterability", "fewshot"])
    e.add_argument("--n-way", type=int, default=5)
    e.add_argument("--k-shot", type=int, default=1)
    e.add_argument("--n-query", type=int, default=15)
    e.add_argument("--episodes", type=int, default=200)
    add_config_flags(e)

    a = sub.add_parser("ablation", help="run the four component configurations")
    a.add_argument("--data", required=True)
    a.add_argument("--out", required=True)
    add_config_flags(a)

    r = sub.add_parser("report", help="tabulate metrics files from run directories")
    r.add_argument("runs", nargs="+")
    r.add_argument("--out")
    return parser


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "synthesize": cmd_synthesize,
            "eval": cmd_eval, "ablation": cmd_ablation, "report": cmd_report}


def thread_limit() -> int | None:
    raw = os.environ.get("CFZ_THREADS")
    if raw is None or raw == "":
        return None
    try:
        n = int(raw)
    except ValueError:
        n = 0
    if n < 1:
        raise CliError("env", f"CFZ_THREADS must be a positive integer, got {raw!r}")
    return n


def _fail(kind: str, message: str, code: int) -> int:
    message = " ".join(str(message).split())
    print(f"error: {kind}: {message}", file=sys.stderr)
    return code


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = build_parser().parse_args(argv)
        if args.command == "eval" and min(args.n_way, args.k_shot, args.episodes, args.n_query) < 1:
            raise UsageError("--n-way, --k-shot, --n-query and --episodes must be >= 1")
        threads = thread_limit()
        if threads is None:
            COMMANDS[args.command](args, argv)
        else:
            from threadpoolctl import threadpool_limits
            with threadpool_limits(limits=threads):
                COMMANDS[args.command](args, argv)
    except UsageError as exc:
        return _fail("usage", exc, 2)
    except CliError as exc:
        return _fail(exc.kind, exc, 1)
    except datasets.FormatError as exc:
        return _fail(f"format.{type(exc).__name__}", exc, 1)
    except (datasets.SplitError, ValueError) as exc:
        return _fail(type(exc).__name__, exc, 1)
    except OSError as exc:
        return _fail("io", f"{exc.strerror}: {exc.filename}", 1)
    return 0


if __name__ == "__main__":
    sys.exit(main())
