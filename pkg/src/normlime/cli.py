"""Command-line entry point: ``normlime {train,explain,class-salience,kar}``."""

import argparse
import hashlib
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from ._validation import check_seed, config_digest, derive_seed
from .baselines import (
    ClassAverageConfig,
    NoiseConfig,
    class_average_map,
    masking_value_function,
    random_importance,
    shapley_sampled,
    smoothgrad_sq,
    vargrad,
)
from .datasets import find_mnist, load_csv, load_idx
from .exceptions import NormLimeError
from .images import render_salience_image
from .kar import (
    DEFAULT_THRESHOLDS,
    METHOD_ALIASES,
    AttributionConfig,
    KarConfig,
    SalienceComputer,
    feature_space,
    resolve_method,
    run_kar,
    select_anchors,
)
from .local_surrogate import LocalSurrogateExplainer
from .model import MLPClassifier, TrainConfig, load_model, save_model
from .salience import (
    ExplanationSet,
    SalienceMap,
    normlime_for_class,
    positive_part,
    splime_l2_for_class,
)

SEED_ENV = "NORMLIME_SEED"


class UsageError(Exception):
    pass


# -- argument helpers ---------------------------------------------------------

def _int_list(text):
    return tuple(int(v) for v in str(text).split(",") if v.strip())


def _float_list(text):
    return tuple(float(v) for v in str(text).split(",") if v.strip())


def parse_classes(text):
    """``"0..9"``, ``"1,4,7"`` or ``"3"`` -> sorted list of class indices."""
    out = set()
    for part in str(text).split(","):
        part = part.strip()
        if ".." in part:
            lo, hi = part.split("..")
            out.update(range(int(lo), int(hi) + 1))
        elif part:
            out.add(int(part))
    return sorted(out)


def parse_methods(text):
    names = [m.strip() for m in str(text).split(",") if m.strip()]
    for name in names:
        if name not in METHOD_ALIASES:
            raise UsageError(f"unknown method {name!r}; valid methods: "
                             f"{', '.join(METHOD_ALIASES)}")
    return names


def read_config(path):
    """Flat ``key=value`` file; blank lines and ``#`` comments are ignored."""
    values = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key=value")
        key, value = line.split("=", 1)
        values[key.strip().lstrip("-").replace("-", "_")] = value.strip()
    return values


def _data_args(p, split_default):
    g = p.add_argument_group("data")
    g.add_argument("--data-images", help="IDX image file (optionally gzipped)")
    g.add_argument("--data-labels", help="IDX label file")
    g.add_argument("--csv", help="CSV file with a label,f0,f1,... header")
    g.add_argument("--data-dir", help="directory holding the standard MNIST files")
    g.add_argument("--split", choices=("train", "test"), default=split_default,
                   help="MNIST split read from --data-dir")
    g.add_argument("--size", type=int, default=None,
                   help="seeded subsample size (default: desk-scale size for the command)")


def _test_args(p):
    g = p.add_argument_group("held-out data")
    g.add_argument("--test-images")
    g.add_argument("--test-labels")
    g.add_argument("--test-csv")
    g.add_argument("--test-size", type=int, default=2000)


def _common(p):
    p.add_argument("--seed", type=int, default=None,
                   help=f"global seed (falls back to ${SEED_ENV}, then 0)")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out-dir", default=".")
    p.add_argument("--config", help="key=value file of defaults for these flags")


def _surrogate_args(p):
    p.add_argument("--k", type=int, default=20)
    p.add_argument("--sigma", type=float, default=0.3)
    p.add_argument("--samples", type=int, default=1000)
    p.add_argument("--lasso-lambda", type=float, default=None)


def build_parser():
    parser = argparse.ArgumentParser(prog="normlime", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="fit and save a model")
    _data_args(p, "train")
    _common(p)
    p.add_argument("--model", required=True, help="output model path")
    p.add_argument("--hidden", type=_int_list, default=(128, 128))
    p.add_argument("--epochs", type=int, default=TrainConfig.epochs)
    p.add_argument("--batch-size", type=int, default=TrainConfig.batch_size)
    p.add_argument("--learning-rate", type=float, default=TrainConfig.learning_rate)
    p.add_argument("--l2", type=float, default=TrainConfig.l2_penalty)
    _test_args(p)

    p = sub.add_parser("explain", help="one local explanation as JSON")
    _data_args(p, "test")
    _common(p)
    _surrogate_args(p)
    p.add_argument("--model", required=True)
    p.add_argument("--index", type=int, default=0, help="row of the dataset to explain")
    p.add_argument("--class", dest="target_class", type=int, default=None,
                   help="target class (default: the predicted label)")

    p = sub.add_parser("class-salience", help="per-class maps and PGM images")
    _data_args(p, "test")
    _common(p)
    _surrogate_args(p)
    p.add_argument("--model", required=True)
    p.add_argument("--method", default="normlime")
    p.add_argument("--class", "--classes", dest="classes", default="0..9")
    p.add_argument("--anchors-per-class", type=int, default=100)
    p.add_argument("--images-per-class", type=int, default=10)
    p.add_argument("--noise-samples", type=int, default=100)
    p.add_argument("--permutations", type=int, default=20)
    p.add_argument("--width", type=int, default=None)
    p.add_argument("--height", type=int, default=None)

    p = sub.add_parser("kar", help="Keep-And-Retrain grid")
    _data_args(p, "train")
    _test_args(p)
    _common(p)
    _surrogate_args(p)
    p.add_argument("--model", required=True, help="trained model whose salience is evaluated")
    p.add_argument("--method", "--methods", dest="methods",
                   default="normlime,lime,smoothgrad_sq,vargrad,random")
    p.add_argument("--thresholds", type=_float_list, default=DEFAULT_THRESHOLDS)
    p.add_argument("--runs", type=int, default=5)
    p.add_argument("--feature-space", choices=("input", "hidden"), default="input")
    p.add_argument("--layer", type=int, default=0)
    p.add_argument("--anchors-per-class", type=int, default=100)
    p.add_argument("--noise-samples", type=int, default=100)
    p.add_argument("--gradient-instances", type=int, default=100)
    p.add_argument("--shapley-instances", type=int, default=10)
    p.add_argument("--permutations", type=int, default=20)
    return parser


def parse_args(argv):
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        # re-parse with file values as defaults so the command line still wins
        values = read_config(args.config)
        subparser = parser._subparsers._group_actions[0].choices[args.command]
        known = {a.dest for a in subparser._actions}
        unknown = sorted(set(values) - known)
        if unknown:
            raise UsageError(f"unknown config keys: {', '.join(unknown)}")
        subparser.set_defaults(**values)
        args = parser.parse_args(argv)
    if args.seed is None:
        args.seed = int(os.environ.get(SEED_ENV, 0))
    check_seed(args.seed)
    return args


# -- data and manifest --------------------------------------------------------

def load_data(args, size_default):
    if args.csv:
        data = load_csv(args.csv, args.split)
    elif args.data_images or args.data_labels:
        if not (args.data_images and args.data_labels):
            raise UsageError("--data-images and --data-labels go together")
        data = load_idx(args.data_images, args.data_labels, args.split)
    elif args.data_dir:
        data = load_idx(*find_mnist(args.data_dir, args.split), split=args.split)
    else:
        raise UsageError("no data given: use --data-images/--data-labels, --csv or --data-dir")
    size = args.size if args.size is not None else size_default
    return data.subsample(size, derive_seed(args.seed, "subsample", data.split))


def load_test_data(args):
    if args.test_csv:
        data = load_csv(args.test_csv, "test")
    elif args.test_images or args.test_labels:
        if not (args.test_images and args.test_labels):
            raise UsageError("--test-images and --test-labels go together")
        data = load_idx(args.test_images, args.test_labels, "test")
    elif args.data_dir:
        data = load_idx(*find_mnist(args.data_dir, "test"), split="test")
    else:
        return None
    return data.subsample(args.test_size, derive_seed(args.seed, "subsample", "test"))


def open_model(path):
    if not Path(path).is_file():
        raise FileNotFoundError(f"model file not found: {path}")
    return load_model(path)


def file_digest(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


class RunManifest:
    """Record of one command: resolved config, seed and digests of outputs."""

    def __init__(self, command, config, seed):
        self.command = command
        self.config = config
        self.seed = seed
        self.started = time.strftime("%Y-%m-%dT%H:%M:%S%z")
        self.outputs = []

    def add(self, path):
        self.outputs.append({"path": str(path), "sha256": file_digest(path)})

    def to_dict(self):
        return {
            "command": self.command,
            "config": self.config,
            "config_digest": config_digest(self.config),
            "seed": self.seed,
            "tool_version": __version__,
            "started": self.started,
            "finished": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
            "outputs": self.outputs,
        }

    def write(self, out_dir):
        path = Path(out_dir) / f"manifest-{self.command}.json"
        path.write_text(json.dumps(self.to_dict(), indent=2) + "\n")
        return path


def _write(path, text, manifest):
    Path(path).write_text(text)
    manifest.add(path)


def _config_of(args):
    skip = {"out_dir", "jobs", "config", "command"}
    return {k: (list(v) if isinstance(v, tuple) else v)
            for k, v in sorted(vars(args).items()) if k not in skip}


def _attribution_config(args):
    return AttributionConfig(
        k=args.k, sigma=args.sigma, num_samples=args.samples, lasso_lambda=args.lasso_lambda,
        noise=NoiseConfig(args.sigma, args.noise_samples, derive_seed(args.seed, "noise")),
        gradient_instances=getattr(args, "gradient_instances", 100),
        shapley_instances=getattr(args, "shapley_instances", 10),
        shapley_permutations=args.permutations, seed=args.seed)


# -- commands -----------------------------------------------------------------

def cmd_train(args, manifest):
    data = load_data(args, 10_000)
    model = MLPClassifier(hidden_layer_sizes=tuple(args.hidden), epochs=args.epochs,
                          batch_size=args.batch_size, learning_rate=args.learning_rate,
                          l2_penalty=args.l2, seed=args.seed)
    model.fit(data.X, data.y)
    Path(args.model).parent.mkdir(parents=True, exist_ok=True)
    save_model(model, args.model)
    manifest.add(args.model)
    msg = f"trained on {len(data)} instances; final loss {model.loss_curve_[-1]:.4f}"
    test = load_test_data(args)
    if test is not None:
        msg += f"; test accuracy {model.score(test.X, test.y):.4f}"
    print(msg)


def cmd_explain(args, manifest):
    model = open_model(args.model)
    data = load_data(args, 2_000)
    if not 0 <= args.index < len(data):
        raise UsageError(f"--index must lie in [0, {len(data)})")
    explainer = LocalSurrogateExplainer(model, k=args.k, lasso_lambda=args.lasso_lambda,
                                        num_samples=args.samples, sigma=args.sigma,
                                        seed=args.seed)
    expl = explainer.explain(data.X[args.index], args.target_class, anchor_id=args.index)
    text = expl.to_json(indent=2) + "\n"
    _write(Path(args.out_dir) / f"explanation-{args.index}.json", text, manifest)
    sys.stdout.write(text)


def class_salience_maps(model, data, method, classes, args):
    """Per-class SalienceMaps for ``method`` over ``data``."""
    method = resolve_method(method)
    if method in ("normlime", "splime_l2"):
        idx = select_anchors(data.y, args.anchors_per_class, derive_seed(args.seed, "anchors"))
        explainer = LocalSurrogateExplainer(model, k=args.k, lasso_lambda=args.lasso_lambda,
                                            num_samples=args.samples, sigma=args.sigma,
                                            seed=args.seed, n_jobs=args.jobs)
        eset = ExplanationSet(explainer.explain_many(data.X[idx], anchor_ids=idx),
                              data.n_features)
        per_class = normlime_for_class if method == "normlime" else splime_l2_for_class
        return [positive_part(per_class(eset, y), eset, y) for y in classes]

    maps = []
    for y in classes:
        cacfg = ClassAverageConfig(args.images_per_class, derive_seed(args.seed, "class", y))
        ncfg = NoiseConfig(args.sigma, args.noise_samples, derive_seed(args.seed, "noise", y))
        if method == "smoothgrad_sq":
            smap = class_average_map(data.X, data.y, y,
                                     lambda x: smoothgrad_sq(model, x, y, ncfg), method, cacfg)
        elif method == "vargrad":
            smap = class_average_map(data.X, data.y, y,
                                     lambda x: vargrad(model, x, y, ncfg), method, cacfg)
        elif method == "shapley":
            baseline = data.X.mean(axis=0)
            seed = derive_seed(args.seed, "perm", y)

            def instance_map(x):
                v = masking_value_function(model, x, baseline, y)
                return np.abs(shapley_sampled(v, data.n_features, args.permutations, seed))

            smap = class_average_map(data.X, data.y, y, instance_map, method, cacfg)
        else:
            smap = SalienceMap("random", y, random_importance(
                data.n_features, derive_seed(args.seed, "random", y)))
        maps.append(smap)
    return maps


def _image_shape(args, data):
    width = args.width or (data.shape[1] if data.shape else None)
    height = args.height or (data.shape[0] if data.shape else None)
    if width is None or height is None:
        side = int(round(np.sqrt(data.n_features)))
        if side * side != data.n_features:
            raise UsageError("pass --width and --height for non-square feature vectors")
        width = height = side
    return width, height


def cmd_class_salience(args, manifest):
    method = parse_methods(args.method)
    if len(method) != 1:
        raise UsageError("class-salience takes exactly one --method")
    model = open_model(args.model)
    data = load_data(args, 2_000)
    classes = parse_classes(args.classes)
    width, height = _image_shape(args, data)
    maps = class_salience_maps(model, data, method[0], classes, args)
    out = Path(args.out_dir)
    for y, smap in zip(classes, maps):
        path = out / f"{method[0]}_class{y}.pgm"
        render_salience_image(smap, width, height, path)
        manifest.add(path)
    text = json.dumps([m.to_dict() for m in maps]) + "\n"
    _write(out / f"{method[0]}_class_salience.json", text, manifest)
    print(f"wrote {len(maps)} class maps to {out}")


def cmd_kar(args, manifest):
    methods = parse_methods(args.methods)
    model = open_model(args.model)
    train = load_data(args, 10_000)
    test = load_test_data(args)
    if test is None:
        raise UsageError("kar needs held-out data: --test-images/--test-labels, "
                         "--test-csv or --data-dir")
    idx = select_anchors(train.y, args.anchors_per_class, derive_seed(args.seed, "anchors"))
    predictor, space = feature_space(model, train.X[idx], args.feature_space, args.layer)
    computer = SalienceComputer(predictor, space, _attribution_config(args), args.jobs)
    maps = {m: computer.compute(m) for m in methods}

    sizes = [W.shape[0] for W in model.coefs_[:-1]]
    template = MLPClassifier(hidden_layer_sizes=tuple(sizes), n_classes=len(model.classes_))
    tcfg = TrainConfig(model.epochs, model.batch_size, model.learning_rate,
                       args.seed, model.l2_penalty)
    kcfg = KarConfig(args.thresholds, args.runs, args.feature_space, args.layer, tcfg,
                     args.seed)
    report = run_kar(template, (train.X, train.y), (test.X, test.y), maps, kcfg, args.jobs)

    out = Path(args.out_dir)
    _write(out / "kar.csv", report.to_csv(), manifest)
    _write(out / "kar.json", report.to_json(indent=2) + "\n", manifest)
    _write(out / "kar_maps.json",
           json.dumps({m: s.to_dict() for m, s in maps.items()}) + "\n", manifest)
    print(report.table())
    if report.failures:
        print(f"{len(report.failures)} failed runs excluded", file=sys.stderr)


COMMANDS = {
    "train": cmd_train,
    "explain": cmd_explain,
    "class-salience": cmd_class_salience,
    "kar": cmd_kar,
}


def main(argv=None):
    try:
        args = parse_args(argv)
    except UsageError as exc:
        print(f"normlime: error: {exc}", file=sys.stderr)
        return 2
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = RunManifest(args.command, _config_of(args), args.seed)
    try:
        COMMANDS[args.command](args, manifest)
    except UsageError as exc:
        print(f"normlime {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (FileNotFoundError, NormLimeError, ValueError) as exc:
        print(f"normlime {args.command}: error: {exc}", file=sys.stderr)
        return 1
    manifest.write(out)
    return 0


if __name__ == "__main__":
    sys.exit(main())
