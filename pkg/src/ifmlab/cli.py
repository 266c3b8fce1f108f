"""Command-line entry point: ``ifmlab {build-data,train,eval,report,mi-sanity}``.

Every command accepts ``--config FILE`` (TOML); command-line flags override
keys from the file, and the file overrides built-in defaults.  Exit codes:
0 success, 2 input error, 3 numeric divergence, 4 I/O error.
"""

import argparse
import glob
import json
import logging
import sys
from pathlib import Path

from ifmlab.errors import IFMError, InputError, IoFailure

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

logger = logging.getLogger("ifmlab")

# built-in defaults per command; also the set of keys a config file may set
DEFAULTS = {
    "build-data": {
        "mnist": "bundled",
        "textures": "procedural",
        "texture_seed": None,
        "train_limit": None,
        "seed": 0,
        "out": "data",
    },
    "train": {
        "data": "data",
        "out": None,  # runs/ifm, or runs/baseline when lambda_ifm == 0
        "seed": 0,
        "lambda_ifm": 1.0,
        "epochs": 30,
        "batch_size": 128,
        "learning_rate": 0.01,
        "momentum": 0.9,
        "pairs_per_image": 32,
        "objective_form": "standard",
        "update_mode": "joint",
        "batchnorm": "shared",
        "threads": 1,
    },
    "eval": {"ckpt": None, "data": "data", "split": "test", "out": None, "name": None, "seed": 0},
    "report": {"runs": [], "with_paper_refs": False, "with_literature": False, "out": None, "seed": 0},
    "mi-sanity": {"rho": [0.0, 0.5, 0.9], "samples": 50_000, "steps": 2000, "seed": 0, "out": None},
}


def _common(p):
    p.add_argument("--config", type=Path, help="TOML file with option defaults")
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.add_argument("--verbose", "-v", action="count", default=0)


def build_parser():
    parser = argparse.ArgumentParser(prog="ifmlab", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("build-data", help="build shiftedMNIST split files and manifest")
    _common(p)
    p.add_argument("--mnist", help="directory with MNIST IDX files, or 'bundled'")
    p.add_argument("--textures", help="'procedural' or a directory of >= 10 texture images")
    p.add_argument("--texture-seed", type=int)
    p.add_argument("--train-limit", type=int, help="keep only this many train examples")

    p = sub.add_parser("train", help="train a classifier with (or without) IFM")
    _common(p)
    p.add_argument("--data")
    p.add_argument("--lambda-ifm", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--learning-rate", "--lr", type=float)
    p.add_argument("--momentum", type=float)
    p.add_argument("--pairs-per-image", type=int)
    p.add_argument("--objective-form", choices=["standard", "paper_literal"])
    p.add_argument("--update-mode", choices=["joint", "alternating"])
    p.add_argument("--batchnorm", choices=["shared", "separate"])
    p.add_argument("--threads", type=int)

    p = sub.add_parser("eval", help="score a checkpoint on digit and texture labels")
    _common(p)
    p.add_argument("--ckpt")
    p.add_argument("--data")
    p.add_argument("--split", choices=["train", "val", "test"])
    p.add_argument("--name", help="row label (default: derived from the checkpoint)")

    p = sub.add_parser("report", help="aggregate eval CSVs into a comparison table")
    _common(p)
    p.add_argument("--runs", nargs="+", help="run directories or eval CSV files")
    p.add_argument("--with-paper-refs", action="store_true", default=None)
    p.add_argument("--with-literature", action="store_true", default=None)

    p = sub.add_parser("mi-sanity", help="Gaussian check of the JSD estimator")
    _common(p)
    p.add_argument("--rho", type=float, nargs="+")
    p.add_argument("--samples", type=int)
    p.add_argument("--steps", type=int)
    return parser


def resolve(args):
    """Merge defaults < config file < flags into one dict."""
    settings = dict(DEFAULTS[args.command])
    if args.config is not None:
        try:
            with open(args.config, "rb") as f:
                file_conf = tomllib.load(f)
        except OSError as exc:
            raise IoFailure(f"cannot read config {args.config}: {exc}") from exc
        except tomllib.TOMLDecodeError as exc:
            raise InputError(f"bad config {args.config}: {exc}") from exc
        # allow either flat keys or a [command] table
        file_conf = file_conf.get(args.command, file_conf)
        for key, value in file_conf.items():
            key = key.replace("-", "_")
            if key not in settings:
                raise InputError(f"unknown option {key!r} for {args.command}")
            settings[key] = value
    for key, value in vars(args).items():
        if key in settings and value is not None:
            settings[key] = value
    settings["verbose"] = args.verbose
    return settings


def _echo(settings, path):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(settings, indent=2, sort_keys=True, default=str) + "\n")


def _pin_threads(n):
    import torch

    torch.set_num_threads(max(1, int(n)))
    torch.use_deterministic_algorithms(True)


def cmd_build_data(s):
    from ifmlab import data

    out = Path(s["out"])
    mnist_dir = data.bundled_mnist_dir() if s["mnist"] == "bundled" else Path(s["mnist"])
    if not mnist_dir.is_dir():
        raise InputError(f"MNIST directory not found: {mnist_dir}")
    if s["textures"] != "procedural" and not Path(s["textures"]).is_dir():
        raise InputError(f"texture directory not found: {s['textures']}")
    _echo(s, out / "build_config.json")
    train_set = data.load_mnist(mnist_dir, "train")
    test_set = data.load_mnist(mnist_dir, "t10k")
    texture_seed = s["seed"] if s["texture_seed"] is None else s["texture_seed"]
    bank = data.build_texture_bank(s["textures"], texture_seed)
    bundle = data.build_splits(train_set, test_set, bank, s["seed"], s["train_limit"])
    bundle.manifest["mnist_source"] = "bundled-10k-sample" if s["mnist"] == "bundled" else str(mnist_dir)
    data.save_bundle(bundle, out)
    print(f"wrote {out}: " + ", ".join(f"{k}={v}" for k, v in bundle.manifest["sizes"].items()))
    return 0


def cmd_train(s):
    from ifmlab.data import load_bundle
    from ifmlab.training import TrainConfig, train

    _pin_threads(s["threads"])
    config = TrainConfig(
        learning_rate=s["learning_rate"],
        momentum=s["momentum"],
        batch_size=s["batch_size"],
        epochs=s["epochs"],
        lambda_ifm=s["lambda_ifm"],
        pairs_per_image=s["pairs_per_image"],
        objective_form=s["objective_form"],
        update_mode=s["update_mode"],
        batchnorm=s["batchnorm"],
        data_seed=s["seed"],
        model_seed=s["seed"],
        sampling_seed=s["seed"],
    ).validate()
    if s["out"] is None:
        s["out"] = "runs/baseline" if config.lambda_ifm == 0 else "runs/ifm"
    out = Path(s["out"])
    _echo(s, out / "run_config.json")
    bundle = load_bundle(s["data"])
    result = train(config, bundle, out_dir=out)
    print(
        f"best digit epoch {result.best_digit_epoch}, best texture epoch {result.best_texture_epoch}; "
        f"artifacts in {out}"
    )
    return 0


def cmd_eval(s):
    from ifmlab.data import load_bundle
    from ifmlab.evaluation import evaluate, write_eval_csv

    if not s["ckpt"]:
        raise InputError("--ckpt is required")
    ckpt = Path(s["ckpt"])
    if not ckpt.exists():
        raise InputError(f"checkpoint not found: {ckpt}")
    bundle = load_bundle(s["data"])
    result = evaluate(ckpt, bundle.split(s["split"]), s["split"], s["name"])
    out = Path(s["out"]) if s["out"] else ckpt.parent / "eval.csv"
    write_eval_csv([result], out)
    row = result.csv_row()
    print(",".join(str(row[c]) for c in row))
    return 0


def _collect_csvs(patterns):
    paths = []
    for pattern in patterns:
        matches = sorted(glob.glob(str(pattern))) or [pattern]
        for m in matches:
            p = Path(m)
            if p.is_dir():
                p = p / "eval.csv"
            if not p.exists():
                raise InputError(f"no eval results at {p}")
            paths.append(p)
    return paths


def cmd_report(s):
    from ifmlab.evaluation import LITERATURE_ROWS, read_eval_csv, report, results_from_rows

    if not s["runs"]:
        raise InputError("--runs is required")
    results = []
    for path in _collect_csvs(s["runs"]):
        results += results_from_rows(read_eval_csv(path))
    rep = report(results, LITERATURE_ROWS if s["with_literature"] else None, s["with_paper_refs"])
    print(rep.table_text, end="")
    if s["out"]:
        out = Path(s["out"])
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.csv").write_text(rep.csv_text)
        (out / "report.txt").write_text(rep.table_text)
    return 0


def cmd_mi_sanity(s):
    from ifmlab.mi import estimate_mi_gaussian, gaussian_reference_jsd

    _pin_threads(1)
    rows = []
    print(f"{'rho':>6} {'estimate':>10} {'2*JSD ref':>10} {'true MI':>9}")
    for rho in s["rho"]:
        est = float(estimate_mi_gaussian(rho, s["samples"], s["steps"], s["seed"]).value)
        ref = gaussian_reference_jsd(rho)
        rows.append({"rho": rho, "estimate": est, "jsd2_reference": ref.jsd2, "true_mi": ref.mi})
        print(f"{rho:6.2f} {est:10.5f} {ref.jsd2:10.5f} {ref.mi:9.5f}")
    if s["out"]:
        out = Path(s["out"])
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(json.dumps(rows, indent=2) + "\n")
    return 0


COMMANDS = {
    "build-data": cmd_build_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "report": cmd_report,
    "mi-sanity": cmd_mi_sanity,
}


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose > 1 else logging.INFO if args.verbose else logging.WARNING,
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
    )
    try:
        settings = resolve(args)
        return COMMANDS[args.command](settings)
    except IFMError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
