#!/usr/bin/env python3

import argparse
import sys
import traceback
from contextlib import nullcontext
from pathlib import Path

from alignment import alignment_report
from dataio import DatasetError, SyntheticSpec, gen_synthetic, load_checkpoint, load_dataset
from gradcheck import run_suite
from log import logger
from metrics import evaluate_split
from model import ModelParams
from numerics import NumericError, Precision
from settings import GRADCHECK_COORDINATES, GRADCHECK_INSTANCES
from training import FINAL_CHECKPOINT, TrainConfig, fit
from utils import dumps_json

EXIT_OK = 0
EXIT_INVALID = 1
EXIT_NUMERIC = 2


class UsageParser(argparse.ArgumentParser):
    """argparse exits with 2 on bad usage; this CLI reserves 2 for numeric failures"""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INVALID, f"{self.prog}: error: {message}\n")


def parse(argv=None):
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-c", "--config", default=None, help="Train config (JSON) or, for gen, generator spec (JSON)")
    common.add_argument("--seed", type=int, default=None, help="Override the seed")
    common.add_argument("--f64", action="store_true", help="Run in float64")
    common.add_argument("--no-csf", dest="no_csf", action="store_true", help="Disable cross-modal semantic fusion")
    common.add_argument("--no-pti", dest="no_pti", action="store_true", help="Disable detector label features")
    common.add_argument("--no-tgr", dest="no_tgr", action="store_true", help="Disable the word graph reasoning")
    common.add_argument(
        "--literal-affinity", dest="literal_affinity", action="store_true", help="GCN mixes with R, not softmax(R)"
    )

    parser = UsageParser(prog="cpfean", description="Image-text matching with prominent-fragment fusion")
    commands = parser.add_subparsers(dest="command", required=True)

    gen = commands.add_parser("gen", parents=[common], help="Generate a synthetic dataset")
    gen.add_argument("-o", "--out", required=True, help="Dataset directory to write")

    train = commands.add_parser("train", parents=[common], help="Train from a config, or default settings with --dataset")
    train.add_argument("--dataset", default=None, help="Override the dataset of the config")
    train.add_argument("--output_dir", default=None, help="Override the output dir of the config")

    evaluate = commands.add_parser("eval", parents=[common], help="Evaluate a checkpoint")
    evaluate.add_argument("--checkpoint", default=None, help=f"Defaults to <output_dir>/{FINAL_CHECKPOINT}")
    evaluate.add_argument("--dataset", default=None, help="Override the dataset of the config")

    gradcheck = commands.add_parser("gradcheck", parents=[common], help="Run the finite-difference suite")
    gradcheck.add_argument("--instances", type=int, default=GRADCHECK_INSTANCES, help="Random instances per case")
    gradcheck.add_argument("--coordinates", type=int, default=GRADCHECK_COORDINATES, help="Coordinates per instance")

    align = commands.add_parser("align", parents=[common], help="Show which fragments a pair aligns")
    align.add_argument("--checkpoint", default=None, help=f"Defaults to <output_dir>/{FINAL_CHECKPOINT}")
    align.add_argument("--dataset", default=None, help="Override the dataset of the config")
    align.add_argument("--caption", required=True, help="Caption id")
    align.add_argument("--image", required=True, help="Image id")

    return parser.parse_args(argv)


def load_config(args) -> TrainConfig:
    if args.config is not None:
        config = TrainConfig.from_json(args.config)
    elif getattr(args, "dataset", None):
        # 没有配置文件时使用默认超参数
        config = TrainConfig()
    else:
        raise FileNotFoundError(f"{args.command} needs --config <train config> or --dataset <dir>")
    if args.seed is not None:
        config.seed = args.seed
    if getattr(args, "dataset", None):
        config.dataset = args.dataset
    if getattr(args, "output_dir", None):
        config.output_dir = args.output_dir
    config.ablate_csf = config.ablate_csf or args.no_csf
    config.ablate_pti = config.ablate_pti or args.no_pti
    config.ablate_tgr = config.ablate_tgr or args.no_tgr
    config.normalize_affinity = config.normalize_affinity and not args.literal_affinity
    config.validate()
    return config


def load_trained(args, config: TrainConfig):
    checkpoint = Path(args.checkpoint) if args.checkpoint else config.out / FINAL_CHECKPOINT
    if not checkpoint.is_file():
        raise FileNotFoundError(f"checkpoint not found: {checkpoint}")
    dataset = load_dataset(config.dataset)
    params = ModelParams.init(config.model_config(dataset.manifest), config.seed)
    load_checkpoint(checkpoint, params)
    return dataset, params


def cmd_gen(args) -> int:
    spec = SyntheticSpec.from_json(args.config) if args.config else SyntheticSpec()
    if args.seed is not None:
        spec.seed = args.seed
    root = gen_synthetic(spec, args.out)
    print(dumps_json({"dataset": str(root), "images": spec.num_images, "captions": spec.num_images * spec.captions_per_image}))
    return EXIT_OK


def cmd_train(args) -> int:
    config = load_config(args)
    dataset = load_dataset(config.dataset)
    _, history = fit(dataset, config)
    print(dumps_json(history[-1]))
    return EXIT_OK


def cmd_eval(args) -> int:
    config = load_config(args)
    dataset, params = load_trained(args, config)
    report = evaluate_split(dataset, params, config.flags())
    print(dumps_json(report.to_dict()))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    suite = run_suite(seed=args.seed or 0, instances=args.instances, coordinates=args.coordinates)
    print(dumps_json(suite.to_dict()))
    if not suite.passed:
        logger.error(f"Gradient check failed, max relative error {suite.max_rel_error:.3e}")
        return EXIT_NUMERIC
    return EXIT_OK


def cmd_align(args) -> int:
    config = load_config(args)
    dataset, params = load_trained(args, config)
    if args.image not in dataset.image_index:
        raise DatasetError(f"unknown image id {args.image}")
    try:
        cap = dataset.caption(args.caption)
    except KeyError:
        raise DatasetError(f"unknown caption id {args.caption}")
    report = alignment_report(cap, dataset.image(args.image), params, config.flags())
    print(dumps_json(report.to_dict()))
    return EXIT_OK


COMMANDS = {
    "gen": cmd_gen,
    "train": cmd_train,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
    "align": cmd_align,
}


def main(argv=None) -> int:
    try:
        args = parse(argv)
    except SystemExit as e:
        return e.code

    precision = Precision().use("float64") if args.f64 else nullcontext()
    try:
        with precision:
            return COMMANDS[args.command](args)
    except NumericError as e:
        logger.error(f"{args.command} failed: {e}")
        return EXIT_NUMERIC
    except (ValueError, OSError) as e:
        logger.error(f"{args.command} failed: {e}")
        return EXIT_INVALID
    except Exception as e:
        logger.error(f"{args.command} failed due to {e}")
        logger.error(traceback.format_exc())
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
