"""``logictree`` command-line entry point.

Exit codes: 0 ok, 2 usage or configuration error, 3 data error, 4 divergence.
"""

import argparse
import json
import logging
import math
import os
import sys
import tomllib
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import numpy as np
from pydantic import ValidationError

from .schemas.config import TrainConfig
from .schemas.report import RunManifest
from .services.checkpoint import TrainedModel
from .services.errors import (
    ConfigError,
    DatasetError,
    DivergenceError,
    EvaluationError,
    LogicTreeError,
)
from .services.evaluation import build_report, prediction_rows, write_predictions_csv
from .services.events import EventSequence, load_dataset, parse_dataset, save_dataset, split_dataset
from .services.remote import RemoteLogprobClient
from .services.export import sample_explanations, write_trees
from .services.synthetic import generate_dataset
from .services.tlpp import load_ground_truth
from .services.trainer import train
from .services.utils import configure_logging, content_hash, utc_now, write_json_atomic, write_json_once

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_DIVERGENCE = 4

PRIOR_CACHE = "prior_cache.json"


class UsageError(LogicTreeError):
    pass


# -- configuration ---------------------------------------------------------------


def _parse_value(raw: str) -> Any:
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def apply_overrides(data: Dict[str, Any], overrides: Sequence[str]) -> Dict[str, Any]:
    """Apply ``key=value`` overrides; dotted keys reach nested sections."""
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, raw = item.split("=", 1)
        parts = key.strip().split(".")
        node = data
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {key!r} descends into a non-section")
        node[parts[-1]] = _parse_value(raw.strip())
    return data


def load_config(path: Optional[str | Path] = None, overrides: Sequence[str] = ()) -> TrainConfig:
    """TrainConfig from a TOML or JSON file plus overrides, validated once at the end.

    Raises:
        ConfigError: On unreadable files or invalid values
    """
    data: Dict[str, Any] = {}
    if path is not None:
        path = Path(path)
        try:
            text = path.read_text(encoding="utf-8")
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e
        try:
            data = tomllib.loads(text) if path.suffix == ".toml" else json.loads(text)
        except (tomllib.TOMLDecodeError, json.JSONDecodeError) as e:
            raise ConfigError(f"cannot parse config {path}: {e}") from e
    data = apply_overrides(data, overrides)
    try:
        return TrainConfig.model_validate(data)
    except ValidationError as e:
        raise ConfigError(f"invalid configuration: {e}") from e


def _require_file(path: str | Path, what: str) -> Path:
    path = Path(path)
    if not path.is_file():
        raise UsageError(f"{what} not found: {path}")
    return path


# -- commands ----------------------------------------------------------------------


def cmd_gen(args: argparse.Namespace) -> int:
    if args.horizon is not None and not (math.isfinite(args.horizon) and args.horizon > 0):
        raise UsageError(f"--horizon must be a positive finite number, got {args.horizon}")
    if args.n < 1:
        raise UsageError(f"--n must be at least 1, got {args.n}")
    model_file = _require_file(args.model, "ground-truth model")
    truth = load_ground_truth(model_file)
    dataset = generate_dataset(truth, args.n, np.random.default_rng(args.seed), horizon=args.horizon)
    if args.split:
        dataset = split_dataset(dataset, args.seed)
    save_dataset(dataset, args.out)
    logger.info(f"Wrote {len(dataset.sequences)} sequences to {args.out}")
    return EXIT_OK


def cmd_split(args: argparse.Namespace) -> int:
    dataset = load_dataset(_require_file(args.data, "dataset"))
    tagged = split_dataset(dataset, args.seed)
    save_dataset(tagged, args.out)
    logger.info(f"Split counts: {tagged.split_counts()}")
    return EXIT_OK


def cmd_train(args: argparse.Namespace) -> int:
    data_path = _require_file(args.data, "dataset")
    config_path = _require_file(args.config, "config") if args.config else None
    resume_path = _require_file(args.resume, "checkpoint") if args.resume else None

    overrides = list(args.set or [])
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    if args.threads is not None:
        overrides.append(f"threads={args.threads}")
    config = load_config(config_path, overrides)
    endpoint = os.environ.get("LOGIC_LM_ENDPOINT")
    if config.prior == "remote" and not endpoint:
        raise ConfigError('prior = "remote" needs LOGIC_LM_ENDPOINT set to the scoring endpoint')

    dataset = load_dataset(data_path)
    if not any(s.split for s in dataset.sequences):
        logger.info("Dataset carries no split tags; splitting 80/10/10")
        dataset = split_dataset(dataset, config.seed)
    resume = TrainedModel.load(resume_path) if resume_path else None

    out = Path(args.out)
    inputs = [str(p) for p in (data_path, config_path, resume_path) if p is not None]
    manifest = RunManifest(
        command="train",
        config=config,
        seed=config.seed,
        input_hash=content_hash(inputs, config.model_dump(mode="json")),
        inputs=inputs,
        outputs={
            "best": str(out / "best.json"),
            "last": str(out / "last.json"),
            "subtb": str(out / "subtb.csv"),
            "nll": str(out / "nll.csv"),
            **({"prior_cache": str(out / PRIOR_CACHE)} if config.prior == "remote" else {}),
        },
        started_at=utc_now(),
    )
    try:
        write_json_once(out / "manifest.json", manifest.model_dump(mode="json"))
    except FileExistsError as e:
        raise UsageError(f"run directory {out} already holds a manifest; choose a new --out") from e

    client = None
    if config.prior == "remote":
        client = RemoteLogprobClient(endpoint, os.environ.get("LOGIC_LM_TOKEN"), cache_path=out / PRIOR_CACHE)
    try:
        model = train(dataset, config, out_dir=out, resume=resume, prior_client=client)
    finally:
        if client is not None:
            client.close()
    logger.info(f"Training finished at step {model.step}; best checkpoint in {out / 'best.json'}")
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    ckpt = _require_file(args.checkpoint, "checkpoint")
    data_path = _require_file(args.data, "dataset")
    model = TrainedModel.load(ckpt)
    dataset = load_dataset(data_path)
    sequences = dataset.by_split(args.split) if args.split != "all" else list(dataset.sequences)
    if not sequences:
        raise EvaluationError(f"no sequences in split {args.split!r}")
    n_samples = args.n_samples or model.config.eval_samples
    seeds = args.seeds if args.seeds else [args.seed]
    report, records = build_report(model, sequences, dataset.by_split("train"), n_samples, seeds, args.split)

    doc = report.model_dump(mode="json")
    if args.predictions:
        write_predictions_csv(args.predictions, prediction_rows(records, model))
    if args.out:
        write_json_atomic(args.out, doc)
    else:
        print(json.dumps(doc, indent=2))
    return EXIT_OK


def _sequence_for_sampling(args: argparse.Namespace, model: TrainedModel) -> EventSequence:
    if args.sequence_file:
        # A one-sequence dataset file written against the model's vocabulary.
        dataset = parse_dataset(_require_file(args.sequence_file, "sequence file").read_text(encoding="utf-8"))
        if dataset.vocabulary.names != model.vocabulary.names:
            raise DatasetError("bad-vocabulary", "sequence file vocabulary differs from the model's", "vocabulary")
        if len(dataset.sequences) != 1:
            raise DatasetError("schema", f"expected one sequence, got {len(dataset.sequences)}", "sequences")
        return dataset.sequences[0]
    if not (args.data and args.seq_id is not None):
        raise UsageError("sample needs --sequence-file or both --data and --seq-id")
    dataset = load_dataset(_require_file(args.data, "dataset"))
    try:
        return dataset.find(args.seq_id)
    except KeyError as e:
        raise DatasetError("unknown-sequence", f"no sequence with id {args.seq_id!r}", "sequences") from e


def cmd_sample(args: argparse.Namespace) -> int:
    model = TrainedModel.load(_require_file(args.checkpoint, "checkpoint"))
    X = _sequence_for_sampling(args, model)
    label = X.label if args.conditioned else None
    samples = sample_explanations(model, X, args.n, np.random.default_rng(args.seed), label=label)
    write_trees(samples, model, args.out, args.format, seq_id=X.seq_id)
    return EXIT_OK


def cmd_serve(args: argparse.Namespace) -> int:
    import uvicorn

    os.environ["MODEL_CHECKPOINT"] = str(_require_file(args.checkpoint, "checkpoint"))
    uvicorn.run("src.main:app", host=args.host, port=args.port)
    return EXIT_OK


# -- parser ------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="logictree", description="Learn latent logic trees for event sequences.")
    parser.add_argument("--log-dir", default=None, help="directory for the rotating app.log")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="simulate a synthetic dataset from a ground-truth model file")
    p.add_argument("--model", required=True)
    p.add_argument("--n", type=int, default=200)
    p.add_argument("--horizon", type=float, default=None, help="defaults to the model file's horizon")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--split", action="store_true", help="tag sequences train/dev/test 80/10/10")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("split", help="tag a dataset train/dev/test 80/10/10")
    p.add_argument("--data", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("train", help="run amortized EM")
    p.add_argument("--data", required=True)
    p.add_argument("--config", default=None, help="TOML or JSON file with TrainConfig fields")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config field")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--threads", type=int, default=None)
    p.add_argument("--resume", default=None, help="checkpoint to continue from")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="metrics report for a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test", choices=["train", "dev", "test", "all"])
    p.add_argument("--n-samples", type=int, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--seeds", type=int, nargs="+", default=None, help="report mean and std over several seeds")
    p.add_argument("--out", default=None)
    p.add_argument("--predictions", default=None, help="CSV of per-sequence rankings")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sample", help="sample and export explanation trees")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", default=None)
    p.add_argument("--seq-id", default=None)
    p.add_argument("--sequence-file", default=None)
    p.add_argument("--n", type=int, default=10)
    p.add_argument("--format", choices=["dot", "json"], default="json")
    p.add_argument("--conditioned", action="store_true", help="condition on the sequence label (one tree rooted at it)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("serve", help="serve a checkpoint over HTTP")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8000)
    p.set_defaults(func=cmd_serve)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_USAGE if e.code else EXIT_OK
    configure_logging(args.log_dir, logging.DEBUG if args.verbose else logging.INFO)

    try:
        return args.func(args)
    except (UsageError, ConfigError) as e:
        logger.error(f"{args.command}: {e}")
        return EXIT_USAGE
    except DivergenceError as e:
        logger.error(f"{args.command}: {e}; diagnostics: {e.diagnostics}", exc_info=True)
        return EXIT_DIVERGENCE
    except LogicTreeError as e:
        logger.error(f"{args.command}: {e}", exc_info=True)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
