"""
Command-line entry point for the mixed-resolution channel estimation experiments

Subcommands: gen-data, train-cgan, train-lstm, run-esprit, evaluate, report,
show-config, runs (list/show/delete) and profile (list/show/create/delete/
activate/import). Exit codes: 0 ok, 1 other failure, 2 configuration error,
3 numerical failure.
"""
import argparse
import json
import logging
import os
import sys
from typing import List, Optional

from dotenv import load_dotenv

import evaluation
from config_manager import (LOG_LEVEL_ENV, PRESETS, ConfigManager, ExperimentConfig, config_to_dict,
                            load_experiment_config, validate_config)
from database import ResultsStore
from errors import ConfigError, NumericalError, StageError

# Load environment variables
load_dotenv()

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3


def exit_code_for(error: BaseException) -> int:
    cause = error.cause if isinstance(error, StageError) and error.cause is not None else error
    if isinstance(cause, ConfigError):
        return EXIT_CONFIG
    if isinstance(cause, NumericalError):
        return EXIT_NUMERICAL
    return EXIT_FAILURE


def load_config(args: argparse.Namespace) -> ExperimentConfig:
    """--config-file (standalone document) wins over --config/--profile"""
    if args.config_file:
        cfg = load_experiment_config(args.config_file)
    else:
        cfg = ConfigManager(args.config).resolve(args.profile)
    if args.output_dir:
        cfg.output_dir = args.output_dir
    if args.n_jobs is not None:
        cfg.n_jobs = args.n_jobs
    if args.results_db:
        cfg.results_db = args.results_db
    issues = validate_config(cfg)
    if issues:
        raise ConfigError(f"invalid configuration '{cfg.name}': {'; '.join(issues)}")
    return cfg


def _prepared(cfg: ExperimentConfig, force: bool = False):
    with evaluation.stage("generate"):
        samples = evaluation.build_samples(cfg, evaluation.generate_datasets(cfg, force))
        return samples, evaluation.split_samples(samples, cfg)


def cmd_gen_data(cfg: ExperimentConfig, args: argparse.Namespace) -> int:
    with evaluation.stage("generate"):
        datasets = evaluation.generate_datasets(cfg, force=args.force)
    for k, (spec, data) in enumerate(zip(cfg.datasets, datasets)):
        print(f"dataset{k + 1}: {len(data)} samples, {spec.num_paths} MPCs -> "
              f"{evaluation.dataset_path(cfg.output_path(), k)}")
    return EXIT_OK


def cmd_train_cgan(cfg: ExperimentConfig, args: argparse.Namespace) -> int:
    _, splits = _prepared(cfg)
    with evaluation.stage("train-cgan"):
        trained = evaluation.train_generator_stage(cfg, splits)
    last = trained.history.iloc[-1]
    print(f"cGAN trained for {cfg.cgan.epochs} epochs on {len(splits.gan_train)} samples: "
          f"loss_D={last['loss_D']:.4f} loss_G={last['loss_G']:.4f} l2={last['l2_term']:.4f} "
          f"val_nse={last['val_nse']:.4g}")
    return EXIT_OK


def cmd_train_lstm(cfg: ExperimentConfig, args: argparse.Namespace) -> int:
    _, splits = _prepared(cfg)
    with evaluation.stage("train-cgan"):
        net, _ = evaluation.load_or_train_generator(cfg, splits)
        generator = evaluation.generator_stage(net, cfg.preprocess.scale_factor)
        generated = generator(splits.lstm_train)
        generated_test = generator(splits.test) if splits.validation else []
    with evaluation.stage("train-lstm"):
        seq = evaluation.mixing_sequence(cfg)
        sequences = evaluation.lstm_sequences(cfg, splits.lstm_train, generated, seq)
        val_sequences = evaluation.validation_sequences(cfg, splits, generated_test, seq)
        trained = evaluation.train_phase_stage(cfg, sequences, val_sequences, evaluation.generator_fingerprint(cfg))
    last = trained.history.iloc[-1]
    print(f"LSTM trained for {cfg.lstm.epochs} epochs on {len(sequences)} sequences: "
          f"train_loss={last['train_loss']:.5f} val_loss={last['val_loss']:.5f}")
    return EXIT_OK


def cmd_run_esprit(cfg: ExperimentConfig, args: argparse.Namespace) -> int:
    samples, splits = _prepared(cfg)
    targets = samples if args.all else splits.test
    with evaluation.stage("esprit"):
        estimates = evaluation.esprit_stage(cfg, targets)
    failed = sum(e.failed for e in estimates)
    print(f"ESPRIT estimated {len(estimates)} samples ({failed} failed) -> "
          f"{cfg.output_path() / 'esprit_estimates.csv'}")
    return EXIT_OK


def cmd_evaluate(cfg: ExperimentConfig, args: argparse.Namespace) -> int:
    report = evaluation.run_pipeline(cfg, retrain=args.retrain)
    print(evaluation.format_summary(report))
    print(f"Report written to {cfg.output_path()}")
    return EXIT_OK


def cmd_report(cfg: ExperimentConfig, args: argparse.Namespace) -> int:
    directory = args.dir or cfg.output_path()
    with evaluation.stage("report"):
        report = evaluation.load_report(directory)
        evaluation.export_report(report, directory)
    print(evaluation.format_summary(report))
    return EXIT_OK


def cmd_show_config(cfg: ExperimentConfig, args: argparse.Namespace) -> int:
    if args.export and not args.config_file:
        manager = ConfigManager(args.config)
        manager.export_profile(args.profile or manager.active_profile_name, args.export)
        print(f"Exported profile to {args.export}")
        return EXIT_OK
    document = json.dumps(config_to_dict(cfg), indent=2, sort_keys=True)
    if args.export:
        with open(args.export, "w", encoding="utf-8") as f:
            f.write(document + "\n")
        print(f"Exported configuration to {args.export}")
    else:
        print(document)
    return EXIT_OK


def cmd_runs(cfg: ExperimentConfig, args: argparse.Namespace) -> int:
    db_path = args.results_db or cfg.results_db
    if not db_path:
        raise ConfigError("no results database: pass --results-db or set results_db in the profile")
    store = ResultsStore(db_path)

    if args.action == "list":
        runs = store.list_runs(args.name)
        if not runs:
            print(f"No runs recorded in {db_path}")
        for run in runs:
            print(f"#{run['id']:<5}{run['name']:<20}{run['created_at']:<28}"
                  f"{run['num_test_samples']:>6} test samples  {run['output_dir']}")
    elif args.action == "show":
        config = store.get_config(args.run_id)
        results = store.get_sample_results(args.run_id)
        print(f"Run #{args.run_id}: {config.get('name')} -> {config.get('output_dir')}")
        for method, values in results.groupby("method", sort=True)["nse"]:
            print(f"  {method:<16}{len(values):>6} samples  median NSE {values.median():.4e}")
        for network in ("cgan", "lstm"):
            history = store.get_training_history(args.run_id, network)
            if not history.empty:
                print(f"  {network} history: {int(history['epoch'].max())} epochs")
        if args.json:
            print(json.dumps(config, indent=2, sort_keys=True))
    elif args.action == "delete":
        if not store.delete_run(args.run_id):
            raise ValueError(f"Run {args.run_id} not found")
        print(f"Deleted run #{args.run_id}")
    return EXIT_OK


def cmd_profile(cfg: Optional[ExperimentConfig], args: argparse.Namespace) -> int:
    manager = ConfigManager(args.config)

    if args.action == "list":
        for name in manager.list_profiles():
            marker = "*" if name == manager.active_profile_name else " "
            print(f"{marker} {name}")
    elif args.action == "show":
        print(json.dumps(manager.get_config_summary(args.name), indent=2, sort_keys=True))
    elif args.action == "create":
        created = manager.create_profile(args.name, args.preset, output_dir=f"runs/{args.name}")
        print(f"Created profile {args.name} from preset {args.preset} -> {created.output_path()}")
    elif args.action == "delete":
        manager.delete_profile(args.name)
        print(f"Deleted profile {args.name}")
    elif args.action == "activate":
        manager.set_active_profile(args.name)
        print(f"Active profile: {args.name}")
    elif args.action == "import":
        name = manager.import_profile(args.path, args.new_name)
        print(f"Imported profile {name}")
    return EXIT_OK


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train-cgan": cmd_train_cgan,
    "train-lstm": cmd_train_lstm,
    "run-esprit": cmd_run_esprit,
    "evaluate": cmd_evaluate,
    "report": cmd_report,
    "show-config": cmd_show_config,
    "runs": cmd_runs,
    "profile": cmd_profile,
}
# commands that work on the profiles file itself, so no profile is resolved first
CONFIG_FREE_COMMANDS = {"profile"}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description="Two-step ML channel estimation with an ESPRIT baseline")
    parser.add_argument("-c", "--config", help="profiles file (default: experiment_config.json next to app.py)")
    parser.add_argument("-p", "--profile", help="profile name (default: the file's active profile)")
    parser.add_argument("--config-file", help="standalone JSON experiment document (overrides --config/--profile)")
    parser.add_argument("-o", "--output-dir", help="override the profile's output directory")
    parser.add_argument("-j", "--n-jobs", type=int, help="joblib workers for data generation and ESPRIT")
    parser.add_argument("--results-db", help="SQLite file that records evaluated runs")
    parser.add_argument("--log-level", default=os.environ.get(LOG_LEVEL_ENV, "INFO"),
                        help="logging level (default: $MRCE_LOG_LEVEL or INFO)")

    sub = parser.add_subparsers(dest="command", required=True)
    gen = sub.add_parser("gen-data", help="generate (or reuse) the synthetic datasets")
    gen.add_argument("--force", action="store_true", help="regenerate even if dataset files exist")
    sub.add_parser("train-cgan", help="train the generator and write its checkpoint")
    sub.add_parser("train-lstm", help="train the phase refiner on cGAN outputs")
    esp = sub.add_parser("run-esprit", help="run the ESPRIT baseline and export estimates")
    esp.add_argument("--all", action="store_true", help="estimate every sample, not only the test split")
    ev = sub.add_parser("evaluate", help="run the whole pipeline and write the NSE report")
    ev.add_argument("--retrain", action="store_true", help="ignore existing checkpoints")
    rep = sub.add_parser("report", help="rebuild CDFs and summary from nse_per_sample.csv")
    rep.add_argument("--dir", help="report directory (default: the profile's output directory)")
    show = sub.add_parser("show-config", help="print the resolved configuration summary")
    show.add_argument("--export", metavar="PATH", help="write the resolved profile as JSON")

    runs = sub.add_parser("runs", help="inspect or delete runs recorded in the results database")
    runs_sub = runs.add_subparsers(dest="action", required=True)
    runs_list = runs_sub.add_parser("list", help="list recorded runs")
    runs_list.add_argument("--name", help="only runs of this experiment name")
    runs_show = runs_sub.add_parser("show", help="per-method medians and training length of one run")
    runs_show.add_argument("run_id", type=int)
    runs_show.add_argument("--json", action="store_true", help="also print the run's configuration")
    runs_delete = runs_sub.add_parser("delete", help="remove a run and its results")
    runs_delete.add_argument("run_id", type=int)

    prof = sub.add_parser("profile", help="manage profiles in the profiles file")
    prof_sub = prof.add_subparsers(dest="action", required=True)
    prof_sub.add_parser("list", help="list profiles; the active one is starred")
    prof_show = prof_sub.add_parser("show", help="summary of a resolved profile")
    prof_show.add_argument("name", nargs="?", help="profile name (default: the active profile)")
    prof_create = prof_sub.add_parser("create", help="add a profile on top of a preset")
    prof_create.add_argument("name")
    prof_create.add_argument("--preset", default="desk", choices=sorted(PRESETS))
    for action, text in (("delete", "remove a profile"), ("activate", "make a profile the active one")):
        prof_sub.add_parser(action, help=text).add_argument("name")
    prof_import = prof_sub.add_parser("import", help="add a profile from a JSON document")
    prof_import.add_argument("path")
    prof_import.add_argument("--name", dest="new_name", help="profile name (default: the document's name)")
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.INFO),
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        cfg = None if args.command in CONFIG_FREE_COMMANDS else load_config(args)
        return COMMANDS[args.command](cfg, args)
    except (ConfigError, NumericalError, StageError, OSError, ValueError) as e:
        print(f"Error: {e}", file=sys.stderr)
        return exit_code_for(e)


if __name__ == "__main__":
    sys.exit(main())
