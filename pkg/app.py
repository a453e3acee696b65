"""
Command-line entry point for the DFDGCN traffic forecaster.

    python app.py train --config configs/toy_synthetic.conf
    python app.py eval --config configs/pems08.conf --checkpoint runs/pems08/checkpoint.dfdg
    python app.py ablate --config configs/ablation_synthetic.conf
    python app.py similarity --config configs/toy_synthetic.conf
    python app.py synth --config configs/toy_synthetic.conf --out data/synth
    python app.py gradcheck --config configs/toy_synthetic.conf
    python app.py report --results runs/ablation/ablation.csv

Exit codes: 0 success, 1 configuration / data / checkpoint error, 2 divergence
or numerical failure.
"""
import argparse
import logging
import sys
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np
import pandas as pd

from components.tables.metrics_table import create_metrics_table, render_metrics_table
from lib.ablation import run_ablation
from lib.checkpoint import load_checkpoint, save_checkpoint
from lib.config import RunConfig, env_threads, load_run_config, parse_config_text, setup_logging
from lib.error_calculator import ErrorCalculator, HistoricalInertia, MetricsReport, compute_metrics
from lib.errors import (
    CheckpointError,
    ConfigError,
    DataError,
    DfdgcnError,
    GraphError,
    NumericsError,
    TrainingDivergedError,
)
from lib.graphs import graph_label
from lib.model import DFDGCN, ModelParams, dead_parameters
from lib.pipeline import Experiment, load_dataset, prepare_experiment, train_config_from
from lib.similarity import similarity_matrices
from lib.synth_generator import save_dataset
from lib.trainer import fit, model_grad_check

logger = logging.getLogger("app")

CHECKPOINT_NAME = "checkpoint.dfdg"
RESOLVED_NAME = "resolved_config.conf"


def _overrides(args: argparse.Namespace) -> Dict[Tuple[str, str], str]:
    out = {}
    if args.seed is not None:
        out[("run", "seed")] = str(args.seed)
    if args.out:
        out[("run", "output_dir")] = args.out
    if args.dataset:
        out[("data", "values_path")] = args.dataset
        out[("data", "synthetic")] = "false"
    return out


def _resolve(args: argparse.Namespace) -> RunConfig:
    return load_run_config(args.config, _overrides(args))


def _output_dir(run_config: RunConfig) -> Path:
    out = Path(run_config.get("run", "output_dir"))
    out.mkdir(parents=True, exist_ok=True)
    return out


def _print_report(title: str, report: MetricsReport) -> None:
    print(title)
    print(render_metrics_table(create_metrics_table(report.to_frame(), group_by=None)))


def _evaluate(experiment: Experiment, model: Optional[DFDGCN], out: Path, prefix: str) -> MetricsReport:
    run_config = experiment.run_config
    scorer = ErrorCalculator(experiment.test, run_config.get("eval", "batch_size"))
    if model is None:
        predictor = HistoricalInertia(experiment.test, run_config.get("eval", "hi_rule"))
    else:
        def predictor(batch):
            return model.predict(batch, experiment.normalizer)
    pred, target = scorer.predictions(predictor)
    report = compute_metrics(pred, target)
    report.to_frame().to_csv(out / f"{prefix}_metrics.csv", index=False, float_format="%.6f")
    if run_config.get("eval", "dump_predictions"):
        ErrorCalculator.prediction_frame(pred, target).to_csv(
            out / f"{prefix}_predictions.csv", index=False, float_format="%.6f"
        )
    return report


def cmd_train(args: argparse.Namespace) -> int:
    run_config = _resolve(args)
    experiment = prepare_experiment(run_config, dataset_path=args.dataset)
    out = _output_dir(run_config)
    run_config.write(out / RESOLVED_NAME)

    if run_config.get("model", "kind") == "hi":
        save_checkpoint(out / CHECKPOINT_NAME, run_config.to_text(), ModelParams({}))
        report = _evaluate(experiment, None, out, "test")
        _print_report(f"HI ({run_config.get('eval', 'hi_rule')}) test metrics", report)
        return 0

    seed = run_config.get("run", "seed")
    model = DFDGCN(experiment.model_config, supports=experiment.supports, seed=seed)
    history_path = out / "history.csv"
    try:
        result = fit(model, experiment.train, experiment.val, experiment.normalizer, train_config_from(run_config))
    except TrainingDivergedError as e:
        e.history.to_csv(history_path, index=False, float_format="%.10g")
        save_checkpoint(out / CHECKPOINT_NAME, run_config.to_text(), e.params)
        raise
    result.history.to_csv(history_path, index=False, float_format="%.10g")
    save_checkpoint(out / CHECKPOINT_NAME, run_config.to_text(), result.params)
    report = _evaluate(experiment, model, out, "test")
    _print_report(f"DFDGCN {graph_label(experiment.model_config.graph_mode)} test metrics "
                  f"(best epoch {result.best_epoch})", report)
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    if args.checkpoint:
        config_text, params = load_checkpoint(args.checkpoint)
        run_config = parse_config_text(config_text)
        for (section, key), raw in _overrides(args).items():
            run_config.set(section, key, raw)
        run_config.validate()
    else:
        run_config = _resolve(args)
        params = None
        if run_config.get("model", "kind") != "hi":
            raise ConfigError("eval needs --checkpoint unless model.kind = hi")

    experiment = prepare_experiment(run_config, dataset_path=args.dataset)
    out = _output_dir(run_config)
    run_config.write(out / RESOLVED_NAME)
    if run_config.get("model", "kind") == "hi":
        report = _evaluate(experiment, None, out, "eval")
        _print_report(f"HI ({run_config.get('eval', 'hi_rule')}) test metrics", report)
        return 0

    expected = DFDGCN(experiment.model_config, supports=experiment.supports).params
    for name in expected:
        if name not in params or params[name].shape != expected[name].shape:
            found = params[name].shape if name in params else "missing"
            raise DataError(f"checkpoint array {name}: expected shape {expected[name].shape}, found {found}")
    unknown = sorted(set(params.names()) - set(expected.names()))
    if unknown:
        raise DataError(f"checkpoint carries arrays unknown to the configured network: {', '.join(unknown)}")
    model = DFDGCN(experiment.model_config, params=params, supports=experiment.supports)
    report = _evaluate(experiment, model, out, "eval")
    _print_report(f"DFDGCN {graph_label(experiment.model_config.graph_mode)} test metrics", report)
    return 0


def cmd_ablate(args: argparse.Namespace) -> int:
    run_config = _resolve(args)
    experiment = prepare_experiment(run_config, dataset_path=args.dataset)
    out = _output_dir(run_config)
    run_config.write(out / RESOLVED_NAME)
    seed = run_config.get("run", "seed")
    seeds = [seed + i for i in range(run_config.get("run", "ablation_seeds"))]
    workers = run_config.get("run", "workers")
    threads = env_threads()
    if threads is not None:
        workers = min(workers, threads) if ("run", "workers") in run_config.explicit else threads
    results, _ = run_ablation(experiment, run_config.get("run", "ablation_grid"), seeds,
                              train_config_from(run_config), workers=workers, out_dir=out)
    print(render_metrics_table(create_metrics_table(results)))
    return 0


def cmd_similarity(args: argparse.Namespace) -> int:
    run_config = _resolve(args)
    dataset = load_dataset(run_config, args.dataset)
    out = _output_dir(run_config)
    run_config.write(out / RESOLVED_NAME)
    time_sim, freq_sim = similarity_matrices(
        dataset.values[:, :, 0], run_config.get("run", "similarity_start"),
        run_config.get("run", "similarity_length"), dataset.sensor_ids,
    )
    time_sim.to_csv(out / "similarity_time.csv", float_format="%.12g")
    freq_sim.to_csv(out / "similarity_freq.csv", float_format="%.12g")
    print(f"Wrote {out / 'similarity_time.csv'} and {out / 'similarity_freq.csv'}")
    return 0


def cmd_synth(args: argparse.Namespace) -> int:
    run_config = _resolve(args)
    run_config.set("data", "synthetic", "true")
    dataset = load_dataset(run_config)
    out = _output_dir(run_config)
    run_config.write(out / RESOLVED_NAME)
    written = save_dataset(dataset, out)
    for label, path in written.items():
        print(f"{label}: {path}")
    return 0


def cmd_gradcheck(args: argparse.Namespace) -> int:
    run_config = _resolve(args)
    experiment = prepare_experiment(run_config, dataset_path=args.dataset)
    out = _output_dir(run_config)
    run_config.write(out / RESOLVED_NAME)
    model = DFDGCN(experiment.model_config, supports=experiment.supports, seed=run_config.get("run", "seed"))
    batch = experiment.train.batch(np.arange(min(4, len(experiment.train))))
    _, grads = model.loss_and_grads(batch, experiment.normalizer)
    dead = dead_parameters(grads)
    if dead:
        print(f"Parameters with identically zero gradient: {', '.join(dead)}")
    report = model_grad_check(model, batch, experiment.normalizer, seed=run_config.get("run", "seed"))
    rows = [vars(entry) for entry in report.worst]
    pd.DataFrame(rows, columns=["name", "index", "analytic", "numeric", "rel_error"]).to_csv(
        out / "gradcheck_worst.csv", index=False
    )
    status = "passed" if report.passed else "FAILED"
    print(f"Gradient check {status}: {report.checked} entries, {report.skipped_kinks} skipped at kinks, "
          f"max relative error {report.max_rel_error:.3g}")
    for entry in report.failures[:10]:
        print(f"  {entry.name}[{entry.index}]: analytic {entry.analytic:.6g} numeric {entry.numeric:.6g}")
    return 0 if report.passed else 2


def cmd_report(args: argparse.Namespace) -> int:
    run_config = _resolve(args)
    out = _output_dir(run_config)
    run_config.write(out / RESOLVED_NAME)
    if args.results:
        paths = [Path(args.results)]
    else:
        paths = sorted(out.glob("ablation.csv")) + sorted(out.glob("*_metrics.csv"))
    if not paths:
        raise DataError("no results CSV found; pass --results PATH")
    for path in paths:
        if not path.exists():
            raise DataError(f"results file not found: {path}")
        print(f"== {path}")
        print(render_metrics_table(create_metrics_table(pd.read_csv(path))))
    return 0


COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "similarity": cmd_similarity,
    "synth": cmd_synth,
    "gradcheck": cmd_gradcheck,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description="DFDGCN traffic forecasting")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        cmd = sub.add_parser(name)
        cmd.add_argument("--config", type=str, default=None, help="Run configuration (INI)")
        cmd.add_argument("--seed", type=int, default=None, help="Override run.seed")
        cmd.add_argument("--out", type=str, default=None, help="Override run.output_dir")
        cmd.add_argument("--dataset", type=str, default=None,
                         help="Values file, or a directory written by the synth command")
        cmd.add_argument("--checkpoint", type=str, default=None, help="Checkpoint to evaluate")
        if name == "report":
            cmd.add_argument("--results", type=str, default=None, help="Metrics or ablation CSV")
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        setup_logging()
        return COMMANDS[args.command](args)
    except TrainingDivergedError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (ConfigError, DataError, GraphError, CheckpointError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except NumericsError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1 if "shape mismatch" in str(e) else 2
    except DfdgcnError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
