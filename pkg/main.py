#!/usr/bin/env python3
"""Command-line entry point"""

import argparse
import logging
import sys

import numpy as np
import pandas as pd
import sentry_sdk

from boundary import Spending, Stopping, solve_boundaries
from harness import (
    DesignSpec,
    ExperimentSpec,
    OcRow,
    PlotRow,
    RotationRow,
    emit_csv,
    plot_data,
    run_bootstrap,
    run_oc_experiment,
    run_rotation_experiment,
)
from scenario import load_csv
from seqtest import run_two_stage, select_stage1
from sentry_config import SENTRY_ENABLED, initialize_sentry
from utils import get_configs, load_json_file

logging.basicConfig(
    level=logging.INFO, format="%(asctime)s - %(name)s - %(levelname)s - %(message)s"
)
logger = logging.getLogger("incremental_roc.cli")


def _write_frame(records, path):
    frame = pd.DataFrame(records)
    target = sys.stdout if path in (None, "-") else path
    frame.to_csv(target, index=False, float_format="%.6g", na_rep="nan", encoding="utf-8")


def load_spec(args, experiment_kind) -> ExperimentSpec:
    """
    Build the experiment specification: explicit flags override the config
    file, which overrides environment defaults.
    """
    values = load_json_file(args.config) if getattr(args, "config", None) else {}
    values["experiment_kind"] = experiment_kind
    spec = ExperimentSpec.from_dict(values)

    flag_fields = {
        "scenario_name": "scenario",
        "replicates": "replicates",
        "parallel_workers": "workers",
        "master_seed": "seed",
        "output_path": "output",
        "V": "units",
        "kappa": "kappa",
        "gammas": "gamma",
        "operating_replicates": "operating_replicates",
        "panel_path": "panel",
        "label_column": "label_column",
        "established_columns": "established",
        "candidate_columns": "candidates",
        "useful_columns": "useful",
        "info_fracs": "info_frac",
    }
    for field_name, flag in flag_fields.items():
        value = getattr(args, flag, None)
        if value is not None:
            setattr(spec, field_name, value)
    if getattr(args, "fix_established", False):
        spec.fix_established = True
    if getattr(args, "log_transform", False):
        spec.log_transform = True

    for field_name, flag in (("t", "t"), ("delta0", "delta0"), ("alpha", "alpha")):
        value = getattr(args, flag, None)
        if value is not None:
            setattr(spec.test, field_name, value)
    if getattr(args, "single_panel", False):
        spec.test.single_panel = True
    if getattr(args, "spending", None) or getattr(args, "stopping", None):
        spendings = args.spending or [Spending.OBF.value]
        stoppings = args.stopping or [Stopping.BOTH.value]
        spec.designs = [
            DesignSpec(spending=Spending(sp), stopping=Stopping(st), resolve=args.resolve)
            for sp in spendings
            for st in stoppings
        ]
    return spec


def cmd_boundaries(args):
    boundaries = solve_boundaries(
        args.alpha, args.info_frac, Spending(args.spending), Stopping(args.stopping), args.resolve
    )
    _write_frame([boundaries.to_row()], args.output)


def cmd_simulate_oc(args):
    spec = load_spec(args, "oc_table")
    rows = run_oc_experiment(spec)
    emit_csv(rows, spec.output_path, OcRow)


def _emit_rotation(rows, spec, args):
    if args.plot_data:
        emit_csv(plot_data(rows), spec.output_path, PlotRow)
    else:
        emit_csv(rows, spec.output_path, RotationRow)


def cmd_rotate_sim(args):
    spec = load_spec(args, "rotation_compare")
    rows = run_rotation_experiment(spec, methods=("simulated", "default"))
    _emit_rotation(rows, spec, args)


def cmd_rotate_analytic(args):
    spec = load_spec(args, "rotation_compare")
    rows = run_rotation_experiment(spec, methods=("analytic",))
    _emit_rotation(rows, spec, args)


def cmd_bootstrap(args):
    spec = load_spec(args, "bootstrap")
    if spec.panel_path is None:
        raise SystemExit("bootstrap requires --panel or panel_path in the config file.")
    markers = list(dict.fromkeys(spec.established_columns + spec.candidate_columns))
    panel = load_csv(spec.panel_path, spec.label_column, markers, spec.log_transform)
    rows = run_bootstrap(panel, spec)
    _emit_rotation(rows, spec, args)


def cmd_test(args):
    spec = load_spec(args, "oc_table")
    markers = args.markers
    panel = load_csv(args.panel, args.label_column, markers, args.log_transform)
    if args.info_frac:
        spec.test.stage1_fraction = args.info_frac[0]
    spec.test.new_marker_columns = [markers.index(name) for name in args.new_markers]
    if args.spending or args.stopping:
        design = spec.designs[0]
        spec.test.spending, spec.test.stopping = design.spending, design.stopping
        spec.test.resolve = design.resolve
    config = spec.test.build()
    config.validate(panel.n_markers)

    if args.stage1_ids:
        stage1_ids = np.loadtxt(args.stage1_ids, dtype=int, ndmin=1)
    else:
        stage1_ids = select_stage1(
            panel.labels, config.stage1_fraction, np.random.default_rng(spec.master_seed)
        )
    result = run_two_stage(panel, stage1_ids, config)
    records = [result.stage1.to_row()]
    if result.stage2 is not None:
        records.append(result.stage2.to_row())
    _write_frame(records, args.output)


def _add_common(parser):
    parser.add_argument("--config", help="JSON experiment configuration file")
    parser.add_argument("--scenario", help="bundled scenario name")
    parser.add_argument("--replicates", type=int)
    parser.add_argument("--workers", type=int)
    parser.add_argument("--seed", type=int, help="master seed")
    parser.add_argument("--output", help="output CSV path, '-' for stdout")
    parser.add_argument("--t", type=float)
    parser.add_argument("--delta0", type=float)
    parser.add_argument("--alpha", type=float)
    parser.add_argument("--spending", action="append", choices=[s.value for s in Spending])
    parser.add_argument("--stopping", action="append", choices=[s.value for s in Stopping])
    parser.add_argument("--resolve", action="store_true")
    parser.add_argument("--single-panel", action="store_true")


def _add_rotation(parser):
    parser.add_argument("--units", type=int, help="specimen units V per participant")
    parser.add_argument("--kappa", type=int)
    parser.add_argument("--gamma", type=float, action="append")
    parser.add_argument("--operating-replicates", type=int)
    parser.add_argument("--fix-established", action="store_true")
    parser.add_argument("--plot-data", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        description="Two-stage testing of incremental ROC(t) and group rotation."
    )
    subparsers = parser.add_subparsers(dest="command", required=True)

    boundaries = subparsers.add_parser("boundaries", help="solve two-stage boundaries")
    boundaries.add_argument("--alpha", type=float, default=0.05)
    boundaries.add_argument("--lambda", dest="info_frac", type=float, default=0.5)
    boundaries.add_argument("--spending", choices=[s.value for s in Spending], default="obf")
    boundaries.add_argument("--stopping", choices=[s.value for s in Stopping], default="both")
    boundaries.add_argument("--resolve", action="store_true")
    boundaries.add_argument("--output", default="-")
    boundaries.set_defaults(handler=cmd_boundaries)

    simulate = subparsers.add_parser("simulate-oc", help="operating-characteristic table")
    _add_common(simulate)
    simulate.set_defaults(handler=cmd_simulate_oc)

    for name, handler in (("rotate-sim", cmd_rotate_sim), ("rotate-analytic", cmd_rotate_analytic)):
        rotate = subparsers.add_parser(name, help="group rotation comparison")
        _add_common(rotate)
        _add_rotation(rotate)
        rotate.set_defaults(handler=handler)

    bootstrap = subparsers.add_parser("bootstrap", help="bootstrap rotation on a CSV panel")
    _add_common(bootstrap)
    _add_rotation(bootstrap)
    bootstrap.add_argument("--panel")
    bootstrap.add_argument("--label-column")
    bootstrap.add_argument("--established", nargs="+")
    bootstrap.add_argument("--candidates", nargs="+")
    bootstrap.add_argument("--useful", nargs="*")
    bootstrap.add_argument("--lambda", dest="info_frac", type=float, action="append")
    bootstrap.add_argument("--log-transform", action="store_true")
    bootstrap.set_defaults(handler=cmd_bootstrap)

    test = subparsers.add_parser("test", help="two-stage test on a CSV panel")
    _add_common(test)
    test.add_argument("--panel", required=True)
    test.add_argument("--label-column", default="label")
    test.add_argument("--markers", nargs="+", required=True)
    test.add_argument("--new-markers", nargs="+", required=True)
    test.add_argument("--stage1-ids", help="file with one stage-1 row index per line")
    test.add_argument("--lambda", dest="info_frac", type=float, action="append")
    test.add_argument("--log-transform", action="store_true")
    test.set_defaults(handler=cmd_test)
    return parser


def main(argv=None) -> int:
    logging.getLogger().setLevel(get_configs("LOG_LEVEL", default_value="INFO").upper())
    if SENTRY_ENABLED:
        initialize_sentry()

    args = build_parser().parse_args(argv)
    try:
        args.handler(args)
    except Exception as error:
        logger.critical("Run aborted: %s", error)
        logger.exception(error)
        if SENTRY_ENABLED:
            sentry_sdk.capture_exception(error)
        return 1

    if SENTRY_ENABLED:
        sentry_sdk.capture_message(f"{args.command} completed", level="info")
    return 0


if __name__ == "__main__":
    sys.exit(main())
