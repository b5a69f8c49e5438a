"""Command-line entry point: ``python -m fisherlat <command> ...``.

Exit codes: 0 on success, 2 for configuration or input-schema errors, 3 when a
stage fails.
"""
import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np
from dotenv import load_dotenv

from .artifacts import read_csv, read_header, write_csv
from .dynamics import VpMixtureSpec, lyapunov_sweep, trajectory_pair
from .errors import ConfigError, FisherlatError, TrajectoryEscape
from .geometry import METRIC_HEADER, load_metric, load_path
from .groundtruth import discrete_gradient, dump_scalar_field, load_scalar_field, reference_for
from .phase import STAGES, configure_logging, temp_phase
from .pipeline import STAGE_FUNCS, prepare_run, run_pipeline, run_stage, write_manifest
from .plot import render_heatmap
from .posterior import ingest_features
from .utils import parse_sweep

load_dotenv()

logger = logging.getLogger('fisherlat')

COMPONENTS = {'g11': (0, 0), 'g12': (0, 1), 'g22': (1, 1)}


def _common(p: argparse.ArgumentParser):
    p.add_argument('--config', required=True, help='experiment JSON file')
    p.add_argument('--seed', type=int, help='master seed (overrides the config)')
    p.add_argument('--out', help='output directory (overrides config and FISHERLAT_OUT)')
    p.add_argument('--threads', type=int, help='worker threads (default: FISHERLAT_THREADS or 1)')


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog='fisherlat', description='Fisher-metric reconstruction from samples')
    parser.add_argument('--log-level', default=os.getenv('LOG_LEVEL', 'INFO'), help='logging level')
    sub = parser.add_subparsers(dest='command', required=True)

    run = sub.add_parser('run', help='run the whole pipeline')
    _common(run)
    run.add_argument('--stage', choices=list(STAGE_FUNCS), help='start at this stage, reusing earlier artifacts')

    for name in STAGE_FUNCS:
        if name == 'phase':
            continue
        _common(sub.add_parser(name, help=f"run the {STAGES[name].lower()} stage only"))

    gt = sub.add_parser('groundtruth', help='write reference F and derivative fields for the configured system')
    _common(gt)

    ly = sub.add_parser('lyapunov', help='closed-form vs numeric Lyapunov exponents, or a trajectory pair')
    ly.add_argument('--sweep', action='append', default=[],
                    help='name=start:stop:count for sigma or beta (repeatable)')
    ly.add_argument('--sigma', type=float, default=0.5)
    ly.add_argument('--beta', type=float, default=1.0)
    ly.add_argument('--t', type=float, default=0.0, help='forward time at which to evaluate')
    ly.add_argument('--delta', type=float, default=1e-5)
    ly.add_argument('--trajectory', action='store_true', help='write a trajectory pair instead of a sweep')
    ly.add_argument('--x0', type=float, default=0.0)
    ly.add_argument('--t1', type=float, default=0.01)
    ly.add_argument('--steps', type=int, default=1000)
    ly.add_argument('--output', required=True, help='CSV file to write')

    pl = sub.add_parser('plot', help='render an SVG heatmap of a field CSV')
    pl.add_argument('--input', required=True, help='scalar (i,j,value) or metric (i,j,g11,g12,g22) CSV')
    pl.add_argument('--component', choices=list(COMPONENTS), default='g11')
    pl.add_argument('--path', action='append', default=[], help='path CSV to overlay (repeatable)')
    pl.add_argument('--output', required=True, help='SVG file to write')
    pl.add_argument('--cmap', default='viridis')
    return parser


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_run(args) -> int:
    manifest = run_pipeline(args.config, args.seed, args.out, args.threads, args.stage)
    logger.info(f"Pipeline finished: {len(manifest['files'])} artifacts")
    return 0


def cmd_stage(args) -> int:
    run = prepare_run(args.config, args.seed, args.out, args.threads)
    run_stage(run, args.command)
    if args.command == 'geodesic':
        run_stage(run, 'phase')
    write_manifest(run)
    return 0


def cmd_groundtruth(args) -> int:
    run = prepare_run(args.config, args.seed, args.out, args.threads)
    cfg = run.cfg
    with temp_phase('Ground Truth'):
        table = None
        if cfg.system == 'ising' and run.path('features.csv').exists():
            table = ingest_features(run.path('features.csv'), cfg.grid)
        ref = reference_for(cfg.system, cfg.grid, cfg.sampler, table, cfg.seed, run.threads)
        if ref is None:
            raise ConfigError(f"no reference free energy for system {cfg.system!r}")
        F, (d1, d2) = ref
        dump_scalar_field(F, run.path('groundtruth_F.csv'))
        dump_scalar_field(d1, run.path('groundtruth_d1.csv'))
        dump_scalar_field(d2, run.path('groundtruth_d2.csv'))
        g1, g2 = discrete_gradient(F)
        gap = max(np.abs(g1.values - d1.values).max(), np.abs(g2.values - d2.values).max())
        logger.info(f"reference F spans [{F.values.min():.6g}, {F.values.max():.6g}]; grid-derivative gap {gap:.3g}")
    return 0


def cmd_lyapunov(args) -> int:
    with temp_phase('Lyapunov'):
        if args.trajectory:
            spec = VpMixtureSpec(args.sigma, args.beta)
            try:
                rows = trajectory_pair(spec, args.x0, args.delta, args.t1, args.t, args.steps)
            except TrajectoryEscape as e:
                logger.warning(f"{e}; writing the partial trajectory")
                rows = e.partial
            write_csv(args.output, ['s', 'x_plus', 'x_minus'], rows)
            return 0
        sweeps = {'sigma': np.array([args.sigma]), 'beta': np.array([args.beta])}
        for s in args.sweep:
            name, values = parse_sweep(s)
            if name not in sweeps:
                raise ConfigError(f"cannot sweep {name!r}; use sigma or beta")
            sweeps[name] = values
        rows = lyapunov_sweep(sweeps['sigma'], sweeps['beta'], args.t, args.delta)
        write_csv(args.output, ['sigma', 'beta', 't', 'lambda_closed', 'lambda_numeric'], rows)
        logger.info(f"Wrote {len(rows)} rows to {args.output}")
    return 0


def cmd_plot(args) -> int:
    with temp_phase('Plot'):
        header = read_header(args.input)
        if header == METRIC_HEADER:
            metric = load_metric(args.input)
            a, b = COMPONENTS[args.component]
            grid, values, title = metric.grid, metric.component(a, b), args.component
            flags = None
        else:
            field = load_scalar_field(args.input)
            grid, values, title = field.grid, field.values, field.label or Path(args.input).stem
            flags = None
            if header[:4] == ['i', 'j', 'value', 'boundary']:
                _, rows = read_csv(args.input, lambda h: True, '')
                flags = np.zeros(grid.shape, dtype=bool)
                for _, _, v in rows:
                    flags[int(v[0]), int(v[1])] = bool(v[3])
        paths = [load_path(p) for p in args.path]
        render_heatmap(values, grid, args.output, title, paths, flags, args.cmap)
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    configure_logging(args.log_level)
    try:
        if args.command == 'run':
            return cmd_run(args)
        if args.command in STAGE_FUNCS:
            return cmd_stage(args)
        if args.command == 'groundtruth':
            return cmd_groundtruth(args)
        if args.command == 'lyapunov':
            return cmd_lyapunov(args)
        return cmd_plot(args)
    except FisherlatError as e:
        logger.error(str(e))
        return e.exit_code


if __name__ == '__main__':
    sys.exit(main())
