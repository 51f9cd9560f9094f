#!/usr/bin/env python3
"""
Hybrid IAS EIT - Command Line Interface

    mesh         generate a reconstruction mesh and save it
    simulate     synthesize a dataset for a phantom and difficulty level
    reconstruct  run the hybrid IAS on a dataset, segment and score
    score        compare two label maps
    bench        time repeated reconstructions per difficulty level
    info         show defaults and the available backends
"""
import os
import sys
import json
import time
import logging
import argparse
from dataclasses import replace
from concurrent.futures import ThreadPoolExecutor
from typing import Dict, List, Optional, Tuple

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

import numpy as np
import pandas as pd

from config import (DEBUG_MODE, DOMAIN_RADIUS, ELECTRODE_ANGLE_DEG, LEVEL_INJECTIONS, N_ELECTRODES,
                    REFERENCE_SCORES, RunConfig, load_run_config, setup_logging)
from cem_forward import CemModel, Conductivity, load_patterns, save_patterns
from errors import ConfigurationError, EitError, NumericalError, ValidationError
from factorization import CHOLMOD_AVAILABLE
from ias import IasReport, ReconstructionContext, build_schedule, run_hybrid
from increments import IncrementOperator
from mesh import ElectrodeLayout, Mesh, generate_disk_mesh, load_mesh, save_mesh
from postproc import (interpolate_to_grid, read_pgm, score, segment, write_pgm, write_raster_csv,
                      write_score_report)
from sim import (PHANTOM_PRESETS, SyntheticDataset, generation_mesh, ktc_injection_schedule, level_parameters,
                 load_dataset, make_phantom, rasterize_truth_labels, save_dataset, synthesize)

logger = logging.getLogger(__name__)

EXIT_OK, EXIT_NUMERICAL, EXIT_INPUT = 0, 1, 2

# argparse dest -> RunConfig field
CONFIG_FLAGS = {
    'mesh': 'mesh_source', 'target_h': 'target_h', 'level': 'level', 'phantom': 'phantom',
    'eta1': 'eta1', 'vartheta_star': 'vartheta_star', 'r2': 'r2', 'k_max1': 'k_max1',
    'k_max2': 'k_max2', 'tol': 'tol', 'inner': 'inner_linearizations',
    'auto_level_params': 'auto_level_params', 'omega': 'omega', 'sigma0': 'sigma0', 'z0': 'z0',
    'current_amplitude': 'current_amplitude', 'grid_size': 'grid_size', 'seed': 'seed',
    'output_dir': 'output_dir',
}


# ==================== SHARED STEPS ====================

def _config(args) -> RunConfig:
    overrides = {field: getattr(args, dest, None) for dest, field in CONFIG_FLAGS.items()}
    return load_run_config(args.config, overrides)


def _output_dir(cfg: RunConfig) -> str:
    os.makedirs(cfg.output_dir, exist_ok=True)
    with open(os.path.join(cfg.output_dir, 'run_config.env'), 'w', encoding='utf-8') as f:
        f.write(cfg.to_env_text())
    return cfg.output_dir


def _layout() -> ElectrodeLayout:
    return ElectrodeLayout.equispaced(N_ELECTRODES, ELECTRODE_ANGLE_DEG)


def _recon_mesh(cfg: RunConfig) -> Mesh:
    if cfg.mesh_source == 'generate':
        return generate_disk_mesh(DOMAIN_RADIUS, cfg.target_h, _layout())
    return load_mesh(cfg.mesh_source)


def _hyperparameters(cfg: RunConfig) -> Tuple[float, float]:
    if cfg.auto_level_params:
        return level_parameters(cfg.phantom, cfg.level)
    return cfg.eta1, cfg.vartheta_star


def _parse_single_prior(value: Optional[str]) -> Optional[float]:
    if value is None:
        return None
    name, _, number = value.partition('=')
    try:
        r = float(number)
    except ValueError:
        r = None
    if name.strip() != 'r' or r is None:
        raise ConfigurationError(f"--single-prior expects 'r=VALUE', got {value!r}")
    return r


def simulate_dataset(cfg: RunConfig, recon_mesh: Mesh, patterns_path: Optional[str] = None) -> SyntheticDataset:
    if patterns_path:
        currents, meas = load_patterns(patterns_path)
    else:
        currents, meas = ktc_injection_schedule(cfg.level, N_ELECTRODES, cfg.current_amplitude)
    phantom = make_phantom(cfg.phantom, cfg.sigma0)
    gen_mesh = generation_mesh(cfg.target_h, _layout(), DOMAIN_RADIUS)
    return synthesize(phantom, gen_mesh, currents, meas, cfg.omega, cfg.seed, z=cfg.z0,
                      recon_mesh=recon_mesh, level=cfg.level)


def _check_generation_mesh(dataset: SyntheticDataset, mesh: Mesh):
    gen_nodes = dataset.mesh_info.get('nodes')
    if gen_nodes is None:
        logger.warning("[CLI] Dataset does not record its generation mesh; inverse-crime check skipped")
        return
    if gen_nodes < 2 * mesh.n_nodes:
        raise ValidationError(
            f"dataset was generated on {gen_nodes} nodes, need at least twice the "
            f"{mesh.n_nodes} nodes of the reconstruction mesh")


def reconstruct_dataset(cfg: RunConfig, dataset: SyntheticDataset, mesh: Mesh,
                        single_prior: Optional[float] = None, workers: int = 1) -> IasReport:
    """Build the context and schedule for `dataset` and run the hybrid IAS."""
    eta1, vartheta_star = _hyperparameters(cfg)
    k_max1, k_max2, r2 = cfg.k_max1, cfg.k_max2, cfg.r2
    if single_prior is not None:
        if single_prior == 1:
            k_max2 = 0
        else:
            k_max1, r2 = 0, single_prior

    context = ReconstructionContext(
        model=CemModel(mesh, cfg.z0), op=IncrementOperator.build(mesh), currents=dataset.currents,
        meas=dataset.meas, data=dataset.data, noise_scale=cfg.omega, sigma0=cfg.sigma0, workers=workers)
    schedule = build_schedule(context, eta1, vartheta_star, r2, k_max1, k_max2, cfg.tol,
                              cfg.inner_linearizations)
    return run_hybrid(schedule, context)


# ==================== COMMANDS ====================

def cmd_mesh(args) -> int:
    cfg = _config(args)
    out_dir = _output_dir(cfg)
    mesh = _recon_mesh(cfg)
    out = args.out or os.path.join(out_dir, 'mesh.txt')
    save_mesh(mesh, out)
    print(json.dumps({'path': out, **mesh.summary()}, indent=2))
    return EXIT_OK


def cmd_simulate(args) -> int:
    cfg = _config(args)
    out = _output_dir(cfg)
    mesh = _recon_mesh(cfg)
    dataset = simulate_dataset(cfg, mesh, args.patterns)

    save_dataset(dataset, os.path.join(out, 'dataset.json'))
    save_patterns(dataset.currents, dataset.meas, os.path.join(out, 'patterns.txt'))
    truth = rasterize_truth_labels(dataset.phantom, cfg.grid_size, cfg.grid_size, DOMAIN_RADIUS)
    write_pgm(truth, os.path.join(out, 'truth.pgm'))
    print(f"[OK] {dataset.currents.n_injections} injections, {len(dataset.data)} measurements -> {out}")
    return EXIT_OK


def cmd_reconstruct(args) -> int:
    cfg = _config(args)
    if cfg.omega <= 0:
        raise ConfigurationError("reconstruction needs a positive --omega")
    dataset = load_dataset(args.dataset)
    if dataset.level is not None and dataset.level != cfg.level:
        logger.warning(f"[CLI] Dataset was simulated at level {dataset.level}, config says {cfg.level}; "
                       f"using {dataset.level}")
        cfg = replace(cfg, level=dataset.level).validate()
    out = _output_dir(cfg)
    mesh = _recon_mesh(cfg)
    _check_generation_mesh(dataset, mesh)
    report = reconstruct_dataset(cfg, dataset, mesh, _parse_single_prior(args.single_prior), args.workers)

    cond = Conductivity(cfg.sigma0, report.xi)
    interior = mesh.interior_nodes
    pd.DataFrame({'node': interior, 'x': mesh.points[interior, 0], 'y': mesh.points[interior, 1],
                  'xi': report.xi}).to_csv(os.path.join(out, 'xi.csv'), index=False)
    image = interpolate_to_grid(mesh, cond, cfg.grid_size, cfg.grid_size)
    write_raster_csv(image, os.path.join(out, 'conductivity.csv'))
    labels = segment(image, cfg.sigma0)
    write_pgm(labels, os.path.join(out, 'segmentation.pgm'))
    report.write_diagnostics(os.path.join(out, 'diagnostics.csv'))
    report.write_xi_history(os.path.join(out, 'xi_history.csv'), interior)

    summary = {
        'level': cfg.level,
        'iterations': report.iterations,
        'branch': report.branch,
        'clamp_warnings': report.clamp_warnings,
        'fallback_pixels': image.fallback_pixels,
        'timings': report.timings,
    }
    if dataset.phantom.inclusions:
        truth = rasterize_truth_labels(dataset.phantom, cfg.grid_size, cfg.grid_size, image.extent[1])
        result = score(labels, truth, args.variant)
        write_score_report(result, os.path.join(out, 'score.json'))
        summary['score'] = result.to_dict()
    with open(os.path.join(out, 'report.json'), 'w', encoding='utf-8') as f:
        json.dump(summary, f, indent=2)
    print(json.dumps(summary, indent=2))
    return EXIT_OK


def cmd_score(args) -> int:
    result = score(read_pgm(args.result), read_pgm(args.truth), args.variant)
    report = result.to_dict()
    if args.level is not None:
        if args.level not in REFERENCE_SCORES:
            raise ConfigurationError(f"no reference scores for level {args.level}")
        report['reference_non_reproducible'] = dict(zip(('phantom1', 'phantom2', 'phantom3'),
                                                        REFERENCE_SCORES[args.level]))
    if args.out:
        write_score_report(result, args.out, {k: v for k, v in report.items() if k not in result.to_dict()})
    print(json.dumps(report, indent=2))
    return EXIT_OK


def cmd_bench(args) -> int:
    if args.repetitions < 2:
        raise ConfigurationError("bench needs at least 2 repetitions")
    cfg = _config(args)
    out = _output_dir(cfg)
    mesh = _recon_mesh(cfg)
    levels = [int(v) for v in args.levels.split(',')] if args.levels else sorted(LEVEL_INJECTIONS, reverse=True)

    rows: List[Dict] = []
    branches: Dict[int, str] = {}
    for level in levels:
        level_cfg = replace(cfg, level=level).validate()
        dataset = simulate_dataset(level_cfg, mesh)

        def one_run(rep: int) -> Dict:
            start = time.perf_counter()
            report = reconstruct_dataset(level_cfg, dataset, mesh)
            branches[level] = report.branch
            return {'level': level, 'injections': dataset.currents.n_injections, 'repetition': rep,
                    'seconds': time.perf_counter() - start, **{f't_{k}': v for k, v in report.timings.items()}}

        if args.parallel > 1:
            with ThreadPoolExecutor(max_workers=args.parallel) as pool:
                rows += list(pool.map(one_run, range(args.repetitions)))
        else:
            rows += [one_run(rep) for rep in range(args.repetitions)]
        logger.info(f"[Bench] level {level} done")

    frame = pd.DataFrame(rows)
    frame.to_csv(os.path.join(out, 'bench.csv'), index=False)
    stats = frame.drop(columns=['repetition']).groupby('level').agg(['mean', 'std'])
    summary = {
        str(level): {
            'injections': int(frame.loc[frame.level == level, 'injections'].iloc[0]),
            'branch': branches[level],
            'mean_seconds': float(stats.loc[level, ('seconds', 'mean')]),
            'std_seconds': float(stats.loc[level, ('seconds', 'std')]),
            'stages': {col[2:]: float(stats.loc[level, (col, 'mean')])
                       for col in frame.columns if col.startswith('t_')},
        }
        for level in levels
    }
    with open(os.path.join(out, 'bench.json'), 'w', encoding='utf-8') as f:
        json.dump(summary, f, indent=2)
    print(json.dumps(summary, indent=2))
    return EXIT_OK


def cmd_info(args) -> int:
    cfg = _config(args)
    info = {
        'defaults': cfg.__dict__,
        'factorization': 'cholmod' if CHOLMOD_AVAILABLE else 'superlu',
        'debug_mode': DEBUG_MODE,
        'levels': {str(k): v for k, v in LEVEL_INJECTIONS.items()},
        'phantoms': sorted(PHANTOM_PRESETS),
        'numpy': np.__version__,
        'pandas': pd.__version__,
    }
    print(json.dumps(info, indent=2, default=str))
    return EXIT_OK


# ==================== PARSER ====================

def _config_parent() -> argparse.ArgumentParser:
    parent = argparse.ArgumentParser(add_help=False)
    group = parent.add_argument_group('run configuration (overrides --config)')
    group.add_argument('--config', help='KEY=value configuration file')
    group.add_argument('--mesh', help="'generate' or a MESH v1 file")
    group.add_argument('--target-h', type=float, help='reconstruction mesh size')
    group.add_argument('--level', type=int, help='active electrodes (32, 30, ..., 20)')
    group.add_argument('--phantom', choices=sorted(PHANTOM_PRESETS))
    group.add_argument('--eta1', type=float, help='phase-1 focality parameter')
    group.add_argument('--vartheta-star', type=float, help='sensitivity scaling factor')
    group.add_argument('--r2', type=float, help='phase-2 hyperprior exponent')
    group.add_argument('--k-max1', type=int, help='phase-1 iteration cap')
    group.add_argument('--k-max2', type=int, help='phase-2 iteration cap')
    group.add_argument('--tol', type=float, help='relative theta change tolerance')
    group.add_argument('--inner', type=int, help='linearizations per zeta-update')
    group.add_argument('--auto-level-params', action='store_true', default=None,
                       help='pick eta1 and vartheta* from the level schedule')
    group.add_argument('--omega', type=float, help='noise standard deviation')
    group.add_argument('--sigma0', type=float, help='background conductivity (S/m)')
    group.add_argument('--z0', type=float, help='contact impedance')
    group.add_argument('--current-amplitude', type=float)
    group.add_argument('--grid-size', type=int, help='pixel grid side')
    group.add_argument('--seed', type=int)
    group.add_argument('--output-dir')
    group.add_argument('--log-level', help='DEBUG, INFO, WARNING, ...')
    return parent


def build_parser() -> argparse.ArgumentParser:
    parent = _config_parent()
    parser = argparse.ArgumentParser(description='Hybrid IAS reconstruction for EIT')
    sub = parser.add_subparsers(dest='command', required=True)

    p = sub.add_parser('mesh', parents=[parent], help='generate and save a reconstruction mesh')
    p.add_argument('--out', help='mesh file (default OUTPUT_DIR/mesh.txt)')
    p.set_defaults(handler=cmd_mesh)

    p = sub.add_parser('simulate', parents=[parent], help='synthesize a dataset')
    p.add_argument('--patterns', help='PATTERNS v1 file replacing the level schedule')
    p.set_defaults(handler=cmd_simulate)

    p = sub.add_parser('reconstruct', parents=[parent], help='run the hybrid IAS on a dataset')
    p.add_argument('--dataset', required=True, help='dataset.json written by simulate')
    p.add_argument('--single-prior', help="'r=1' (phase 1 only) or 'r=R2' (phase 2 only)")
    p.add_argument('--variant', choices=['global', 'windowed'], default='global', help='SSIM variant')
    p.add_argument('--workers', type=int, default=1, help='threads for per-injection solves')
    p.set_defaults(handler=cmd_reconstruct)

    p = sub.add_parser('score', help='score a label map against the truth')
    p.add_argument('result', help='PGM label map')
    p.add_argument('truth', help='PGM label map')
    p.add_argument('--variant', choices=['global', 'windowed'], default='global')
    p.add_argument('--level', type=int, help='print the reference scores for this level')
    p.add_argument('--out', help='write the JSON report here')
    p.add_argument('--log-level')
    p.set_defaults(handler=cmd_score)

    p = sub.add_parser('bench', parents=[parent], help='time reconstructions per level')
    p.add_argument('--levels', help='comma-separated levels (default all)')
    p.add_argument('--repetitions', type=int, default=10)
    p.add_argument('--parallel', type=int, default=1, help='concurrent repetitions (distorts timings)')
    p.set_defaults(handler=cmd_bench)

    p = sub.add_parser('info', parents=[parent], help='show defaults and backends')
    p.set_defaults(handler=cmd_info)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    setup_logging(args.log_level)
    try:
        return args.handler(args)
    except NumericalError as e:
        logger.error(f"[CLI] Numerical failure: {e.message}")
        return EXIT_NUMERICAL
    except (ValidationError, ConfigurationError, EitError) as e:
        logger.error(f"[CLI] {e.message}")
        return EXIT_INPUT
    except OSError as e:
        logger.error(f"[CLI] {e}")
        return EXIT_INPUT


if __name__ == '__main__':
    sys.exit(main())
