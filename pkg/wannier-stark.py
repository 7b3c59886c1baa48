import sys
import json
import logging
import argparse
import threading
from concurrent.futures import ThreadPoolExecutor, as_completed
from contextlib import contextmanager
from pathlib import Path
from configparser import ConfigParser
from threading import Lock

from modules.Errors import ConfigError, WannierStarkError
from modules.Scenario import (
    EXIT_CONFIG,
    EXIT_ENGINE,
    EXIT_OK,
    NumericsDefaults,
    config_signature,
    expand_sweep,
    list_presets,
    load_preset,
    parse_config,
    run_scenario,
    with_overrides,
)

_progress_lock = Lock()
_progress_total = 1
_progress_done = 0
_progress_last_emit = -1.0

_cache_lock = Lock()
_sweep_cache = {}
_sweep_cache_dirty = 0

def _emit_progress(pct: float):
    print(f"PROGRESS {pct:.4f} {_progress_done} {_progress_total}")
    sys.stdout.flush()

def _progress_set_total(n: int):
    global _progress_total, _progress_done, _progress_last_emit
    with _progress_lock:
        _progress_total = max(1, int(n))
        _progress_done = 0
        _progress_last_emit = -1.0
        _emit_progress(0.0)

def _progress_set(done: int):
    global _progress_done, _progress_last_emit
    with _progress_lock:
        _progress_done = min(_progress_total, max(0, int(done)))
        pct = (_progress_done * 100) / _progress_total
        min_delta = max(0.1, 100 / max(1, _progress_total))
        should_emit = _progress_last_emit < 0 or pct >= 100 or pct - _progress_last_emit >= min_delta
        if should_emit:
            _progress_last_emit = pct
            _emit_progress(min(100.0, max(0.0, pct)))

def _progress_step(k: int = 1):
    _progress_set(_progress_done + k)

def _propagation_progress(step: int, steps: int):
    """Propagator callback: (re)arms the counter when a new propagation starts."""
    if step <= 0 or steps != _progress_total or step < _progress_done:
        _progress_set_total(steps)
    _progress_set(step)


def load_sweep_cache(cache_file: Path, force: bool = False):
    global _sweep_cache
    with _cache_lock:
        if not force and cache_file.exists():
            try:
                _sweep_cache = json.loads(cache_file.read_text(encoding='utf-8'))
            except Exception:
                _sweep_cache = {}
        else:
            _sweep_cache = {}


def save_sweep_cache(cache_file: Path, force: bool = False):
    global _sweep_cache_dirty
    with _cache_lock:
        if not force and _sweep_cache_dirty < 5:
            return
        cache_file.parent.mkdir(parents=True, exist_ok=True)
        with cache_file.open('w', encoding='utf-8') as fh:
            json.dump(_sweep_cache, fh, indent=2, sort_keys=True)
        _sweep_cache_dirty = 0


def should_skip_scenario(key: str, config, out_dir: Path) -> bool:
    with _cache_lock:
        entry = _sweep_cache.get(key)
    if not entry or entry.get('signature') != config_signature(config):
        return False
    return entry.get('status') != EXIT_ENGINE and (out_dir / 'summary.json').exists()


def mark_scenario_done(key: str, config, status: int, cache_file: Path):
    global _sweep_cache_dirty
    with _cache_lock:
        _sweep_cache[key] = {
            'signature': config_signature(config),
            'name': config.name,
            'status': status,
        }
        _sweep_cache_dirty += 1
    save_sweep_cache(cache_file, force=False)

# Configure the root logger so library modules share the format
logger = logging.getLogger(__name__)
root_logger = logging.getLogger()
root_logger.setLevel(logging.INFO)
handler = logging.StreamHandler(sys.stdout)
formatter = logging.Formatter('[%(asctime)s] %(message)s', datefmt='%Y-%m-%d %H:%M:%S')
handler.setFormatter(formatter)
root_logger.addHandler(handler)


class _ThreadFilter(logging.Filter):
    """Passes only records emitted by one thread, so parallel runs keep separate logs."""

    def __init__(self, thread_id: int):
        super().__init__()
        self.thread_id = thread_id

    def filter(self, record: logging.LogRecord) -> bool:
        return record.thread == self.thread_id


@contextmanager
def run_log(out_dir: Path):
    out_dir.mkdir(parents=True, exist_ok=True)
    file_handler = logging.FileHandler(out_dir / 'run.log', mode='w', encoding='utf-8')
    file_handler.setFormatter(formatter)
    file_handler.addFilter(_ThreadFilter(threading.get_ident()))
    root_logger.addHandler(file_handler)
    try:
        yield
    finally:
        root_logger.removeHandler(file_handler)
        file_handler.close()

# Initialize settings
def initialize_settings():
    config_file = Path(__file__).parent / 'config' / 'config.ini'
    config = ConfigParser()
    config.read(config_file)

    # Performance settings
    max_workers = config.getint('performance', 'max_workers', fallback=4)
    batch_size = config.getint('performance', 'batch_size', fallback=8)

    output_dir = Path(config.get('output', 'directory', fallback='runs'))
    if not output_dir.is_absolute():
        output_dir = Path(__file__).parent / output_dir

    base = NumericsDefaults()
    defaults = NumericsDefaults(
        dt=config.getfloat('numerics', 'dt', fallback=base.dt),
        points_per_site=config.getint('numerics', 'points_per_site', fallback=base.points_per_site),
        n_sites=config.getint('numerics', 'n_sites', fallback=base.n_sites),
        p_max=config.getint('numerics', 'p_max', fallback=base.p_max),
        tb_sites=config.getint('numerics', 'tb_sites', fallback=base.tb_sites),
        tb_dt=config.getfloat('numerics', 'tb_dt', fallback=base.tb_dt),
    )
    return defaults, output_dir, max(1, max_workers), max(1, batch_size)


def load_scenario(args, defaults):
    if bool(args.preset) == bool(args.config):
        raise ConfigError('give exactly one of --preset and --config')
    if args.preset:
        config = load_preset(args.preset, defaults)
    else:
        path = Path(args.config)
        if not path.exists():
            raise ConfigError(f'scenario file {path} does not exist')
        config = parse_config(path.read_text(encoding='utf-8'), defaults)
    if getattr(args, 'seed', None) is not None:
        config = with_overrides(config, {'scenario.seed': str(args.seed)}, defaults)
    return config


def _out_dir(args, output_dir: Path, name: str) -> Path:
    return Path(args.out) if args.out else output_dir / (name or 'scenario')


def run_single(config, out_dir: Path, check: bool, progress=None) -> int:
    with run_log(out_dir):
        result = run_scenario(config, out_dir, check=check, progress=progress)
    logger.info(f"Scenario '{config.name}' finished with status {result.status}, outputs in {out_dir}")
    return result.status


def run_sweep(config, vary, out_dir: Path, defaults, check: bool, force: bool, max_workers: int, batch_size: int) -> int:
    scenarios = expand_sweep(config, vary, defaults)
    cache_file = out_dir / 'sweep-cache.json'
    load_sweep_cache(cache_file, force=force)

    logger.info(f"Sweep over {len(scenarios)} scenarios into {out_dir}")
    pending = []
    statuses = {}
    for key, scenario in scenarios:
        if should_skip_scenario(key, scenario, out_dir / key):
            statuses[key] = _sweep_cache[key]['status']
            continue
        pending.append((key, scenario))

    skipped = len(scenarios) - len(pending)
    if skipped:
        logger.warning(f"Skipping {skipped} scenarios that match the sweep cache. {len(pending)} remain.")

    def _run_one(key, scenario):
        try:
            status = run_single(scenario, out_dir / key, check)
        except Exception as e:
            logger.error(f"Error running sweep scenario {key}: {str(e)}")
            status = EXIT_ENGINE
        mark_scenario_done(key, scenario, status, cache_file)
        return key, status

    if pending:
        _progress_set_total(len(pending))

    # Submit batches, but wait for each batch to finish before submitting the next (backpressure)
    with ThreadPoolExecutor(max_workers=max_workers) as executor:
        for i in range(0, len(pending), batch_size):
            batch = pending[i:i+batch_size]
            futures = [executor.submit(_run_one, key, scenario) for key, scenario in batch]
            for future in as_completed(futures):
                key, status = future.result()
                statuses[key] = status
                _progress_step()
            logger.info(f"Processed batch {i//batch_size + 1}/{(len(pending)+batch_size-1)//batch_size}")

    save_sweep_cache(cache_file, force=True)

    merged = {}
    for key, _ in scenarios:
        summary_file = out_dir / key / 'summary.json'
        entry = {'status': statuses.get(key, EXIT_ENGINE)}
        if summary_file.exists():
            entry['summary'] = json.loads(summary_file.read_text(encoding='utf-8'))
        merged[key] = entry
    with (out_dir / 'sweep.json').open('w', encoding='utf-8', newline='\n') as fh:
        json.dump(merged, fh, indent=2, sort_keys=True)
        fh.write('\n')

    worst = max(statuses.values(), default=EXIT_OK)
    logger.info(f"Sweep finished: {sum(1 for s in statuses.values() if s == EXIT_OK)}/{len(scenarios)} scenarios passed")
    return worst


def build_parser():
    parser = argparse.ArgumentParser(description='Simulate wavepackets in a tilted, phase-modulated optical lattice')
    parser.add_argument('--verbose', action='store_true', help='Log debug output')
    sub = parser.add_subparsers(dest='command')

    def scenario_args(p):
        p.add_argument('--preset', help='Name of a preset under config/presets')
        p.add_argument('--config', help='Path to a scenario file')
        p.add_argument('--out', help='Output directory (default: [output] directory / scenario name)')

    p_basis = sub.add_parser('basis', help='Solve the box and export the Wannier-Stark ladder')
    scenario_args(p_basis)
    p_basis.add_argument('--check', action='store_true', help='Evaluate the [check] thresholds')

    p_run = sub.add_parser('run', help='Run a scenario')
    scenario_args(p_run)
    p_run.add_argument('--check', action='store_true', help='Evaluate the [check] thresholds')
    p_run.add_argument('--seed', type=int, help='Override the scenario seed')

    sub.add_parser('presets', help='List the shipped presets')

    p_sweep = sub.add_parser('sweep', help='Run a grid of scenarios around a base scenario')
    scenario_args(p_sweep)
    p_sweep.add_argument('--vary', action='append', default=[], help='section.key=v1,v2,... (repeatable)')
    p_sweep.add_argument('--check', action='store_true', help='Evaluate the [check] thresholds')
    p_sweep.add_argument('--seed', type=int, help='Override the scenario seed')
    p_sweep.add_argument('--force', action='store_true', help='Ignore the sweep cache')
    return parser

# Main function
def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.verbose:
        root_logger.setLevel(logging.DEBUG)

    defaults, output_dir, max_workers, batch_size = initialize_settings()

    if args.command == 'presets':
        for name, description in list_presets():
            logger.info(f"{name}: {description}")
        return EXIT_OK
    if args.command is None:
        logger.info('No action specified. Please use one of the following commands:')
        logger.info('  basis: Solve the box and export the ladder')
        logger.info('  run: Run a scenario')
        logger.info('  presets: List the shipped presets')
        logger.info('  sweep: Run a grid of scenarios')
        return EXIT_OK

    try:
        config = load_scenario(args, defaults)
        if args.command == 'basis':
            config = with_overrides(config, {'scenario.engines': ''}, defaults)
            status = run_single(config, _out_dir(args, output_dir, config.name), args.check)
        elif args.command == 'run':
            status = run_single(config, _out_dir(args, output_dir, config.name), args.check, _propagation_progress)
        else:
            out_dir = Path(args.out) if args.out else output_dir / f"{config.name or 'scenario'}-sweep"
            status = run_sweep(config, args.vary, out_dir, defaults, args.check, args.force, max_workers, batch_size)
    except ConfigError as e:
        logger.error(f"Configuration error: {e}")
        return EXIT_CONFIG
    except WannierStarkError as e:
        logger.error(f"Run failed: {e}")
        return EXIT_ENGINE

    logger.info('Script execution completed.')
    return status

if __name__ == '__main__':
    sys.exit(main())
