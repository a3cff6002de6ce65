import json
import logging
from concurrent.futures import ProcessPoolExecutor
from datetime import datetime, timezone
from functools import wraps
from pathlib import Path

import click
import pandas as pd

from config import config
from middleware.logging import log_command
from modules.data import SignalDataset, synth_domain_pair
from modules.errors import ConfigError, DataError, KaviError, ReportError, TrainingDivergence
from modules.evaluation import (a_distance, a_l_distance, accuracy_and_confusion, build_report, emit_report,
                                extract_features, parse_report, distance_layer)
from modules.experiment import MODES, ExperimentConfig, RunManifest, config_hash, dump_config, load_config
from modules.logging import run_context, setup_logging, setup_worker_logging, shutdown_logging
from modules.models import build_student, build_teacher, cost_report
from modules.trainer import TrainResult, train_ablation
from store import MetricsLog, Summary, export_archive, load_archive, save_model
from store.report import report_paths

logger = logging.getLogger("kavi.cli")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_DIVERGED = 0, 1, 2, 3


def exit_codes(f):
    '''Map package errors onto the CLI exit-code contract.'''
    @wraps(f)
    def wrapper(*args, **kwargs):
        ctx = click.get_current_context()
        try:
            return f(*args, **kwargs)
        except ConfigError as e:
            click.echo(f"config error: {e}", err=True)
            ctx.exit(EXIT_USAGE)
        except TrainingDivergence as e:
            click.echo(f"training diverged: {e}", err=True)
            ctx.exit(EXIT_DIVERGED)
        except (DataError, ReportError) as e:
            click.echo(f"data error: {e}", err=True)
            ctx.exit(EXIT_DATA)
        except KaviError as e:
            click.echo(f"error: {e}", err=True)
            ctx.exit(EXIT_USAGE)
    return wrapper


@click.group()
@click.option('--verbose', '-v', is_flag=True, help='Debug-level logging.')
@click.pass_context
def cli(ctx, verbose):
    '''Graph-convolutional fault diagnosis with domain adaptation and distillation.'''
    setup_logging(logging.DEBUG if verbose else logging.INFO)
    ctx.call_on_close(shutdown_logging)


# --- data ---
def resolve_data(cfg: ExperimentConfig, data_dir: str | None) -> tuple[SignalDataset, SignalDataset]:
    '''Archives named on the command line or in the config; synthesized otherwise.'''
    if data_dir is not None:
        return load_archive(Path(data_dir) / 'source', 'source'), load_archive(Path(data_dir) / 'target', 'target')
    src_archive, tgt_archive = cfg.data.source.archive, cfg.data.target.archive
    if src_archive or tgt_archive:
        if not (src_archive and tgt_archive):
            raise ConfigError("both data.source.archive and data.target.archive are needed")
        return load_archive(src_archive, 'source'), load_archive(tgt_archive, 'target')
    return synth_domain_pair(*cfg.synth_specs())


@log_command
@cli.command()
@click.option('--config', 'config_path', type=click.Path(dir_okay=False), help='YAML experiment config.')
@click.option('--out', default=None, help='Output directory (default <OUT_ROOT>/data).')
@click.option('--paper-scale', '--full-scale', 'full_scale', is_flag=True, help='1000 samples per class.')
@exit_codes
def synth(config_path, out, full_scale):
    '''Synthesize a source/target archive pair.'''
    cfg = load_config(config_path)
    if full_scale:
        cfg = cfg.full_scale()
    out = Path(out or Path(config.OUT_ROOT) / 'data')
    source, target = synth_domain_pair(*cfg.synth_specs())
    for ds in (source, target):
        manifest = export_archive(ds, out / ds.domain)
        click.echo(f"{ds.domain}: {len(ds)} segments, {ds.n_classes} classes -> {manifest}")


# --- training ---
def evaluate_run(cfg: ExperimentConfig, result: TrainResult) -> list:
    '''Target-test accuracy, domain distances on the distance layer and cost, per model.'''
    splits = result.splits
    test = splits.target_test if splits.target_test.labels is not None else splits.source_test
    digest = config_hash(cfg)
    bs = cfg.run.batch_size
    reports = []
    for model in (result.teacher, result.student):
        name = model.kind
        accuracy, conf = accuracy_and_confusion(model, test, bs)
        layer = distance_layer(model)
        fs = extract_features(model, splits.source_test.segments, layer, bs)
        ft = extract_features(model, splits.target_test.segments, layer, bs)
        pseudo = extract_features(model, splits.target_test.segments, 'logits', bs).argmax(axis=1)
        d_a = a_distance(fs, ft, cfg.run.seed, cfg.run.distance_repeats)
        try:
            d_al = a_l_distance(fs, splits.source_test.labels, ft, pseudo, test.n_classes,
                                cfg.run.seed, cfg.run.distance_repeats)
        except DataError as e:
            logger.warning("%s: subdomain distance unavailable: %s", name, e)
            d_al = None
        reports.append(build_report(name, accuracy, conf, test.class_names, cfg.mode, cfg.run.seed, digest,
                                    d_a, d_al, cost_report(model)))
    return reports


def run_one(cfg_data: dict, run_dir: str, data_dir: str | None) -> list[dict]:
    '''One seed: train, checkpoint, evaluate. Takes plain data so it can run in a worker process.'''
    cfg = ExperimentConfig.model_validate(cfg_data)
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / 'config.yaml').write_text(dump_config(cfg))
    metrics_path = run_dir / 'metrics.jsonl'
    metrics_path.unlink(missing_ok=True)
    with run_context(mode=cfg.mode, seed=cfg.run.seed, config_hash=config_hash(cfg)[:12]):
        source, target = resolve_data(cfg, data_dir)
        result = train_ablation(cfg, source, target, on_record=MetricsLog()(metrics_path))
        save_model(run_dir / 'teacher.ckpt', result.teacher)
        save_model(run_dir / 'student.ckpt', result.student)
        reports = evaluate_run(cfg, result)
        emit_report(reports, run_dir)
    for r in reports:
        logger.info("%s seed %d %s: accuracy %.4f", cfg.mode, cfg.run.seed, r.model, r.accuracy)
    return [r.model_dump(mode='json') for r in reports]


@log_command
@cli.command()
@click.option('--config', 'config_path', type=click.Path(dir_okay=False), help='YAML experiment config.')
@click.option('--mode', default=None, help=f"Training mode, one of {', '.join(MODES)} (overrides run.mode).")
@click.option('--seeds', type=click.IntRange(min=1), default=1, help='Repeat with this many consecutive seeds.')
@click.option('--epochs', type=click.IntRange(min=1), default=None, help='Overrides run.epochs.')
@click.option('--jobs', type=click.IntRange(min=1), default=1, help='Parallel worker processes.')
@click.option('--out', default=None, help='Output root (default OUT_ROOT).')
@click.option('--paper-scale', '--full-scale', 'full_scale', is_flag=True,
              help='400 epochs, 1000 samples per class.')
@click.option('--data', 'data_dir', type=click.Path(file_okay=False), default=None,
              help='Directory with source/ and target/ archives.')
@exit_codes
def train(config_path, mode, seeds, epochs, jobs, out, full_scale, data_dir):
    '''Train Teacher and Student, then evaluate both.'''
    cfg = load_config(config_path)
    if full_scale:
        cfg = cfg.full_scale()
    cfg = cfg.with_overrides(**{'run.mode': mode, 'run.epochs': epochs})
    mode_dir = Path(out or config.OUT_ROOT) / cfg.mode
    seed_list = [cfg.run.seed + i for i in range(seeds)]
    manifest = RunManifest(config_path=config_path, config=cfg, config_hash=config_hash(cfg), seeds=seed_list,
                           out_dir=str(mode_dir), started_at=datetime.now(timezone.utc))
    mode_dir.mkdir(parents=True, exist_ok=True)

    jobs_args = [(cfg.with_overrides(**{'run.seed': s}).model_dump(mode='json'), str(mode_dir / f"seed-{s}"), data_dir)
                 for s in seed_list]
    if jobs > 1 and len(jobs_args) > 1:
        with ProcessPoolExecutor(max_workers=jobs, initializer=setup_worker_logging,
                                 initargs=(logging.getLogger().level,)) as pool:
            results = list(pool.map(run_one, *zip(*jobs_args)))
    else:
        results = [run_one(*args) for args in jobs_args]

    summary = Summary()
    records = summary.summarize(cfg.mode, [r for reports in results for r in reports])
    summary.write(mode_dir, records)
    manifest = manifest.model_copy(update={'finished_at': datetime.now(timezone.utc)})
    (mode_dir / 'manifest.json').write_text(manifest.model_dump_json(indent=2))
    for r in records:
        click.echo(f"{r['mode']} {r['model']}: accuracy {r['mean_accuracy']:.4f} "
                   f"+/- {r['std_accuracy']:.4f} over {len(r['seeds'])} seed(s)")


# --- reporting ---
def collect_runs(root: Path) -> tuple[list[dict], list[str]]:
    '''Report records of every run under `root`, and one error line per broken run.'''
    records, errors = [], []
    run_dirs = sorted(p for p in root.glob('*/seed-*') if p.is_dir())
    for run_dir in run_dirs:
        if not (run_dir / 'metrics.jsonl').exists():
            errors.append(f"{run_dir}: metrics.jsonl missing")
            continue
        try:
            records += [r.model_dump(mode='json') for r in parse_report(run_dir)]
        except DataError as e:
            errors.append(f"{run_dir}: {e}")
    # reports written outside the mode/seed layout still count
    for path in report_paths(root):
        if path.parent not in run_dirs:
            records += [r.model_dump(mode='json') for r in parse_report(path)]
    return records, errors


def comparison_tables(records: list[dict]) -> dict[str, pd.DataFrame]:
    df = pd.DataFrame.from_records(records)
    df['order'] = df['mode'].map({m: i for i, m in enumerate(MODES)}).fillna(len(MODES))
    grouped = df.groupby(['order', 'mode', 'model'], sort=True)
    accuracy = grouped.agg(runs=('seed', 'count'), accuracy=('accuracy', 'mean'),
                           std=('accuracy', lambda s: s.std(ddof=0))).reset_index()
    distance = grouped.agg(a_distance=('a_distance', 'mean'), a_l_distance=('a_l_distance', 'mean')).reset_index()
    costs = pd.DataFrame.from_records([{'mode': r['mode'], **r['cost']} for r in records if r.get('cost')])
    if not costs.empty:
        costs = costs.drop_duplicates(subset=['name']).assign(
            size_mb=lambda c: c['model_size_bytes'] / 2 ** 20)[['name', 'parameter_count', 'size_mb', 'flops']]
    return {'accuracy': accuracy.drop(columns='order'), 'distance': distance.drop(columns='order'), 'cost': costs}


@log_command
@cli.command()
@click.argument('root', type=click.Path(file_okay=False), required=False)
@exit_codes
def report(root):
    '''Consolidate every run under ROOT into comparison tables.'''
    root = Path(root or config.OUT_ROOT)
    if not root.exists():
        raise DataError(f"no runs found under {root}")
    records, errors = collect_runs(root)
    if not records and not errors:
        raise DataError(f"no runs found under {root}")
    sections = []
    if records:
        for title, table in comparison_tables(records).items():
            if not table.empty:
                sections.append(f"# {title}\n{table.to_string(index=False, float_format=lambda v: f'{v:.4f}')}")
    for line in errors:
        sections.append(f"# error\n{line}")
    text = '\n\n'.join(sections) + '\n'
    (root / 'comparison.txt').write_text(text)
    click.echo(text)
    if errors:
        raise ReportError(f"{len(errors)} run(s) could not be reported")


@log_command
@cli.command()
@click.option('--nodes', type=click.IntRange(min=1), multiple=True, default=(32, 64, 128, 256),
              help='ARMA layer widths to cost (repeatable).')
@click.option('--config', 'config_path', type=click.Path(dir_okay=False),
              help='YAML experiment config; supplies graph k, ARMA stacks, classes and window.')
@click.option('--classes', 'n_classes', type=click.IntRange(min=2), default=None, help='Overrides data.n_classes.')
@click.option('--input-len', type=click.IntRange(min=8), default=None, help='Overrides data.window.')
@click.option('--out', default=None, help='Also write the table to this file.')
@exit_codes
def cost(nodes, config_path, n_classes, input_len, out):
    '''Parameter count, model size and FLOPs of the Teacher at each width and of the Student.'''
    cfg = load_config(config_path)
    n_classes = n_classes or cfg.data.n_classes
    input_len = input_len or cfg.data.window
    rows = [cost_report(build_teacher(n_classes, n, input_len, k=cfg.model.graph_k, stacks=cfg.model.arma_stacks))
            for n in sorted(set(nodes))]
    rows.append(cost_report(build_student(n_classes, input_len)))
    table = pd.DataFrame([{
        'model': r.name,
        'parameters': r.parameter_count,
        'size_mb_f32': r.model_size_bytes / 2 ** 20,
        'size_mb_f64': r.model_size_bytes_f64 / 2 ** 20,
        'mflops': r.flops / 1e6,
    } for r in rows])
    text = table.to_string(index=False, float_format=lambda v: f"{v:.4f}")
    click.echo(text)
    if out:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_text(text + '\n')
        Path(out).with_suffix('.jsonl').write_text(''.join(json.dumps(r.model_dump()) + '\n' for r in rows))


if __name__ == '__main__':
    cli()
