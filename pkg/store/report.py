import logging
from pathlib import Path

import pandas as pd
import pandera.pandas as pa
import voluptuous as vol

from .base import Base

logger = logging.getLogger("kavi.store")


def _unit_interval(v):
    v = float(v)
    if not 0.0 <= v <= 1.0:
        raise vol.Invalid(f"{v} outside [0, 1]")
    return v


def _confusion(v):
    if not isinstance(v, list) or not v:
        raise vol.Invalid("confusion matrix must be a nonempty grid")
    n = len(v)
    for row in v:
        if not isinstance(row, list) or len(row) != n or any(not isinstance(c, int) or c < 0 for c in row):
            raise vol.Invalid(f"confusion matrix must be {n} x {n} nonnegative integers")
    return v


_cost_schema = vol.Schema({
    vol.Required('name'): str,
    vol.Required('parameter_count'): vol.All(int, vol.Range(min=0)),
    vol.Required('model_size_bytes'): vol.All(int, vol.Range(min=0)),
    vol.Required('model_size_bytes_f64'): vol.All(int, vol.Range(min=0)),
    vol.Required('flops'): vol.All(int, vol.Range(min=0)),
})

_class_table = pa.DataFrameSchema({
    'class': pa.Column(pa.String),
    'precision': pa.Column(pa.Float64, pa.Check.in_range(0, 1)),
    'recall': pa.Column(pa.Float64, pa.Check.in_range(0, 1)),
    'support': pa.Column(pa.Int64, pa.Check.ge(0)),
}, coerce=True)


def _fmt(v, spec='.4f'):
    return 'n/a' if v is None else format(v, spec)


class Reports(Base):
    '''Evaluation reports: report.jsonl (one record per model) and report.txt beside it.'''

    def __init__(self):
        vol_schema = vol.Schema({
            vol.Required('model'): str,
            vol.Required('mode'): str,
            vol.Required('seed'): vol.All(int, vol.Range(min=0)),
            vol.Required('config_hash'): vol.All(str, vol.Length(min=8)),
            vol.Required('class_names'): [str],
            vol.Required('accuracy'): _unit_interval,
            vol.Required('confusion'): _confusion,
            vol.Required('precision'): [_unit_interval],
            vol.Required('recall'): [_unit_interval],
            vol.Required('a_distance'): vol.Any(None, vol.All(vol.Coerce(float), vol.Range(min=-2, max=2))),
            vol.Required('a_l_distance'): vol.Any(None, vol.All(vol.Coerce(float), vol.Range(min=-2, max=2))),
            vol.Required('cost'): vol.Any(None, _cost_schema),
        })
        super().__init__('report', vol_schema)

    def write(self, location, records: list[dict]):
        records = [{'kind': 'report', **r} for r in records]
        super().write(location, records)
        text_path = self.path(location).with_suffix('.txt')
        text_path.write_text('\n'.join(self.render(r) for r in records))

    def read(self, location) -> list[dict]:
        return [{k: v for k, v in r.items() if k != 'kind'} for r in super().read(location)]

    def render(self, record: dict) -> str:
        lines = [f"== {record['model']} (mode {record['mode']}, seed {record['seed']}, "
                 f"config {record['config_hash'][:12]})",
                 f"accuracy      {record['accuracy']:.6f}",
                 f"a_distance    {_fmt(record['a_distance'])}",
                 f"a_l_distance  {_fmt(record['a_l_distance'])}"]
        cost = record.get('cost')
        if cost:
            lines.append(f"parameters {cost['parameter_count']}  size {cost['model_size_bytes'] / 2 ** 20:.4f} MB"
                         f"  flops {cost['flops']}")
        table = _class_table.validate(pd.DataFrame({
            'class': record['class_names'],
            'precision': record['precision'],
            'recall': record['recall'],
            'support': [sum(row) for row in record['confusion']],
        }))
        lines.append(table.to_string(index=False, float_format=lambda v: f"{v:.4f}"))
        lines.append("confusion (rows true, columns predicted)")
        width = max(len(str(c)) for row in record['confusion'] for c in row)
        lines += [' '.join(str(c).rjust(width) for c in row) for row in record['confusion']]
        return '\n'.join(lines) + '\n'


class Summary(Base):
    '''Seed-averaged records and cost rows, one file per output root.'''

    def __init__(self):
        vol_schema = vol.Schema({
            vol.Required('mode'): str,
            vol.Required('model'): str,
            vol.Required('seeds'): [int],
            vol.Required('mean_accuracy'): _unit_interval,
            vol.Required('std_accuracy'): vol.All(vol.Coerce(float), vol.Range(min=0)),
            vol.Optional('mean_a_distance'): vol.Any(None, vol.Coerce(float)),
            vol.Optional('mean_a_l_distance'): vol.Any(None, vol.Coerce(float)),
        }, extra=vol.PREVENT_EXTRA)
        pa_schema = pa.DataFrameSchema({
            'mode': pa.Column(pa.String),
            'model': pa.Column(pa.String),
            'mean_accuracy': pa.Column(pa.Float64, pa.Check.in_range(0, 1)),
            'std_accuracy': pa.Column(pa.Float64, pa.Check.ge(0)),
        })
        super().__init__('summary', vol_schema, pa_schema)

    def summarize(self, mode: str, reports: list[dict]) -> list[dict]:
        '''Average report records of several seeds, one summary per model name.'''
        df = pd.DataFrame.from_records(reports)
        records = []
        for model, group in df.groupby('model', sort=False):
            records.append(self.validate({
                'kind': 'summary',
                'mode': mode,
                'model': model,
                'seeds': sorted(int(s) for s in group['seed']),
                'mean_accuracy': float(group['accuracy'].mean()),
                'std_accuracy': float(group['accuracy'].std(ddof=0)),
                'mean_a_distance': _mean_or_none(group['a_distance']),
                'mean_a_l_distance': _mean_or_none(group['a_l_distance']),
            }))
        return records


def _mean_or_none(col: pd.Series):
    col = col.dropna()
    return float(col.mean()) if len(col) else None


def report_paths(root: str | Path) -> list[Path]:
    return sorted(Path(root).glob('**/report.jsonl'))
