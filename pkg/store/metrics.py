import numpy as np
import pandera.pandas as pa
import voluptuous as vol

from .base import Base

_LOSSES = ('cls', 'd_z1', 'd_z2', 'sda', 'kd_t', 'kd_s', 'total')
_ACCURACIES = ('teacher_val_acc_s', 'teacher_val_acc_t', 'student_val_acc_s', 'student_val_acc_t')


def _finite(v):
    v = float(v)
    if not np.isfinite(v):
        raise vol.Invalid(f"non-finite value {v}")
    return v


def _accuracy(v):
    if v is None:
        return None
    v = float(v)
    if not 0.0 <= v <= 1.0:
        raise vol.Invalid(f"accuracy {v} outside [0, 1]")
    return v


_step_schema = vol.Schema({
    vol.Required('kind'): 'step',
    vol.Required('epoch'): vol.All(int, vol.Range(min=1)),
    vol.Required('step'): vol.All(int, vol.Range(min=0)),
    vol.Required('phase'): str,
    **{vol.Required(k): _finite for k in _LOSSES},
    vol.Required('lambda_sda'): vol.All(vol.Coerce(float), vol.Range(min=0)),
    vol.Required('lambda_e'): vol.All(vol.Coerce(float), vol.Range(min=0, max=1)),
    vol.Required('shared_classes'): vol.All(int, vol.Range(min=0)),
})

_epoch_schema = vol.Schema({
    vol.Required('kind'): 'epoch',
    vol.Required('epoch'): vol.All(int, vol.Range(min=0)),
    vol.Required('lambda_sda'): vol.Coerce(float),
    vol.Required('lambda_e'): vol.Coerce(float),
    **{vol.Optional(k): _finite for k in _LOSSES},
    **{vol.Required(k): _accuracy for k in _ACCURACIES},
})

_phase_schema = vol.Schema({
    vol.Required('kind'): 'phase',
    vol.Required('epoch'): vol.All(int, vol.Range(min=1)),
    vol.Required('phase'): str,
})


def _mixed_total(df):
    '''Logged total equals (1 - lambda_e) * sda + lambda_e * (kd_t + kd_s).'''
    expected = (1 - df['lambda_e']) * df['sda'] + df['lambda_e'] * (df['kd_t'] + df['kd_s'])
    return np.isclose(df['total'], expected, rtol=1e-9, atol=1e-12)


class MetricsLog(Base):
    '''Per-step and per-epoch training records, plus phase-boundary markers.'''
    schemas = {'step': _step_schema, 'epoch': _epoch_schema, 'phase': _phase_schema}

    def __init__(self):
        vol_schema = vol.Schema({}, extra=vol.ALLOW_EXTRA)
        pa_schema = pa.DataFrameSchema({
            'epoch': pa.Column(pa.Int64, pa.Check.ge(1)),
            'step': pa.Column(pa.Int64, pa.Check.ge(0)),
            'phase': pa.Column(pa.String),
            **{k: pa.Column(pa.Float64) for k in _LOSSES},
            'lambda_sda': pa.Column(pa.Float64, pa.Check.ge(0)),
            'lambda_e': pa.Column(pa.Float64, pa.Check.in_range(0, 1)),
            'shared_classes': pa.Column(pa.Int64),
        }, checks=[pa.Check(_mixed_total, error="total disagrees with its parts")])
        super().__init__('metrics', vol_schema, pa_schema)

    def validate(self, data):
        if isinstance(data, dict):
            schema = self.schemas.get(data.get('kind'))
            if schema is None:
                raise vol.Invalid(f"unknown record kind {data.get('kind')!r}")
            return schema(data)
        return super().validate(data)

    def steps(self, location):
        '''Step records as a validated frame.'''
        return self.frame(location, kind='step')

    def epochs(self, location) -> list[dict]:
        return [r for r in self.read(location) if r['kind'] == 'epoch']
