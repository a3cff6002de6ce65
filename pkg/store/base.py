import json
import logging
from pathlib import Path

import pandas as pd
import pandera.pandas as pa
import voluptuous as vol

from modules.errors import DataError

logger = logging.getLogger("kavi.store")


class Base():
    '''Line-delimited JSON record store. Records are validated with a voluptuous
    schema, frames with a pandera schema; both extend the meta schemas below.'''
    vol_meta_schema = vol.Schema({
        vol.Required('kind'): vol.Coerce(str)
    })
    pa_meta_schema = pa.DataFrameSchema({
        'kind': pa.Column(pa.String)
    })

    def __init__(self, name: str, vol_schema: vol.Schema = None, pa_schema: pa.DataFrameSchema = None,
                 filename: str = None):
        self.name = name
        self.filename = filename or f"{name}.jsonl"
        if vol_schema:
            self.vol_schema = vol.Schema({**self.vol_meta_schema.schema, **vol_schema.schema},
                                         extra=vol_schema.extra)
        if pa_schema:
            self.pa_schema = pa.DataFrameSchema({**self.pa_meta_schema.columns, **pa_schema.columns},
                                                checks=pa_schema.checks, coerce=True)

    def validate(self, data: dict | pd.DataFrame):
        if isinstance(data, dict) and hasattr(self, 'vol_schema'):
            return self.vol_schema(data)
        elif isinstance(data, pd.DataFrame) and hasattr(self, 'pa_schema'):
            return self.pa_schema.validate(data)
        elif isinstance(data, dict) and not hasattr(self, 'vol_schema'):
            raise TypeError(f"{type(self).__name__} does not accept dictionaries!")
        elif isinstance(data, pd.DataFrame) and not hasattr(self, 'pa_schema'):
            raise TypeError(f"{type(self).__name__} does not accept Pandas dataframes!")
        else:
            raise TypeError("Input one of dictionary or Pandas dataframe!")

    def path(self, location: str | Path) -> Path:
        '''A directory resolves to the store's file inside it.'''
        location = Path(location)
        return location / self.filename if location.is_dir() or not location.suffix else location

    def append(self, location: str | Path, record: dict):
        record = self.validate(record)
        path = self.path(location)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open('a') as f:
            f.write(json.dumps(record) + '\n')

    def write(self, location: str | Path, records: list[dict]):
        records = [self.validate(r) for r in records]
        path = self.path(location)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(''.join(json.dumps(r) + '\n' for r in records))

    def read(self, location: str | Path) -> list[dict]:
        path = self.path(location)
        if not path.exists():
            raise DataError(f"{self.name}: {path} not found")
        records = []
        for lineno, line in enumerate(path.read_text().splitlines(), start=1):
            if not line.strip():
                continue
            try:
                records.append(self.validate(json.loads(line)))
            except json.JSONDecodeError as e:
                raise DataError(f"{path}:{lineno}: malformed record: {e.msg}") from None
            except vol.Invalid as e:
                raise DataError(f"{path}:{lineno}: invalid {self.name} record: {e}") from None
        return records

    def frame(self, location: str | Path, kind: str | None = None) -> pd.DataFrame:
        records = self.read(location)
        if kind is not None:
            records = [r for r in records if r['kind'] == kind]
        return self.validate(pd.DataFrame.from_records(records))

    def __call__(self, location: str | Path):
        '''A record sink bound to `location`.'''
        def sink(record: dict):
            self.append(location, record)
        return sink
