import logging
import re
from pathlib import Path

import numpy as np
import pandas as pd
import pandera.pandas as pa
from pandera.errors import SchemaError, SchemaErrors
import voluptuous as vol

from modules.data import DOMAINS, SignalDataset, segment_signal
from modules.errors import DataError

from .base import Base

logger = logging.getLogger("kavi.store")

MANIFEST_NAME = 'manifest.tsv'
_HEADER = re.compile(r'#\s*window=(\d+)\s+overlap=([0-9.]+)')


class Archive(Base):
    '''Manifest of raw signal files: `<relative-path>\\t<class-name>\\t<domain>\\t<label-index>`,
    optionally headed by `# window=<n> overlap=<f>`. Raw files hold little-endian float64.'''

    def __init__(self):
        vol_schema = vol.Schema({
            vol.Required('path'): vol.All(str, vol.Length(min=1)),
            vol.Required('class_name'): vol.All(str, vol.Length(min=1)),
            vol.Required('domain'): vol.In(DOMAINS),
            vol.Required('label'): vol.All(vol.Coerce(int), vol.Range(min=0)),
        })
        pa_schema = pa.DataFrameSchema({
            'path': pa.Column(pa.String),
            'class_name': pa.Column(pa.String),
            'domain': pa.Column(pa.String, pa.Check.isin(DOMAINS)),
            'label': pa.Column(pa.Int64, pa.Check.ge(0)),
        })
        super().__init__('archive', vol_schema, pa_schema, filename=MANIFEST_NAME)

    def manifest(self, location) -> tuple[pd.DataFrame, dict]:
        path = self.path(location)
        if not path.exists():
            raise DataError(f"manifest {path} not found")
        header = {}
        first = path.read_text().split('\n', 1)[0]
        if (m := _HEADER.match(first)):
            header = {'window': int(m.group(1)), 'overlap': float(m.group(2))}
        try:
            df = pd.read_csv(path, sep='\t', comment='#', header=None, dtype=str,
                             names=['path', 'class_name', 'domain', 'label'], keep_default_na=False)
        except pd.errors.EmptyDataError:
            df = pd.DataFrame()
        if df.empty:
            raise DataError(f"manifest {path} lists no files")
        df['kind'] = 'manifest'
        try:
            df = self.validate(df)
        except (SchemaError, SchemaErrors) as e:
            raise DataError(f"manifest {path}: {e}") from None
        return df, header


def load_archive(location, domain: str | None = None, window: int | None = None,
                 overlap: float | None = None) -> SignalDataset:
    '''Read every file listed in the manifest (optionally one domain of it) and
    segment it. Window and overlap default to the manifest header, else 1024 / 0.5.'''
    store = Archive()
    df, header = store.manifest(location)
    root = store.path(location).parent
    window = window or header.get('window', 1024)
    overlap = overlap if overlap is not None else header.get('overlap', 0.5)
    if domain is not None:
        df = df[df['domain'] == domain]
    domains = set(df['domain'])
    if len(domains) != 1:
        raise DataError(f"archive must hold exactly one domain, found {sorted(domains) or 'none'}")

    names = {}
    for label, class_name in zip(df['label'], df['class_name']):
        if names.setdefault(int(label), class_name) != class_name:
            raise DataError(f"label {label} maps to both {names[int(label)]!r} and {class_name!r}")
    n_classes = max(names) + 1
    if sorted(names) != list(range(n_classes)):
        raise DataError(f"labels must cover 0..{n_classes - 1}, got {sorted(names)}")

    segments, labels = [], []
    for row in df.itertuples(index=False):
        file = root / row.path
        if not file.exists():
            raise DataError(f"signal file {file} not found")
        raw = np.fromfile(file, dtype='<f8')
        if not np.isfinite(raw).all():
            raise DataError(f"{file}: non-finite samples")
        segs = segment_signal(raw, window, overlap)
        segments.append(segs)
        labels.append(np.full(len(segs), int(row.label)))
    logger.info("loaded %d segments from %s", sum(len(s) for s in segments), root)
    return SignalDataset(np.concatenate(segments), np.concatenate(labels), domains.pop(),
                         tuple(names[c] for c in range(n_classes)),
                         {'window': window, 'overlap': overlap, 'archive': str(root)})


def export_archive(dataset: SignalDataset, location) -> Path:
    '''Write one raw file per class (segments concatenated, dataset order kept) and the
    manifest, declaring overlap 0 so loading reproduces the segments exactly.'''
    if dataset.labels is None:
        raise DataError("only labeled datasets can be exported")
    if len(dataset) == 0:
        raise DataError("cannot export an empty dataset")
    root = Path(location)
    root.mkdir(parents=True, exist_ok=True)
    store = Archive()
    rows = []
    for label, class_name in enumerate(dataset.class_names):
        segs = dataset.segments[dataset.labels == label]
        if len(segs) == 0:
            continue
        rel = f"{label:02d}-{class_name}.f8"
        segs.astype('<f8').tofile(root / rel)
        rows.append(store.validate({'path': rel, 'class_name': class_name,
                                    'domain': dataset.domain, 'label': label, 'kind': 'manifest'}))
    lines = [f"# window={dataset.window} overlap=0"]
    lines += [f"{r['path']}\t{r['class_name']}\t{r['domain']}\t{r['label']}" for r in rows]
    manifest = root / MANIFEST_NAME
    manifest.write_text('\n'.join(lines) + '\n')
    return manifest
