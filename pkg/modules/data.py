import logging
from dataclasses import dataclass, field, replace

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from config import config
from modules.errors import DataError

logger = logging.getLogger("kavi.data")

DOMAINS = ('source', 'target')

# characteristic defect rates (Hz at speed factor 1) and resonance bands of the
# three fault locations; severities scale the impulse amplitude
_FAULT_RATES = (162.2, 107.4, 141.1)
_FAULT_RESONANCE = (3000.0, 3600.0, 2400.0)
_FAULT_LOCATIONS = ('inner', 'outer', 'ball')
_SHAFT_HZ = 29.95


@dataclass(frozen=True)
class ClassSignature:
    name: str
    impulse_rate_hz: float
    resonance_hz: float
    amplitude: float
    damping: float = 900.0
    shaft_amplitude: float = 0.1


@dataclass(frozen=True)
class SynthSpec:
    n_classes: int = 10
    samples_per_class: int = 100
    speed_factor: float = 1.0
    load_factor: float = 1.0
    noise_level: float = 0.05
    seed: int = 0
    window: int = config.SEGMENT_LENGTH
    overlap: float = 0.5
    sample_rate: float = config.SAMPLE_RATE_HZ
    # relative timing jitter of each impulse, as a fraction of the period
    jitter: float = 0.01
    classes: tuple[ClassSignature, ...] | None = None

    def __post_init__(self):
        if self.classes is None:
            object.__setattr__(self, 'classes', default_classes(self.n_classes))
        if len(self.classes) != self.n_classes:
            raise DataError(f"{len(self.classes)} class signatures for n_classes={self.n_classes}")
        if self.samples_per_class < 1:
            raise DataError(f"samples_per_class must be positive, got {self.samples_per_class}")
        if self.speed_factor <= 0 or self.load_factor <= 0 or self.noise_level < 0:
            raise DataError("speed and load factors must be positive, noise level nonnegative")
        if not 0.0 <= self.overlap < 1.0:
            raise DataError(f"overlap must be in [0, 1), got {self.overlap}")
        nyquist = self.sample_rate / 2.0
        for c in self.classes:
            rate = c.impulse_rate_hz * self.speed_factor
            if rate < 0 or rate >= nyquist or not 0 < c.resonance_hz < nyquist:
                raise DataError(f"class {c.name!r}: frequencies must lie below Nyquist ({nyquist} Hz)")

    @property
    def class_names(self) -> tuple[str, ...]:
        return tuple(c.name for c in self.classes)


def default_classes(n_classes: int) -> tuple[ClassSignature, ...]:
    '''Class 0 is the healthy state; the rest cycle fault location, then severity.'''
    if n_classes < 1:
        raise DataError(f"n_classes must be positive, got {n_classes}")
    classes = [ClassSignature('normal', 0.0, 3000.0, 0.0)]
    for c in range(1, n_classes):
        loc, severity = (c - 1) % 3, (c - 1) // 3 + 1
        classes.append(ClassSignature(f"{_FAULT_LOCATIONS[loc]}-{severity}", _FAULT_RATES[loc],
                                      _FAULT_RESONANCE[loc], 0.5 * severity))
    return tuple(classes)


@dataclass
class SignalDataset:
    segments: np.ndarray
    labels: np.ndarray | None
    domain: str
    class_names: tuple[str, ...]
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.domain not in DOMAINS:
            raise DataError(f"domain must be one of {DOMAINS}, got {self.domain!r}")
        self.segments = np.asarray(self.segments, dtype=np.float64)
        if self.segments.ndim != 2:
            raise DataError(f"segments must be n x window, got shape {self.segments.shape}")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (len(self.segments),):
                raise DataError("one label per segment required")
            if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
                raise DataError(f"labels outside [0, {self.n_classes})")

    def __len__(self) -> int:
        return len(self.segments)

    @property
    def n_classes(self) -> int:
        return len(self.class_names)

    @property
    def window(self) -> int:
        return self.segments.shape[1]

    def subset(self, index) -> "SignalDataset":
        labels = None if self.labels is None else self.labels[index]
        return SignalDataset(self.segments[index], labels, self.domain, self.class_names, dict(self.metadata))

    def class_counts(self) -> np.ndarray:
        if self.labels is None:
            raise DataError(f"{self.domain} dataset is unlabeled")
        return np.bincount(self.labels, minlength=self.n_classes)


def segment_signal(raw, window: int = config.SEGMENT_LENGTH, overlap: float = 0.5) -> np.ndarray:
    '''Sliding windows with stride round(window * (1 - overlap)).'''
    raw = np.asarray(raw, dtype=np.float64).reshape(-1)
    if not 0.0 <= overlap < 1.0:
        raise DataError(f"overlap must be in [0, 1), got {overlap}")
    if window < 1:
        raise DataError(f"window must be positive, got {window}")
    if len(raw) < window:
        raise DataError(f"signal of {len(raw)} samples is shorter than the {window}-sample window")
    stride = max(1, int(round(window * (1.0 - overlap))))
    return sliding_window_view(raw, window)[::stride].copy()


def _impulse_response(sig: ClassSignature, sample_rate: float) -> np.ndarray:
    # long enough for the envelope to fall below 1e-4
    n = max(8, int(np.ceil(np.log(1e4) / sig.damping * sample_rate)))
    t = np.arange(n) / sample_rate
    h = np.exp(-sig.damping * t) * np.sin(2 * np.pi * sig.resonance_hz * t)
    return h / np.abs(h).max()


def synth_record(spec: SynthSpec, class_index: int, length: int) -> np.ndarray:
    '''One continuous record of a class: impulse train through a damped resonance,
    shaft tone, white noise. Pure function of (spec, class_index, length).'''
    sig = spec.classes[class_index]
    rng = np.random.default_rng((spec.seed, class_index))
    fs = spec.sample_rate
    t = np.arange(length) / fs
    out = sig.shaft_amplitude * spec.load_factor * np.sin(2 * np.pi * _SHAFT_HZ * spec.speed_factor * t
                                                           + rng.uniform(0, 2 * np.pi))
    rate = sig.impulse_rate_hz * spec.speed_factor
    if rate > 0 and sig.amplitude > 0:
        period = fs / rate
        n_impulses = int(length / period) + 2
        starts = (rng.uniform(0, period) + period * np.arange(n_impulses)
                  + rng.normal(0, spec.jitter * period, n_impulses))
        starts = np.round(starts).astype(np.int64)
        starts = starts[(starts >= 0) & (starts < length)]
        train = np.zeros(length)
        train[starts] = sig.amplitude * spec.load_factor
        out = out + np.convolve(train, _impulse_response(sig, fs))[:length]
    if spec.noise_level > 0:
        out = out + rng.normal(0.0, spec.noise_level, length)
    return out


def synth_domain(spec: SynthSpec, domain: str) -> SignalDataset:
    stride = max(1, int(round(spec.window * (1.0 - spec.overlap))))
    length = spec.window + (spec.samples_per_class - 1) * stride
    segments, labels = [], []
    for c in range(spec.n_classes):
        segs = segment_signal(synth_record(spec, c, length), spec.window, spec.overlap)
        segments.append(segs)
        labels.append(np.full(len(segs), c))
    metadata = {'seed': spec.seed, 'speed_factor': spec.speed_factor, 'load_factor': spec.load_factor,
                'noise_level': spec.noise_level, 'sample_rate': spec.sample_rate, 'overlap': spec.overlap}
    logger.debug("synthesized %s domain: %d classes x %d segments", domain, spec.n_classes, spec.samples_per_class)
    return SignalDataset(np.concatenate(segments), np.concatenate(labels), domain, spec.class_names, metadata)


def default_target_spec(source: SynthSpec) -> SynthSpec:
    '''Shifted operating condition: faster shaft, lighter load, noisier sensor.'''
    return replace(source, speed_factor=source.speed_factor * 1.15, load_factor=source.load_factor * 0.8,
                   noise_level=source.noise_level * 2.0 if source.noise_level else 0.1)


def synth_domain_pair(spec_source: SynthSpec, spec_target: SynthSpec) -> tuple[SignalDataset, SignalDataset]:
    if spec_source.class_names != spec_target.class_names:
        raise DataError("source and target specs must declare the same classes")
    if spec_source.window != spec_target.window:
        raise DataError("source and target specs must share the segment window")
    return synth_domain(spec_source, 'source'), synth_domain(spec_target, 'target')


def split_dataset(ds: SignalDataset, ratios: tuple[float, float, float] = (0.70, 0.15, 0.15),
                  seed: int = 0) -> tuple[SignalDataset, SignalDataset, SignalDataset]:
    '''Stratified train/val/test partition; unlabeled datasets are split as one stratum.'''
    if len(ratios) != 3 or any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise DataError(f"ratios must be three nonnegative fractions summing to 1, got {ratios}")
    rng = np.random.default_rng(seed)
    strata = [np.arange(len(ds))] if ds.labels is None else \
        [np.flatnonzero(ds.labels == c) for c in range(ds.n_classes)]
    parts = ([], [], [])
    for c, idx in enumerate(strata):
        if len(idx) == 0:
            continue
        if len(idx) < 3:
            raise DataError(f"class {ds.class_names[c]!r} has {len(idx)} sample(s); at least 3 needed to split")
        idx = rng.permutation(idx)
        n_train = int(round(ratios[0] * len(idx)))
        n_val = int(round(ratios[1] * len(idx)))
        parts[0].append(idx[:n_train])
        parts[1].append(idx[n_train:n_train + n_val])
        parts[2].append(idx[n_train + n_val:])
    return tuple(ds.subset(np.sort(np.concatenate(p))) for p in parts)


def standardize(segments: np.ndarray) -> np.ndarray:
    '''Zero mean, unit variance per segment; constant segments are only centered.'''
    segments = np.asarray(segments, dtype=np.float64)
    centered = segments - segments.mean(axis=1, keepdims=True)
    std = centered.std(axis=1, keepdims=True)
    return centered / np.where(std > 0, std, 1.0)
