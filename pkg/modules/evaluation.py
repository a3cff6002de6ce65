import logging
from dataclasses import dataclass, field

import numpy as np
from pydantic import BaseModel, ConfigDict, model_validator

from modules.data import SignalDataset
from modules.errors import DataError
from modules.models import CostReport
from modules.nn import Module
from modules.tensor import Tensor, no_grad
from store.report import Reports

logger = logging.getLogger("kavi.eval")


def extract_features(model: Module, segments: np.ndarray, layer: str = 'logits',
                     batch_size: int = 128) -> np.ndarray:
    '''Inference-mode output of one named layer (fc1, fc2, fc4, logits), evaluated
    batch by batch in the given order.'''
    segments = np.asarray(segments, dtype=np.float64)
    was_training = model.training
    model.eval()
    chunks = []
    try:
        with no_grad():
            for start in range(0, len(segments), batch_size):
                out = model(Tensor(segments[start:start + batch_size]))
                chunks.append(getattr(out, layer).data)
    finally:
        model.train(was_training)
    if not chunks:
        raise DataError("no segments to evaluate")
    return np.concatenate(chunks)


def predict(model: Module, segments: np.ndarray, batch_size: int = 128) -> np.ndarray:
    '''Raw logits (N x n_c) in inference mode; argmax gives the predicted class.'''
    return extract_features(model, segments, 'logits', batch_size)


def distance_layer(model: Module) -> str:
    '''Deepest hidden layer shared with the discrepancy losses.'''
    return 'fc4' if model.kind == 'student' else 'fc2'


def confusion_matrix(labels, predictions, n_classes: int) -> np.ndarray:
    '''Rows are true classes, columns predicted classes.'''
    conf = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(conf, (np.asarray(labels, dtype=np.int64), np.asarray(predictions, dtype=np.int64)), 1)
    return conf


def accuracy_and_confusion(model: Module, dataset: SignalDataset,
                           batch_size: int = 128) -> tuple[float, np.ndarray]:
    if len(dataset) == 0:
        raise DataError("cannot evaluate on an empty dataset")
    if dataset.labels is None:
        raise DataError(f"{dataset.domain} dataset is unlabeled")
    # argmax returns the first maximum: lowest class index on ties
    predictions = predict(model, dataset.segments, batch_size).argmax(axis=1)
    conf = confusion_matrix(dataset.labels, predictions, dataset.n_classes)
    return float(np.trace(conf) / conf.sum()), conf


class LinearSeparator:
    '''Hinge-loss linear classifier trained by full-batch subgradient descent on
    standardized features. Labels are +1 / -1.'''

    def __init__(self, reg: float = 1e-3, lr: float = 0.1, epochs: int = 300):
        self.reg = reg
        self.lr = lr
        self.epochs = epochs
        self.w: np.ndarray | None = None
        self.b = 0.0

    def fit(self, x: np.ndarray, y: np.ndarray) -> "LinearSeparator":
        x = np.asarray(x, dtype=np.float64)
        self.mean = x.mean(axis=0)
        std = x.std(axis=0)
        self.std = np.where(std > 0, std, 1.0)
        z = (x - self.mean) / self.std
        n = len(z)
        self.w = np.zeros(z.shape[1])
        self.b = 0.0
        for epoch in range(self.epochs):
            active = y * (z @ self.w + self.b) < 1.0
            grad_w = self.reg * self.w - (y[active, None] * z[active]).sum(axis=0) / n
            grad_b = -y[active].sum() / n
            step = self.lr / np.sqrt(1.0 + epoch)
            self.w -= step * grad_w
            self.b -= step * grad_b
        return self

    def decision(self, x: np.ndarray) -> np.ndarray:
        return ((np.asarray(x, dtype=np.float64) - self.mean) / self.std) @ self.w + self.b

    def predict(self, x: np.ndarray) -> np.ndarray:
        return np.where(self.decision(x) >= 0, 1.0, -1.0)

    def error(self, x: np.ndarray, y: np.ndarray) -> float:
        return float((self.predict(x) != y).mean())


def domain_classifier_error(features_s, features_t, seed: int = 0, repeats: int = 5) -> float:
    '''Held-out error of a linear classifier separating the two domains, averaged over
    `repeats` fixed 50/50 splits of each domain.'''
    fs = np.asarray(features_s, dtype=np.float64)
    ft = np.asarray(features_t, dtype=np.float64)
    if len(fs) < 2 or len(ft) < 2:
        raise ValueError(f"need at least 2 samples per domain, got {len(fs)} and {len(ft)}")
    errors = []
    for r in range(repeats):
        rng = np.random.default_rng((seed, r))
        ps, pt = rng.permutation(len(fs)), rng.permutation(len(ft))
        hs, ht = len(fs) // 2, len(ft) // 2
        x_train = np.concatenate([fs[ps[:hs]], ft[pt[:ht]]])
        y_train = np.concatenate([np.ones(hs), -np.ones(ht)])
        x_test = np.concatenate([fs[ps[hs:]], ft[pt[ht:]]])
        y_test = np.concatenate([np.ones(len(fs) - hs), -np.ones(len(ft) - ht)])
        errors.append(LinearSeparator().fit(x_train, y_train).error(x_test, y_test))
    return float(np.mean(errors))


def a_distance_from_error(zeta: float) -> float:
    '''2(1 - 2 zeta): 2 for perfectly separable domains, 0 at chance, negative below chance.'''
    return 2.0 * (1.0 - 2.0 * zeta)


def a_distance(features_s, features_t, seed: int = 0, repeats: int = 5) -> float:
    '''Proxy A-distance in [0, 2]; the classifier error is clipped to [0, 0.5] first.'''
    zeta = domain_classifier_error(features_s, features_t, seed, repeats)
    raw = a_distance_from_error(zeta)
    logger.debug("A-distance raw %.4f (classifier error %.4f)", raw, zeta)
    return a_distance_from_error(min(max(zeta, 0.0), 0.5))


@dataclass
class SubdomainDistances:
    per_class: dict[int, float]
    priors: dict[int, float]
    excluded: list[int] = field(default_factory=list)

    @property
    def value(self) -> float:
        return combine_subdomain_distances(self.per_class, self.priors)


def combine_subdomain_distances(per_class: dict[int, float], priors: dict[int, float]) -> float:
    '''Prior-weighted mean of per-class distances, renormalized over the included classes.'''
    mass = sum(priors[c] for c in per_class)
    if not per_class or mass <= 0:
        raise DataError("no class is present in both domains")
    return float(sum(priors[c] * d for c, d in per_class.items()) / mass)


def subdomain_distances(features_s, labels_s, features_t, pseudo_labels_t, n_classes: int | None = None,
                        seed: int = 0, repeats: int = 5) -> SubdomainDistances:
    '''Per-class A-distances between source samples of class c and target samples
    pseudo-labeled c, with target class priors. Classes with fewer than 2 samples
    in either domain are excluded.'''
    fs = np.asarray(features_s, dtype=np.float64)
    ft = np.asarray(features_t, dtype=np.float64)
    ys = np.asarray(labels_s, dtype=np.int64)
    yt = np.asarray(pseudo_labels_t)
    yt = yt.argmax(axis=1) if yt.ndim == 2 else yt.astype(np.int64)
    n_classes = n_classes or int(max(ys.max(), yt.max()) + 1)
    counts_t = np.bincount(yt, minlength=n_classes)
    priors = {c: counts_t[c] / len(yt) for c in range(n_classes)}
    per_class, excluded = {}, []
    for c in range(n_classes):
        s_c, t_c = fs[ys == c], ft[yt == c]
        if len(s_c) < 2 or len(t_c) < 2:
            excluded.append(c)
            continue
        per_class[c] = a_distance(s_c, t_c, seed, repeats)
    if excluded:
        logger.warning("classes %s excluded from the subdomain distance; priors renormalized", excluded)
    return SubdomainDistances(per_class, priors, excluded)


def a_l_distance(features_s, labels_s, features_t, pseudo_labels_t, n_classes: int | None = None,
                 seed: int = 0, repeats: int = 5) -> float:
    '''Prior-weighted subdomain A-distance.'''
    return subdomain_distances(features_s, labels_s, features_t, pseudo_labels_t, n_classes, seed, repeats).value


def precision_recall(conf: np.ndarray) -> tuple[list[float], list[float]]:
    '''Per-class precision and recall; a class never predicted (or absent) scores 0.'''
    conf = np.asarray(conf, dtype=np.float64)
    tp = np.diag(conf)
    predicted, actual = conf.sum(axis=0), conf.sum(axis=1)
    precision = np.divide(tp, predicted, out=np.zeros_like(tp), where=predicted > 0)
    recall = np.divide(tp, actual, out=np.zeros_like(tp), where=actual > 0)
    return precision.tolist(), recall.tolist()


class EvalReport(BaseModel):
    model_config = ConfigDict(frozen=True)

    model: str
    mode: str
    seed: int
    config_hash: str
    class_names: list[str]
    accuracy: float
    confusion: list[list[int]]
    precision: list[float]
    recall: list[float]
    a_distance: float | None = None
    a_l_distance: float | None = None
    cost: CostReport | None = None

    @model_validator(mode='after')
    def _consistent(self):
        n = len(self.class_names)
        if not self.confusion or len(self.confusion) != n or any(len(row) != n for row in self.confusion):
            raise ValueError(f"confusion matrix must be a nonempty {n} x {n} grid")
        total = sum(map(sum, self.confusion))
        if total == 0:
            raise ValueError("confusion matrix holds no samples")
        trace = sum(self.confusion[i][i] for i in range(n))
        if abs(self.accuracy - trace / total) > 1e-9:
            raise ValueError(f"accuracy {self.accuracy} disagrees with confusion trace/total {trace / total}")
        if len(self.precision) != n or len(self.recall) != n:
            raise ValueError("precision and recall need one entry per class")
        return self

    @property
    def support(self) -> list[int]:
        return [sum(row) for row in self.confusion]


def build_report(name: str, accuracy: float, conf: np.ndarray, class_names, mode: str, seed: int,
                 config_hash: str, a_distance: float | None = None, a_l_distance: float | None = None,
                 cost: CostReport | None = None) -> EvalReport:
    precision, recall = precision_recall(conf)
    return EvalReport(model=name, mode=mode, seed=seed, config_hash=config_hash, class_names=list(class_names),
                      accuracy=accuracy, confusion=np.asarray(conf).tolist(), precision=precision,
                      recall=recall, a_distance=a_distance, a_l_distance=a_l_distance, cost=cost)


def emit_report(reports: EvalReport | list[EvalReport], path) -> None:
    '''Writes report.txt (human-readable) and report.jsonl (one record per model) under `path`.'''
    reports = reports if isinstance(reports, list) else [reports]
    Reports().write(path, [r.model_dump(mode='json') for r in reports])


def parse_report(path) -> list[EvalReport]:
    '''Reads report.jsonl back; a record failing validation raises.'''
    return [EvalReport.model_validate(record) for record in Reports().read(path)]
