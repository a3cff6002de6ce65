import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from modules.data import SignalDataset, split_dataset, standardize
from modules.discrepancy import (class_weights, elmmsd, hard_class_weights, lambda_sda, lmmd_baseline,
                                 mmsd_discrepancy, sda_loss, smooth_labels)
from modules.distillation import kd_source_loss, kd_target_loss, lambda_e, total_loss
from modules.errors import DataError, TrainingDivergence
from modules.evaluation import predict
from modules.experiment import MODES, ExperimentConfig
from modules.models import build_cnn_teacher, build_student, build_teacher
from modules.nn import SGD, Module
from modules.tensor import Tensor, no_grad

logger = logging.getLogger("kavi.trainer")

RecordSink = Callable[[dict], None]


@dataclass
class LossBreakdown:
    '''Per-step loss record; `lambda_sda` and `lambda_e` are the values the step used.'''
    epoch: int
    step: int
    phase: str
    cls: float = 0.0
    d_z1: float = 0.0
    d_z2: float = 0.0
    sda: float = 0.0
    kd_t: float = 0.0
    kd_s: float = 0.0
    total: float = 0.0
    lambda_sda: float = 0.0
    lambda_e: float = 0.0
    shared_classes: int = 0

    LOSS_FIELDS = ('cls', 'd_z1', 'd_z2', 'sda', 'kd_t', 'kd_s', 'total')

    def is_finite(self) -> bool:
        return all(math.isfinite(getattr(self, f)) for f in self.LOSS_FIELDS)

    def to_record(self) -> dict:
        return {'kind': 'step', **asdict(self)}


@dataclass
class TrainState:
    epoch: int
    teacher: Module
    student: Module
    optimizer: SGD
    lambda_sda: float
    lambda_e: float
    log: list[dict] = field(default_factory=list)


@dataclass
class Splits:
    source_train: SignalDataset
    source_val: SignalDataset
    source_test: SignalDataset
    target_train: SignalDataset
    target_val: SignalDataset
    target_test: SignalDataset


@dataclass
class TrainResult:
    teacher: Module
    student: Module
    log: list[dict]
    val_accuracy: list[dict]
    best_epoch: dict
    splits: Splits


def generate_pseudo_labels(teacher: Module, target_batch=None, logits: Tensor | None = None) -> np.ndarray:
    '''Softmax rows of the Teacher's target logits, never recorded on the tape.
    Pass `logits` to reuse a forward pass already made.'''
    if logits is None:
        with no_grad():
            logits = teacher(target_batch).logits
    return logits.detach().softmax(axis=1).data


def _standardized(ds: SignalDataset) -> SignalDataset:
    return SignalDataset(standardize(ds.segments), ds.labels, ds.domain, ds.class_names, ds.metadata)


class Trainer:
    '''Joint Teacher adaptation and Student distillation, plus the ablation modes.'''

    def __init__(self, cfg: ExperimentConfig, source: SignalDataset, target: SignalDataset,
                 on_record: RecordSink | None = None):
        if cfg.mode not in MODES:
            raise ValueError(f"unknown mode {cfg.mode!r}")
        if source.labels is None:
            raise DataError("source dataset must be labeled")
        if source.class_names != target.class_names:
            raise DataError("source and target datasets must share n_c and class names")
        self.cfg = cfg
        self.n_classes = source.n_classes
        self.on_record = on_record
        seed = cfg.run.seed
        s_parts = split_dataset(_standardized(source), cfg.data.split, cfg.data.seed)
        t_parts = split_dataset(_standardized(target), cfg.data.split, cfg.data.seed)
        self.splits = Splits(*s_parts, *t_parts)
        if len(self.splits.source_train) < 2 or len(self.splits.target_train) < 2:
            raise DataError("training splits need at least 2 samples per domain")

        input_len = source.window
        if cfg.mode == 'cnn_teacher':
            teacher = build_cnn_teacher(self.n_classes, input_len, seed)
        else:
            teacher = build_teacher(self.n_classes, cfg.model.nodes, input_len, seed,
                                    k=cfg.model.graph_k, stacks=cfg.model.arma_stacks)
        student = build_student(self.n_classes, input_len, seed)
        optimizer = SGD(teacher.parameters() + student.parameters(), cfg.run.learning_rate)
        self.state = TrainState(0, teacher, student, optimizer, 0.0, 0.0)
        self.rng = np.random.default_rng(seed)
        self.family = cfg.kernel_family
        self.kd = cfg.distillation
        self.epsilon = cfg.epsilon
        self.discrepancy = {'mmsd_baseline': mmsd_discrepancy, 'lmmd_baseline': lmmd_baseline}.get(cfg.mode, elmmsd)
        self.distill_start = cfg.run.epochs // 2 + 1 if cfg.mode in ('sda_then_kd', 'kd_then_sda') else None

    # --- schedules ---
    def _schedules(self, epoch: int) -> tuple[float, float]:
        n_e = self.cfg.run.epochs
        lam_sda = 0.0 if self.cfg.mode == 'source_only' else lambda_sda(epoch, n_e)
        return lam_sda, lambda_e(epoch, n_e, self.kd.alpha1, self.kd.alpha2)

    def phase(self, epoch: int) -> str:
        mode = self.cfg.mode
        if mode == 'sda_only':
            return 'student_sda'
        if mode == 'sda_then_kd':
            return 'teacher_sda' if epoch < self.distill_start else 'distill'
        if mode == 'kd_then_sda':
            return 'distill_source' if epoch < self.distill_start else 'student_sda'
        return 'joint'

    def _emit(self, record: dict):
        self.state.log.append(record)
        if self.on_record is not None:
            self.on_record(record)

    # --- batches ---
    def batches(self):
        '''Source batches in a fresh permutation; each paired with a target batch drawn
        without replacement within the batch and independently across batches.'''
        src, tgt = self.splits.source_train, self.splits.target_train
        bs = self.cfg.run.batch_size
        order = self.rng.permutation(len(src))
        for start in range(0, len(order), bs):
            idx = order[start:start + bs]
            if len(idx) < 2:
                continue
            t_idx = self.rng.choice(len(tgt), size=min(len(idx), len(tgt)), replace=False)
            yield src.segments[idx], src.labels[idx], tgt.segments[t_idx]

    # --- one optimization step ---
    def _source_weights(self, ys):
        if self.cfg.mode == 'lmmd_baseline':
            return hard_class_weights(smooth_labels(ys, 0.0, self.n_classes).values)
        return class_weights(smooth_labels(ys, self.epsilon, self.n_classes).values)

    def _target_weights(self, pseudo: np.ndarray):
        if self.cfg.mode == 'lmmd_baseline':
            return hard_class_weights(pseudo)
        return class_weights(pseudo)

    def step(self, epoch: int, step: int, xs: np.ndarray, ys: np.ndarray, xt: np.ndarray) -> LossBreakdown:
        st = self.state
        phase = self.phase(epoch)
        lam_sda, lam_e = st.lambda_sda, st.lambda_e
        xs, xt = Tensor(xs), Tensor(xt)
        kd = self.kd
        zero = Tensor(0.0)

        if phase == 'student_sda':
            st.student.train()
            s_s, s_t = st.student(xs), st.student(xt)
            pseudo = generate_pseudo_labels(st.student, logits=s_t.logits)
            loss_sda, terms = sda_loss(s_s.logits, ys, s_s.fc4, s_t.fc4, None, None,
                                       self._source_weights(ys), self._target_weights(pseudo),
                                       self.family, self.epsilon, lam_sda, self.discrepancy)
            kd_t = kd_s = zero
            lam_e = 0.0
        elif phase == 'distill':
            st.teacher.eval()
            st.student.train()
            with no_grad():
                t_s, t_t = st.teacher(xs), st.teacher(xt)
            s_s, s_t = st.student(xs), st.student(xt)
            kd_t = kd_target_loss(s_t.logits, t_t.logits, kd.tau, kd.tau_squared, kd.kl_reverse)
            kd_s = kd_source_loss(s_s.logits, t_s.logits, ys, kd.tau, kd.lambda_cls, self.epsilon,
                                  kd.tau_squared, kd.kl_reverse)
            loss_sda, terms = zero, None
            lam_e = 1.0
        else:
            st.teacher.train()
            st.student.train()
            t_s, t_t = st.teacher(xs), st.teacher(xt)
            pseudo = generate_pseudo_labels(st.teacher, logits=t_t.logits)
            if phase in ('teacher_sda', 'distill_source'):
                # teacher_sda adapts with SDA alone; distill_source trains on source labels only
                lam_sda = 0.0 if phase == 'distill_source' else lam_sda
            loss_sda, terms = sda_loss(t_s.logits, ys, t_s.fc1, t_t.fc1, t_s.fc2, t_t.fc2,
                                       self._source_weights(ys), self._target_weights(pseudo),
                                       self.family, self.epsilon, lam_sda, self.discrepancy)
            if phase == 'teacher_sda':
                kd_t = kd_s = zero
                lam_e = 0.0
            else:
                st.student.train()
                s_s = st.student(xs)
                if phase == 'distill_source':
                    # source-only distillation: the target never reaches the Student
                    kd_t = zero
                else:
                    s_t = st.student(xt)
                    kd_t = kd_target_loss(s_t.logits, t_t.logits, kd.tau, kd.tau_squared, kd.kl_reverse)
                kd_s = kd_source_loss(s_s.logits, t_s.logits, ys, kd.tau, kd.lambda_cls, self.epsilon,
                                      kd.tau_squared, kd.kl_reverse)

        total = total_loss(loss_sda, kd_t, kd_s, lam_e)
        breakdown = LossBreakdown(
            epoch=epoch, step=step, phase=phase,
            cls=terms.cls if terms else 0.0, d_z1=terms.d_z1 if terms else 0.0,
            d_z2=terms.d_z2 if terms else 0.0, sda=loss_sda.item(), kd_t=kd_t.item(), kd_s=kd_s.item(),
            total=total.item(), lambda_sda=lam_sda if terms else 0.0, lambda_e=lam_e,
            shared_classes=terms.shared_classes if terms else 0)
        if not breakdown.is_finite():
            raise TrainingDivergence(epoch, step, breakdown.to_record())
        st.optimizer.zero_grad()
        if total.requires_grad:
            total.backward()
        st.optimizer.step()
        return breakdown

    # --- evaluation hooks ---
    def _accuracy(self, model: Module, ds: SignalDataset) -> float | None:
        if ds.labels is None or len(ds) == 0:
            return None
        logits = predict(model, ds.segments, self.cfg.run.batch_size)
        return float((logits.argmax(axis=1) == ds.labels).mean())

    def validate(self) -> dict:
        st = self.state
        return {
            'teacher_val_acc_s': self._accuracy(st.teacher, self.splits.source_val),
            'teacher_val_acc_t': self._accuracy(st.teacher, self.splits.target_val),
            'student_val_acc_s': self._accuracy(st.student, self.splits.source_val),
            'student_val_acc_t': self._accuracy(st.student, self.splits.target_val),
        }

    def fit(self) -> TrainResult:
        cfg, st = self.cfg, self.state
        n_e = cfg.run.epochs
        st.lambda_sda, st.lambda_e = self._schedules(0)
        history = []
        models = (('teacher', st.teacher), ('student', st.student))
        best = {name: (-np.inf, 0, model.state_dict()) for name, model in models}

        acc = self.validate()
        history.append({'epoch': 0, **acc})
        self._emit({'kind': 'epoch', 'epoch': 0, 'lambda_sda': st.lambda_sda, 'lambda_e': st.lambda_e, **acc})
        logger.info("%s run, seed %d: %d epochs", cfg.mode, cfg.run.seed, n_e)

        for epoch in range(1, n_e + 1):
            st.epoch = epoch
            if self.distill_start is not None and epoch == self.distill_start:
                self._emit({'kind': 'phase', 'epoch': epoch, 'phase': self.phase(epoch)})
                logger.info("phase boundary at epoch %d: %s", epoch, self.phase(epoch))
            steps = []
            for i, (xs, ys, xt) in enumerate(self.batches()):
                breakdown = self.step(epoch, i, xs, ys, xt)
                steps.append(breakdown)
                self._emit(breakdown.to_record())
            # schedules move once per epoch
            st.lambda_sda, st.lambda_e = self._schedules(epoch)
            acc = self.validate()
            history.append({'epoch': epoch, **acc})
            means = {f: float(np.mean([getattr(b, f) for b in steps])) if steps else 0.0
                     for f in LossBreakdown.LOSS_FIELDS}
            record = {'kind': 'epoch', 'epoch': epoch, 'lambda_sda': st.lambda_sda, 'lambda_e': st.lambda_e,
                      **means, **acc}
            self._emit(record)
            logger.info("epoch %d/%d total %.4f student target val %s", epoch, n_e, means['total'],
                        acc['student_val_acc_t'], extra={'extra_data': record})

            for name, model in models:
                score = self._selection_score(acc, name, means['total'])
                if score > best[name][0]:
                    best[name] = (score, epoch, model.state_dict())

        st.teacher.load_state_dict(best['teacher'][2])
        st.student.load_state_dict(best['student'][2])
        st.teacher.eval()
        st.student.eval()
        best_epoch = {name: best[name][1] for name in best}
        logger.info("best epochs: teacher %d, student %d", best_epoch['teacher'], best_epoch['student'])
        return TrainResult(st.teacher, st.student, st.log, history, best_epoch, self.splits)

    def _selection_score(self, acc: dict, name: str, train_loss: float) -> float:
        '''Checkpoint score: source validation accuracy, or target validation accuracy when
        run.select_on_target is set. Falls back to the negated training loss when the
        chosen split is empty.'''
        score = None
        if self.cfg.run.select_on_target:
            score = acc[f'{name}_val_acc_t']
        if score is None:
            score = acc[f'{name}_val_acc_s']
        return -train_loss if score is None else score


def train_ablation(cfg: ExperimentConfig, source: SignalDataset, target: SignalDataset,
                   on_record: RecordSink | None = None) -> TrainResult:
    return Trainer(cfg, source, target, on_record).fit()


def train_kavi(cfg: ExperimentConfig, source: SignalDataset, target: SignalDataset,
               on_record: RecordSink | None = None) -> TrainResult:
    if cfg.mode != 'kavi':
        cfg = cfg.with_overrides(**{'run.mode': 'kavi'})
    return train_ablation(cfg, source, target, on_record)
