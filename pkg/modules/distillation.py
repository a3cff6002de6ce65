import logging
from dataclasses import dataclass

import numpy as np

from modules.discrepancy import smoothed_ce
from modules.tensor import Tensor, as_tensor

logger = logging.getLogger("kavi.distillation")


@dataclass(frozen=True)
class DistillationConfig:
    tau: float = 20.0
    lambda_cls: float = 0.8
    alpha1: float = 0.1
    alpha2: float = 0.9
    # multiply KL terms by tau^2 so the soft-target gradient scale does not depend on tau
    tau_squared: bool = True
    # KL(teacher || student) instead of KL(student || teacher)
    kl_reverse: bool = False

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError(f"temperature must be positive, got {self.tau}")
        if not 0.0 <= self.lambda_cls <= 1.0:
            raise ValueError(f"lambda_cls must be in [0, 1], got {self.lambda_cls}")
        if not 0.0 < self.alpha1 <= self.alpha2 < 1.0:
            raise ValueError(f"need 0 < alpha1 <= alpha2 < 1, got {self.alpha1}, {self.alpha2}")


def temp_softmax(logits, tau: float) -> Tensor:
    if tau <= 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    return (as_tensor(logits) * (1.0 / tau)).softmax(axis=-1)


def _kl(student_logits: Tensor, teacher_logits: Tensor, tau: float, reverse: bool) -> Tensor:
    '''Batch-mean KL between the tau-softened distributions; teacher logits are detached.'''
    student = as_tensor(student_logits)
    teacher = as_tensor(teacher_logits).detach()
    if student.shape != teacher.shape:
        raise ValueError(f"logit shapes differ: {student.shape} vs {teacher.shape}")
    log_s = (student * (1.0 / tau)).log_softmax(axis=1)
    log_t = (teacher * (1.0 / tau)).log_softmax(axis=1)
    if reverse:
        p_t = Tensor._wrap(np.exp(log_t.data))
        kl = (p_t * (log_t - log_s)).sum()
    else:
        kl = (log_s.exp() * (log_s - log_t)).sum()
    return kl * (1.0 / student.shape[0])


def kd_target_loss(student_logits_t, teacher_logits_t, tau: float,
                   tau_squared: bool = True, kl_reverse: bool = False) -> Tensor:
    '''Softened KL from Student to Teacher on target logits, scaled by tau^2 unless disabled.'''
    if tau <= 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    kl = _kl(student_logits_t, teacher_logits_t, tau, kl_reverse)
    return kl * (tau * tau) if tau_squared else kl


def kd_source_loss(student_logits_s, teacher_logits_s, labels_s, tau: float, lambda_cls: float,
                   epsilon: float, tau_squared: bool = True, kl_reverse: bool = False) -> Tensor:
    '''Source distillation: softened KL plus lambda_cls times the smoothed CE on source labels.'''
    kd = kd_target_loss(student_logits_s, teacher_logits_s, tau, tau_squared, kl_reverse)
    if lambda_cls == 0:
        return kd
    return kd + smoothed_ce(as_tensor(student_logits_s), labels_s, epsilon) * lambda_cls


def total_loss(loss_sda, loss_kd_t, loss_kd_s, lambda_e: float):
    '''(1 - lambda_e) * L_SDA + lambda_e * (L_KD^T + L_KD^S); works on Tensors and floats.'''
    if not 0.0 <= lambda_e <= 1.0:
        raise ValueError(f"lambda_e must be in [0, 1], got {lambda_e}")
    return loss_sda * (1.0 - lambda_e) + (loss_kd_t + loss_kd_s) * lambda_e


def lambda_e(epoch: float, max_epochs: int, alpha1: float = 0.1, alpha2: float = 0.9) -> float:
    '''Distillation weight rising geometrically from alpha1 at epoch 0 to alpha2 at n_e.'''
    if max_epochs <= 0:
        raise ValueError(f"max_epochs must be positive, got {max_epochs}")
    if not 0.0 < alpha1 <= alpha2:
        raise ValueError(f"need 0 < alpha1 <= alpha2, got {alpha1}, {alpha2}")
    if not 0 <= epoch <= max_epochs:
        raise ValueError(f"epoch {epoch} outside [0, {max_epochs}]")
    # alpha1 * exp(t * log(alpha2 / alpha1)) written so that t=0 and t=1 are exact
    t = epoch / max_epochs
    return alpha1 ** (1.0 - t) * alpha2 ** t
