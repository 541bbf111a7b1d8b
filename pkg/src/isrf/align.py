"""Temperature-scaled cosine kernel and the two contrastive alignment losses.

Both losses return ``(value, grad_teacher, grad_student)`` with gradients taken
w.r.t. the raw (unnormalized) rows of the teacher ``H`` and student ``E`` batches.
"""

from __future__ import annotations

import logging
from typing import NamedTuple

import numpy as np

log = logging.getLogger(__name__)

NORM_FLOOR = 1e-12


def f_c(a: np.ndarray, b: np.ndarray, tau: float) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise ValueError("f_c is undefined for zero vectors")
    if tau <= 0:
        raise ValueError("tau must be positive")
    return float(np.exp(np.dot(a, b) / (na * nb) / tau))


def _unit(X: np.ndarray, what: str) -> tuple[np.ndarray, np.ndarray]:
    norms = np.linalg.norm(X, axis=1)
    small = norms < NORM_FLOOR
    if small.any():
        log.warning("%s: %d rows below norm floor %.0e", what, int(small.sum()), NORM_FLOOR)
    norms = np.maximum(norms, NORM_FLOOR)
    return X / norms[:, None], norms


def _unit_backward(g_unit: np.ndarray, unit: np.ndarray, norms: np.ndarray) -> np.ndarray:
    radial = np.sum(g_unit * unit, axis=1, keepdims=True)
    return (g_unit - radial * unit) / norms[:, None]


def _logsumexp(x: np.ndarray, axis=None, keepdims=False):
    m = np.max(x, axis=axis, keepdims=True)
    out = m + np.log(np.sum(np.exp(x - m), axis=axis, keepdims=True))
    return out if keepdims else np.squeeze(out, axis=axis)


class LossResult(NamedTuple):
    value: float
    grad_teacher: np.ndarray
    grad_student: np.ndarray


def _check(teacher: np.ndarray, student: np.ndarray, tau: float) -> None:
    if teacher.shape != student.shape:
        raise ValueError(f"teacher {teacher.shape} and student {student.shape} differ")
    if teacher.shape[0] == 0:
        raise ValueError("empty batch")
    if tau <= 0:
        raise ValueError("tau must be positive")


def _in_batch_infonce(teacher, student, tau):
    """-1/B sum_u log f(h_u, e_u) / sum_u' f(h_u, e_u')."""
    B = teacher.shape[0]
    hn, h_norm = _unit(teacher, "teacher")
    en, e_norm = _unit(student, "student")
    logits = hn @ en.T / tau
    lse = _logsumexp(logits, axis=1, keepdims=True)
    value = float(np.mean(lse[:, 0] - np.diag(logits)))
    g = (np.exp(logits - lse) - np.eye(B)) / (B * tau)
    g_h = _unit_backward(g @ en, hn, h_norm)
    g_e = _unit_backward(g.T @ hn, en, e_norm)
    return value, g_h, g_e


def loss_distill(teacher: np.ndarray, student: np.ndarray, tau: float,
                 denominator: str = "diagonal") -> LossResult:
    """Distillation loss with the teacher behind a stop-gradient.

    ``denominator="diagonal"`` normalizes each matched pair score by the sum of
    all matched pair scores in the batch; ``"cross"`` uses the usual in-batch
    InfoNCE denominator over the student rows.
    """
    _check(teacher, student, tau)
    if denominator == "cross":
        value, _, g_e = _in_batch_infonce(teacher, student, tau)
        return LossResult(value, np.zeros_like(teacher), g_e)
    if denominator != "diagonal":
        raise ValueError(f"unknown denominator {denominator!r}")
    B = teacher.shape[0]
    hn, _ = _unit(teacher, "teacher")
    en, e_norm = _unit(student, "student")
    s = np.sum(hn * en, axis=1) / tau
    lse = _logsumexp(s)
    value = float(lse - np.mean(s))
    g_s = np.exp(s - lse) - 1.0 / B
    g_e = _unit_backward(g_s[:, None] * hn / tau, en, e_norm)
    return LossResult(value, np.zeros_like(teacher), g_e)


def loss_seq(teacher: np.ndarray, student: np.ndarray, tau: float) -> LossResult:
    _check(teacher, student, tau)
    return LossResult(*_in_batch_infonce(teacher, student, tau))


def user_interest_from_sequence(omega_items: np.ndarray, items: list[int]) -> np.ndarray:
    """Mean of the whole-word rows of ``items`` (``omega_items`` indexed by item)."""
    if len(items) == 0:
        raise ValueError("empty interaction sequence")
    return omega_items[np.asarray(items)].mean(axis=0)
