"""FGSM, iFGSM, PGD, Carlini-Wagner L2 and DeepFool."""

from .core import (
    ATTACKS,
    KINDS,
    LINF,
    AttackConfig,
    AttackError,
    AttackResult,
    cw,
    deepfool,
    fgsm,
    ifgsm,
    loss_gradient,
    pgd,
    pgd_start,
    run_attack,
    thresholded_accuracy,
)

__all__ = [name for name in dir() if not name.startswith("_")]
