"""Alignment regularizers and their composition with the SSL loss.

All regularizers share one shape: current features are passed through the
alignment projector ``a_phi`` and pulled toward constant target features,
averaging the two views' terms. The variants differ only in where targets
come from (EMA twin, stored buffer features, or a boundary snapshot) and
which rows are aligned (all stream rows, or replay rows only).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .networks import Learner
from .ssl_objectives import DEFAULT_TEMPERATURE, ViewPair, neg_cosine, nt_xent

logger = logging.getLogger(__name__)

VARIANTS = ("none", "cla_b", "cla_e", "cla_r", "cassle", "cassle_r")
ALIGN_LOSSES = ("neg_cosine", "ssl_loss")

AlignLoss = Callable[[Tensor, Tensor], Tensor]


class AlignmentContractError(ValueError):
    """A target fed to an alignment loss is not constant, or a required input is missing."""


@dataclass
class AlignmentConfig:
    variant: str = "none"
    omega: float = 1.0
    align_loss: str = "neg_cosine"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown alignment variant {self.variant!r}")
        if self.align_loss not in ALIGN_LOSSES:
            raise ValueError(f"unknown align_loss {self.align_loss!r}")
        if self.omega < 0:
            raise ValueError("omega must be non-negative")
        if self.variant in ("cassle", "cassle_r"):
            # CaSSLe: L_alg is the SSL loss itself with a fixed strength of 1
            self.omega = 1.0
            self.align_loss = "ssl_loss"

    @property
    def needs_ema(self) -> bool:
        return self.variant in ("cla_b", "cla_e")

    @property
    def needs_features(self) -> bool:
        return self.variant == "cla_r"

    @property
    def needs_boundaries(self) -> bool:
        return self.variant in ("cassle", "cassle_r")


class Diagnostics:
    def __init__(self):
        self.empty_replay = 0


diagnostics = Diagnostics()


def ssl_align_loss(objective: str, temperature: float = DEFAULT_TEMPERATURE) -> AlignLoss:
    """The SSL loss viewed as a two-argument alignment loss.

    For SimSiam, ``a_phi`` takes the predictor's role, so the loss is the
    negative cosine to the stop-gradient target. For SimCLR it is NT-Xent
    between the projected features and the targets.
    """
    if objective == "simsiam":
        return neg_cosine
    if objective == "simclr":
        return lambda pred, target: nt_xent(ViewPair(pred, target), temperature)
    raise ValueError(f"unknown SSL objective {objective!r}")


def resolve_align_loss(align_loss, objective: str = "simsiam", temperature: float = DEFAULT_TEMPERATURE) -> AlignLoss:
    if callable(align_loss):
        return align_loss
    if align_loss == "neg_cosine":
        return neg_cosine
    if align_loss == "ssl_loss":
        return ssl_align_loss(objective, temperature)
    raise ValueError(f"unknown align_loss {align_loss!r}")


def _constant(target, name: str) -> Tensor:
    if isinstance(target, Tensor):
        if target.requires_grad:
            raise AlignmentContractError(f"{name} must be constant (stop-gradient)")
        return target
    return Tensor(np.asarray(target, dtype=np.float64))


def reg_generalized(z1: Tensor, z2: Tensor, a_phi, target1, target2, align_loss="neg_cosine") -> Tensor:
    """``0.5 * L_alg(a_phi(z1), target1) + 0.5 * L_alg(a_phi(z2), target2)``."""
    loss = resolve_align_loss(align_loss)
    t1 = _constant(target1, "target1")
    t2 = _constant(target2, "target2")
    return ad.scale(loss(a_phi(z1), t1) + loss(a_phi(z2), t2), 0.5)


def targets_from(net: Learner, x1, x2) -> tuple[Tensor, Tensor]:
    """Outputs of a constant network on both views, cut from any graph."""
    if net is None:
        raise AlignmentContractError("target network is missing")
    return net(ad.as_tensor(x1)).detach(), net(ad.as_tensor(x2)).detach()


def cla_b_reg(z1: Tensor, z2: Tensor, a_phi, ema_theta: Learner | None, x1, x2) -> Tensor:
    """Align both stream views to the EMA twin's outputs on the same views."""
    if ema_theta is None:
        raise AlignmentContractError("CLA-b needs an EMA twin")
    t1, t2 = targets_from(ema_theta, x1, x2)
    return reg_generalized(z1, z2, a_phi, t1, t2, neg_cosine)


def _empty(z: Tensor) -> bool:
    return z.shape[0] == 0


def cla_e_reg(z_r1: Tensor, z_r2: Tensor, a_phi, ema_theta: Learner | None, x_r1, x_r2) -> Tensor:
    """Align replay features only, against the EMA twin's outputs on the replay views."""
    if _empty(z_r1):
        diagnostics.empty_replay += 1
        return Tensor(0.0)
    return cla_b_reg(z_r1, z_r2, a_phi, ema_theta, x_r1, x_r2)


def cla_r_reg(z_r1: Tensor, z_r2: Tensor, a_phi, z_star) -> Tensor:
    """Align both replay views to the same stored feature ``z*``."""
    if _empty(z_r1):
        diagnostics.empty_replay += 1
        return Tensor(0.0)
    if z_star is None:
        raise AlignmentContractError("CLA-R needs stored features for every replayed exemplar")
    zs = _constant(z_star, "z_star")
    if zs.shape != z_r1.shape:
        raise AlignmentContractError(f"stored features {zs.shape} do not match replay features {z_r1.shape}")
    return reg_generalized(z_r1, z_r2, a_phi, zs, zs, neg_cosine)


def cassle_reg(z1: Tensor, z2: Tensor, a_phi, frozen_theta: Learner | None, x1, x2, align_loss: AlignLoss) -> Tensor:
    """Align stream views to the boundary snapshot; zero before the first boundary."""
    if frozen_theta is None:
        return Tensor(0.0)
    t1, t2 = targets_from(frozen_theta, x1, x2)
    return reg_generalized(z1, z2, a_phi, t1, t2, align_loss)


def cassle_r_reg(z_r1: Tensor, z_r2: Tensor, a_phi, frozen_theta: Learner | None, x_r1, x_r2,
                 align_loss: AlignLoss) -> Tensor:
    """CaSSLe with rehearsal: snapshot targets on replay views, replay rows only."""
    if frozen_theta is None or _empty(z_r1):
        return Tensor(0.0)
    t1, t2 = targets_from(frozen_theta, x_r1, x_r2)
    return reg_generalized(z_r1, z_r2, a_phi, t1, t2, align_loss)


def total_loss(ssl: Tensor, reg: Tensor, omega: float) -> Tensor:
    """``ssl + omega * reg``."""
    return ad.add(ssl, ad.scale(reg, omega))
