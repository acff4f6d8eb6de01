"""Per-particle Kalman filter over the constant magnetometer bias.

The three axes are independent scalar filters with an identity state
transition, so the state is a mean vector and a per-axis variance. Arrays of
shape ``(n, 3)`` hold a whole particle set; every function broadcasts.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.typing import ArrayLike, NDArray

from .errors import InvalidConfig, NonFiniteResidual


def _vec3(v) -> NDArray:
    a = np.asarray(v, dtype=float)
    if a.ndim == 0:
        a = np.full(3, float(a))
    return a.reshape(3)


@dataclass(frozen=True, eq=False)
class KfConfig:
    """Initial variance ``p0_diag``, measurement noise ``r_diag`` and process noise ``q_diag`` in uT^2."""

    p0_diag: NDArray = field(default_factory=lambda: np.full(3, 1000.0**2))
    r_diag: NDArray = field(default_factory=lambda: np.full(3, 200.0**2))
    q_diag: NDArray = field(default_factory=lambda: np.full(3, 2.0**2))
    b0: NDArray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        for name in ("p0_diag", "r_diag", "q_diag", "b0"):
            object.__setattr__(self, name, _vec3(getattr(self, name)))
        for name in ("p0_diag", "r_diag", "q_diag"):
            v = getattr(self, name)
            if not np.all(np.isfinite(v)) or np.any(v <= 0):
                raise InvalidConfig(f"{name} must be strictly positive, got {v}")
        if not np.all(np.isfinite(self.b0)):
            raise InvalidConfig("b0 must be finite")


@dataclass
class BiasKf:
    b: NDArray  # (..., 3) uT
    p: NDArray  # (..., 3) uT^2
    updated: NDArray | bool = False

    def copy(self) -> BiasKf:
        return BiasKf(np.array(self.b, copy=True), np.array(self.p, copy=True), np.array(self.updated, copy=True))

    def take(self, idx) -> BiasKf:
        return BiasKf(self.b[idx], self.p[idx], np.asarray(self.updated)[idx])

    @property
    def std(self) -> NDArray:
        return np.sqrt(self.p)


def kf_new(cfg: KfConfig | None = None, n: int | None = None) -> BiasKf:
    """Fresh filter at the configured prior; ``n`` gives a batch of identical filters."""
    cfg = cfg or KfConfig()
    if not isinstance(cfg, KfConfig):
        raise InvalidConfig(f"expected KfConfig, got {type(cfg).__name__}")
    if n is None:
        return BiasKf(cfg.b0.copy(), cfg.p0_diag.copy(), False)
    return BiasKf(np.tile(cfg.b0, (n, 1)), np.tile(cfg.p0_diag, (n, 1)), np.zeros(n, dtype=bool))


def kf_update(kf: BiasKf, y: ArrayLike, cfg: KfConfig, mask: ArrayLike | None = None) -> BiasKf:
    """One predict/update cycle driven by the residual ``y``.

    ``y`` is the innovation: the measurement minus the map estimate, both
    corrected with the current bias mean. With ``mask`` only the selected
    rows of a batch are updated.
    """
    y = np.asarray(y, dtype=float)
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if not np.all(np.isfinite(y[mask])):
            raise NonFiniteResidual("residual contains NaN or inf")
    elif not np.all(np.isfinite(y)):
        raise NonFiniteResidual("residual contains NaN or inf")

    p_pred = kf.p + cfg.q_diag
    gain = p_pred / (p_pred + cfg.r_diag)
    b_new = kf.b + gain * np.where(np.isfinite(y), y, 0.0)
    p_new = (1.0 - gain) * p_pred
    if mask is None:
        upd = np.ones_like(np.asarray(kf.updated), dtype=bool) if np.ndim(kf.updated) else True
        return BiasKf(b_new, p_new, upd)
    m3 = mask[:, None]
    return BiasKf(
        np.where(m3, b_new, kf.b),
        np.where(m3, p_new, kf.p),
        np.asarray(kf.updated, dtype=bool) | mask,
    )
