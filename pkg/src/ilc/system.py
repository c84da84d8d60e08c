"""Control system description: drift Hamiltonian plus control channels."""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .errors import DimensionMismatchError, InvalidStateError
from .linalg import as_hermitian


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr = arr.copy()
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class ControlChannel:
    """One control Hamiltonian with its gain, constant offset and role.

    ``gamma_channel`` marks the channels that carry the shared implicit
    perturbation; ``eta`` is the constant disturbance that dresses the drift.
    """

    H: np.ndarray
    K: float = 1.0
    eta: float = 0.0
    gamma_channel: bool = True

    def __post_init__(self):
        object.__setattr__(self, "H", _frozen(as_hermitian(self.H, name="H_k")))
        if not self.K > 0:
            raise InvalidStateError(f"channel gain must be positive, got {self.K}")
        object.__setattr__(self, "K", float(self.K))
        object.__setattr__(self, "eta", float(self.eta))
        object.__setattr__(self, "gamma_channel", bool(self.gamma_channel))


@dataclass(frozen=True)
class ControlSystem:
    """Drift ``H0`` and an ordered list of control channels."""

    H0: np.ndarray
    channels: tuple[ControlChannel, ...] = field(default_factory=tuple)

    def __post_init__(self):
        object.__setattr__(self, "H0", _frozen(as_hermitian(self.H0, name="H0")))
        object.__setattr__(self, "channels", tuple(self.channels))
        if not self.channels:
            raise InvalidStateError("a control system needs at least one channel")
        n = self.H0.shape[0]
        for k, ch in enumerate(self.channels):
            if ch.H.shape[0] != n:
                raise DimensionMismatchError(
                    f"channel {k} has dim {ch.H.shape[0]}, drift has {n}")
        if not any(ch.gamma_channel for ch in self.channels):
            raise InvalidStateError(
                "at least one channel must carry the implicit perturbation")

    @property
    def dim(self) -> int:
        return self.H0.shape[0]

    @property
    def n_channels(self) -> int:
        return len(self.channels)

    @property
    def etas(self) -> np.ndarray:
        return np.array([ch.eta for ch in self.channels])

    @property
    def gains(self) -> np.ndarray:
        return np.array([ch.K for ch in self.channels])

    @property
    def gamma_flags(self) -> np.ndarray:
        return np.array([ch.gamma_channel for ch in self.channels], dtype=bool)

    @cached_property
    def drift_eta(self) -> np.ndarray:
        """H0 + sum_k eta_k H_k, the eta-dressed drift."""
        H = self.H0.astype(np.complex128)
        for ch in self.channels:
            if ch.eta != 0.0:
                H = H + ch.eta * ch.H
        return _frozen(H)

    @cached_property
    def gamma_coupling(self) -> np.ndarray:
        """Sum of the gamma-channel Hamiltonians."""
        H = np.zeros_like(self.H0)
        for ch in self.channels:
            if ch.gamma_channel:
                H = H + ch.H
        return _frozen(H)

    def with_etas(self, etas) -> "ControlSystem":
        """Copy of the system with the channel offsets replaced."""
        etas = np.asarray(etas, dtype=float)
        if etas.shape != (self.n_channels,):
            raise DimensionMismatchError(
                f"expected {self.n_channels} offsets, got shape {etas.shape}")
        chans = tuple(
            ControlChannel(ch.H, ch.K, float(e), ch.gamma_channel)
            for ch, e in zip(self.channels, etas))
        return ControlSystem(self.H0, chans)
