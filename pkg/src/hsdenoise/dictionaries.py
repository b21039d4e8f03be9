"""Dictionary parameterizations: dense spectral atoms and low-rank factored atoms.

A dense dictionary holds p atoms over c channels with 1x1 spatial support.
A low-rank dictionary factors each atom of spatial side s into U_j (s^2 x r)
times V_j (r x c), so a full bank costs (s^2 + c) * r * p parameters instead
of the dense c * s^2 * p.
"""

from __future__ import annotations

import numpy as np

from . import engine as eng
from .engine import Parameter, Tensor
from .errors import DomainError


def _he_normal(rng: np.random.Generator, shape: tuple, fan_in: int, dtype) -> np.ndarray:
    if fan_in <= 0:
        raise DomainError(f"he init: fan_in must be positive, got {fan_in}")
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape).astype(dtype)


class DenseDictionary:
    """p spectral atoms of shape (c,); materializes to a (p, c, 1, 1) kernel."""

    def __init__(self, atom_count: int, channels: int, name: str, dtype=np.float32):
        if atom_count < 1 or channels < 1:
            raise DomainError(f"dense dictionary needs atom_count, channels >= 1, got {atom_count}, {channels}")
        self.atom_count = atom_count
        self.channels = channels
        self.patch_side = 1
        self.name = name
        self.atoms = Parameter(np.zeros((atom_count, channels), dtype=dtype), name=f"{name}.atoms")

    def init_he(self, rng: np.random.Generator) -> "DenseDictionary":
        # fan_in is the atom support s^2 * c, with s = 1 here
        fan_in = self.channels
        self.atoms.value = Tensor(_he_normal(rng, self.atoms.value.shape, fan_in, self.atoms.value.dtype))
        return self

    def materialize(self) -> Tensor:
        p, c = self.atom_count, self.channels
        return eng.reshape(self.atoms.value, (p, c, 1, 1))

    def as_matrix(self) -> Tensor:
        """Atoms as a (p, c) matrix, differentiable."""
        return self.atoms.value

    def param_count(self) -> int:
        return self.channels * self.patch_side**2 * self.atom_count

    def parameters(self) -> list[Parameter]:
        return [self.atoms]


class LowRankDictionary:
    """p atoms over (c, s, s) support, each factored as vec(U_j @ V_j) with rank r."""

    def __init__(
        self,
        atom_count: int,
        channels: int,
        patch_side: int,
        rank: int,
        name: str,
        dtype=np.float32,
    ):
        if atom_count < 1 or channels < 1 or patch_side < 1:
            raise DomainError(
                f"low-rank dictionary needs positive extents, got p={atom_count}, c={channels}, s={patch_side}"
            )
        if not 1 <= rank <= min(patch_side**2, channels):
            raise DomainError(
                f"rank must satisfy 1 <= r <= min(s^2, c) = {min(patch_side ** 2, channels)}, got {rank}"
            )
        self.atom_count = atom_count
        self.channels = channels
        self.patch_side = patch_side
        self.rank = rank
        self.name = name
        s2 = patch_side**2
        self.U = Parameter(np.zeros((atom_count, s2, rank), dtype=dtype), name=f"{name}.U")
        self.V = Parameter(np.zeros((atom_count, rank, channels), dtype=dtype), name=f"{name}.V")

    def init_he(self, rng: np.random.Generator) -> "LowRankDictionary":
        # per-factor fan_in: each factor's trailing (input) extent
        dt = self.U.value.dtype
        self.U.value = Tensor(_he_normal(rng, self.U.value.shape, self.rank, dt))
        self.V.value = Tensor(_he_normal(rng, self.V.value.shape, self.channels, dt))
        return self

    def materialize(self) -> Tensor:
        """Kernel (p, c, s, s) with kernel[j, ch, a, b] = sum_k U[j, a*s+b, k] * V[j, k, ch]."""
        p, c, s = self.atom_count, self.channels, self.patch_side
        flat = eng.bmm(self.U.value, self.V.value)  # (p, s^2, c)
        return eng.reshape(eng.swap_last2(flat), (p, c, s, s))

    def param_count(self) -> int:
        return (self.patch_side**2 + self.channels) * self.rank * self.atom_count

    def parameters(self) -> list[Parameter]:
        return [self.U, self.V]


def dense_param_count(atom_count: int, channels: int, patch_side: int = 1) -> int:
    return channels * patch_side**2 * atom_count


def low_rank_param_count(atom_count: int, channels: int, patch_side: int, rank: int) -> int:
    return (patch_side**2 + channels) * rank * atom_count
