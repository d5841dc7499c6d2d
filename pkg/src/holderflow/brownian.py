"""Counter-based Brownian drivers and time grids.

Every Gaussian draw is a pure function of ``(seed, stream, fine step, path,
noise coordinate)``.  A Philox generator is keyed by ``(seed, stream)`` and its
counter is positioned at ``(path * k + coordinate) // 4`` in the low word and
the fine step index in the next word, so any subset of paths can be produced
on any worker without touching the others.

Increments are always generated on the finest grid of the driver and summed
up to the requested grid, which makes coarse increments exact sums of fine
ones and lets solutions computed at different step sizes share one ``omega``.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass
from typing import Iterator

import numpy as np
from scipy.special import ndtri

from .errors import ConfigError

_MASK64 = (1 << 64) - 1
_ALIGN_TOL = 1e-9


def derive_seed(master_seed: int, label: str) -> int:
    """64-bit child seed obtained by hashing the master seed with a label."""
    h = hashlib.blake2b(f"{int(master_seed) & _MASK64}:{label}".encode(), digest_size=8)
    return int.from_bytes(h.digest(), "little")


@dataclass(frozen=True)
class TimeGrid:
    t0: float
    T: float
    steps: int

    def __post_init__(self):
        if self.t0 < 0:
            raise ConfigError(f"grid start must be >= 0, got {self.t0}", "t0")
        if not self.T > self.t0:
            raise ConfigError(f"grid end {self.T} must exceed start {self.t0}", "T")
        if int(self.steps) != self.steps or self.steps < 1:
            raise ConfigError(f"steps must be a positive integer, got {self.steps}", "steps")

    @classmethod
    def from_dt(cls, t0: float, T: float, dt: float) -> "TimeGrid":
        n = (T - t0) / dt
        steps = int(round(n))
        if steps < 1 or abs(n - steps) > 1e-6 * max(1.0, n):
            raise ConfigError(f"dt={dt} does not divide [{t0}, {T}] into whole steps", "dt")
        return cls(t0, T, steps)

    @property
    def dt(self) -> float:
        return (self.T - self.t0) / self.steps

    @property
    def times(self) -> np.ndarray:
        return self.t0 + np.arange(self.steps + 1) * self.dt

    def index_of(self, t: float) -> int:
        """Grid index of time ``t``; rejects times that are not grid points."""
        j = (t - self.t0) / self.dt
        jr = int(round(j))
        if abs(j - jr) > 1e-7 or not 0 <= jr <= self.steps:
            raise ConfigError(f"time {t} is not aligned with the grid (dt={self.dt}, t0={self.t0})", "u")
        return jr


def _standard_normals(key: np.ndarray, step: int, start: int, count: int) -> np.ndarray:
    bg = np.random.Philox(
        counter=np.array([start // 4, step, 0, 0], dtype=np.uint64),
        key=key,
    )
    off = start % 4
    raw = bg.random_raw(count + off)[off:]
    u = ((raw >> np.uint64(11)).astype(np.float64) + 0.5) * (2.0 ** -53)
    return ndtri(u)


@dataclass(frozen=True)
class BrownianDriver:
    """Deterministic Brownian increments for a family of paths.

    ``fine_dt`` is the finest resolution; any grid whose step is an integer
    multiple of it (and whose start is a multiple of it) can be served.  With
    ``antithetic=True`` path ``2i+1`` is driven by the negated increments of
    path ``2i``.
    """

    seed: int
    fine_dt: float
    dim_noise: int = 1
    stream: int = 0
    antithetic: bool = False

    def __post_init__(self):
        if not self.fine_dt > 0:
            raise ConfigError("fine_dt must be positive", "fine_dt")
        if self.dim_noise < 1:
            raise ConfigError("dim_noise must be >= 1", "dim_noise")

    @property
    def _key(self) -> np.ndarray:
        return np.array([int(self.seed) & _MASK64, int(self.stream) & _MASK64], dtype=np.uint64)

    def _fine_index(self, t: float) -> int:
        m = t / self.fine_dt
        mr = int(round(m))
        if abs(m - mr) > _ALIGN_TOL * max(1.0, abs(m)):
            raise ConfigError(f"time {t} is not a multiple of the driver resolution {self.fine_dt}", "grid")
        return mr

    def refinement(self, grid: TimeGrid) -> int:
        """Number of fine increments aggregated into one step of ``grid``."""
        r = grid.dt / self.fine_dt
        rr = int(round(r))
        if rr < 1 or abs(r - rr) > 1e-7 * r:
            raise ConfigError(
                f"grid step {grid.dt} is not an integer multiple of the driver resolution {self.fine_dt}", "dt"
            )
        return rr

    def fine_increments(self, m: int, start: int, stop: int) -> np.ndarray:
        """Increments of fine step ``m`` for paths ``start..stop-1``, shape (n, k)."""
        k = self.dim_noise
        scale = math.sqrt(self.fine_dt)
        if not self.antithetic:
            z = _standard_normals(self._key, m, start * k, (stop - start) * k)
            return scale * z.reshape(stop - start, k)
        b0, b1 = start // 2, (stop + 1) // 2
        z = _standard_normals(self._key, m, b0 * k, (b1 - b0) * k).reshape(b1 - b0, k)
        idx = np.arange(start, stop)
        sign = np.where(idx % 2 == 0, 1.0, -1.0)[:, None]
        return scale * (sign * z[idx // 2 - b0])

    def iter_increments(self, grid: TimeGrid, start: int, stop: int) -> Iterator[np.ndarray]:
        """Yield the (n, k) increment of every step of ``grid`` in order."""
        r = self.refinement(grid)
        m0 = self._fine_index(grid.t0)
        for j in range(grid.steps):
            base = m0 + j * r
            if r == 1:
                yield self.fine_increments(base, start, stop)
            else:
                block = np.stack([self.fine_increments(base + i, start, stop) for i in range(r)])
                yield block.sum(axis=0)

    def increments(self, grid: TimeGrid, start: int = 0, stop: int = 1) -> np.ndarray:
        """All increments of ``grid`` for paths ``start..stop-1``, shape (steps, n, k)."""
        return np.stack(list(self.iter_increments(grid, start, stop)))

    def path(self, grid: TimeGrid, index: int = 0) -> np.ndarray:
        """Brownian values W at the grid times (relative to ``grid.t0``), shape (steps+1, k)."""
        inc = self.increments(grid, index, index + 1)[:, 0, :]
        w = np.zeros((grid.steps + 1, self.dim_noise))
        for j in range(grid.steps):
            w[j + 1] = w[j] + inc[j]
        return w
