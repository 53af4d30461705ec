"""Reproducible Euler-Maruyama path simulation.

Every path owns a counter-based random stream (Philox keyed by
``(master_seed, stream_id)``), so an ensemble is bit-identical no matter
how it is chunked across worker threads.  Coefficients are evaluated at
the left endpoint of each step (Ito convention).
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .model import (Coupling, LinearModel, ModelError, NonlinearModel, NumericalError,
                    Path, PathPair, TimeGrid, validate_linear, validate_nonlinear)

_U64 = 2 ** 64
_PRODUCT_X, _PRODUCT_Y, _INITIAL_STATE = 1, 2, 0x1A17


@dataclass(frozen=True)
class SeedSpec:
    """``(master_seed, stream_id)`` pair that fixes every increment of one path."""

    master_seed: int
    stream_id: int = 0

    def __post_init__(self):
        for name in ("master_seed", "stream_id"):
            v = getattr(self, name)
            if int(v) != v or not 0 <= v < _U64:
                raise ValueError(f"{name} must be an unsigned 64-bit integer, got {v!r}")
            object.__setattr__(self, name, int(v))

    def generator(self) -> np.random.Generator:
        key = self.master_seed | (self.stream_id << 64)
        return np.random.Generator(np.random.Philox(key=key))

    def stream(self, k: int) -> "SeedSpec":
        """Seed of the ``k``-th member of an ensemble started at this seed."""
        return SeedSpec(self.master_seed, (self.stream_id + k) % _U64)

    def child(self, tag: int) -> "SeedSpec":
        """Independent sub-seed, e.g. the two halves of a product-measure draw."""
        ss = np.random.SeedSequence([self.master_seed, self.stream_id, int(tag)])
        return SeedSpec(int(ss.generate_state(1, np.uint64)[0]), self.stream_id)


def as_seed(seed) -> SeedSpec:
    return seed if isinstance(seed, SeedSpec) else SeedSpec(int(seed))


def _matvec(mat: np.ndarray, x: np.ndarray) -> np.ndarray:
    # row-wise product with a fixed reduction order, independent of batch size
    return np.sum(mat * x[:, None, :], axis=-1)


def joint_increments(seed: SeedSpec, grid: TimeGrid, d: int, n: int):
    """The ``(dB, dW)`` increments that ``simulate_joint`` uses for ``seed``.

    Shapes ``(N, d)`` and ``(N, n)``; each entry is ``N(0, dt)``.
    """
    z = seed.generator().standard_normal((grid.n_steps, d + n)) * np.sqrt(grid.dt)
    return z[:, :d], z[:, d:]


def reference_increments(seed: SeedSpec, grid: TimeGrid, d: int) -> np.ndarray:
    return seed.generator().standard_normal((grid.n_steps, d)) * np.sqrt(grid.dt)


def _check_model(model, validate: bool):
    if not validate:
        return
    if isinstance(model, LinearModel):
        validate_linear(model).raise_if_failed()
    elif isinstance(model, NonlinearModel):
        validate_nonlinear(model).raise_if_failed()
    else:
        raise TypeError(f"unsupported model type {type(model).__name__}")


def _check_grid(model, grid: TimeGrid):
    if abs(grid.T - model.T) > 1e-12 * model.T:
        raise ModelError(f"grid horizon {grid.T} differs from model horizon {model.T}")


def _euler_linear(model: LinearModel, grid: TimeGrid, dB, dW):
    M, N = dB.shape[0], grid.n_steps
    d, n = model.d, model.n
    dt = grid.dt
    X = np.empty((M, N + 1, d))
    Y = np.empty((M, N + 1, n))
    X[:, 0] = model.x0
    Y[:, 0] = 0.0
    A = np.asarray(model.A)
    C = np.asarray(model.C)
    s0 = np.asarray(model.sigma0)
    s1 = np.asarray(model.sigma1)
    for i in range(N):
        x = X[:, i]
        X[:, i + 1] = x + _matvec(A, x) * dt + _matvec(s0, dB[:, i]) + _matvec(s1, dW[:, i])
        Y[:, i + 1] = Y[:, i] + _matvec(C, x) * dt + dW[:, i]
        if not np.isfinite(X[:, i + 1]).all():
            raise NumericalError(f"non-finite signal state at step {i + 1}")
    return X, Y


def _euler_nonlinear(model: NonlinearModel, grid: TimeGrid, x0, dB, dW):
    N = grid.n_steps
    t = grid.times
    dt = grid.dt
    X = np.empty((N + 1, model.d))
    Y = np.zeros((N + 1, model.n))
    X[0] = x0
    for i in range(N):
        x = X[i]
        X[i + 1] = (x + model.drift(t[i], x) * dt + model.sigma0_at(t[i], x) @ dB[i]
                    + model.sigma1_at(t[i], x) @ dW[i])
        Y[i + 1] = Y[i] + model.obs(x) * dt + dW[i]
        if not np.all(np.isfinite(X[i + 1])):
            raise NumericalError(f"non-finite signal state at step {i + 1}")
    return X, Y


def _joint_block(model, grid: TimeGrid, seeds: list[SeedSpec]):
    # overflow is detected explicitly per step, so silence numpy's warnings
    with np.errstate(over="ignore", invalid="ignore"):
        return _joint_block_raw(model, grid, seeds)


def _joint_block_raw(model, grid: TimeGrid, seeds: list[SeedSpec]):
    d, n = model.d, model.n
    incs = [joint_increments(s, grid, d, n) for s in seeds]
    if isinstance(model, LinearModel):
        dB = np.stack([b for b, _ in incs])
        dW = np.stack([w for _, w in incs])
        return _euler_linear(model, grid, dB, dW)
    X = np.empty((len(seeds), grid.n_steps + 1, d))
    Y = np.empty((len(seeds), grid.n_steps + 1, n))
    for k, (s, (dB, dW)) in enumerate(zip(seeds, incs)):
        x0 = np.asarray(model.x0_sampler(s.child(_INITIAL_STATE).generator()), dtype=float)
        X[k], Y[k] = _euler_nonlinear(model, grid, x0.reshape(d), dB, dW)
    return X, Y


def _map_chunks(fn, seeds: list[SeedSpec], threads: int):
    """Apply ``fn`` to contiguous seed chunks and concatenate in order."""
    threads = max(1, int(threads))
    chunk = 4096
    parts = [seeds[i:i + chunk] for i in range(0, len(seeds), chunk)]
    if threads == 1 or len(parts) == 1:
        out = [fn(p) for p in parts]
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            out = list(pool.map(fn, parts))
    if isinstance(out[0], tuple):
        return tuple(np.concatenate(o) for o in zip(*out))
    return np.concatenate(out)


def simulate_joint_ensemble(model, grid: TimeGrid, seed, M: int, threads: int = 1,
                            validate: bool = True):
    """``M`` joint draws; member ``k`` uses ``seed.stream(k)``.

    Returns arrays ``X`` of shape ``(M, N+1, d)`` and ``Y`` of shape ``(M, N+1, n)``.
    """
    seed = as_seed(seed)
    _check_model(model, validate)
    _check_grid(model, grid)
    seeds = [seed.stream(k) for k in range(M)]
    return _map_chunks(lambda s: _joint_block(model, grid, s), seeds, threads)


def simulate_product_ensemble(model, grid: TimeGrid, seed, M: int, threads: int = 1,
                              validate: bool = True):
    """``M`` draws from the product of the marginals.

    Member ``k`` takes the signal of the joint draw with sub-seed
    ``seed.stream(k).child(1)`` and the observation of an independent joint
    draw with sub-seed ``seed.stream(k).child(2)``.
    """
    seed = as_seed(seed)
    _check_model(model, validate)
    _check_grid(model, grid)
    sx = [seed.stream(k).child(_PRODUCT_X) for k in range(M)]
    sy = [seed.stream(k).child(_PRODUCT_Y) for k in range(M)]
    X, _ = _map_chunks(lambda s: _joint_block(model, grid, s), sx, threads)
    _, Y = _map_chunks(lambda s: _joint_block(model, grid, s), sy, threads)
    return X, Y


def simulate_joint(model, grid: TimeGrid, seed, validate: bool = True) -> PathPair:
    """One Euler-Maruyama draw of ``(X, Y)`` with shared observation noise."""
    X, Y = simulate_joint_ensemble(model, grid, seed, 1, validate=validate)
    return PathPair(Path(grid, X[0]), Path(grid, Y[0]), Coupling.JOINT)


def simulate_product(model, grid: TimeGrid, seed, validate: bool = True) -> PathPair:
    X, Y = simulate_product_ensemble(model, grid, seed, 1, validate=validate)
    return PathPair(Path(grid, X[0]), Path(grid, Y[0]), Coupling.PRODUCT)


def product_subseeds(seed) -> tuple[SeedSpec, SeedSpec]:
    """Sub-seeds whose joint draws supply the signal and observation of a product draw."""
    seed = as_seed(seed)
    return seed.child(_PRODUCT_X), seed.child(_PRODUCT_Y)


def _reference_block(model: LinearModel, grid: TimeGrid, yv: np.ndarray, seeds):
    dB = np.stack([reference_increments(s, grid, model.d) for s in seeds])
    M, N, d = dB.shape
    walk = np.zeros((M, N + 1, d))
    np.cumsum(dB, axis=1, out=walk[:, 1:])
    s0 = np.asarray(model.sigma0)
    shared = yv @ np.asarray(model.sigma1).T
    out = model.x0 + np.sum(s0 * walk[..., None, :], axis=-1)
    return out + shared


def _check_observation(grid: TimeGrid, y: Path):
    if not y.grid.same_as(grid):
        raise ModelError("observation path is on a different grid")
    if np.any(y.values[0] != 0.0):
        raise ModelError("observation path must start at 0")


def sample_reference_ensemble(model: LinearModel, grid: TimeGrid, y: Path, seed, M: int,
                              threads: int = 1) -> np.ndarray:
    """``M`` signal paths from the conditional reference measure given ``y``.

    Path ``i`` is ``x0 + sigma0 B_t + sigma1 y_t`` on the grid; returns an
    array of shape ``(M, N+1, d)``.
    """
    seed = as_seed(seed)
    _check_observation(grid, y)
    if y.dim != model.n:
        raise ModelError(f"observation has dimension {y.dim}, model expects {model.n}")
    seeds = [seed.stream(k) for k in range(M)]
    return _map_chunks(lambda s: _reference_block(model, grid, y.values, s), seeds, threads)


def sample_reference(model: LinearModel, grid: TimeGrid, y: Path, seed) -> Path:
    return Path(grid, sample_reference_ensemble(model, grid, y, seed, 1)[0])
