"""Model specifications, dyadic time grids and sampled paths.

The linear system is

    dX = A X dt + sigma0 dB + sigma1 dW,    X_0 = x0
    dY = C X dt + dW,                       Y_0 = 0

with B (d-dim) and W (n-dim) independent Brownian motions.  The same W
drives the signal and the observation, which is the correlated-noise case.
"""

from __future__ import annotations

import enum
import hashlib
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

#: largest accepted grid level (2**24 steps)
MAX_GRID_LEVEL = 24

#: relative conditioning floor for sigma0 (smallest / largest singular value)
SIGMA0_RCOND = 1e-10


class ModelError(ValueError):
    """Raised when a model or grid fails validation."""


class NumericalError(FloatingPointError):
    """Raised when a computation leaves the finite/PSD regime."""


class Coupling(str, enum.Enum):
    JOINT = "joint"
    PRODUCT = "product"
    REFERENCE = "reference"


def _as_matrix(a) -> np.ndarray:
    m = np.array(a, dtype=float)
    if m.ndim == 0:
        m = m.reshape(1, 1)
    elif m.ndim == 1:
        m = m.reshape(-1, 1) if m.size > 1 else m.reshape(1, 1)
    m.setflags(write=False)
    return m


def _as_vector(v) -> np.ndarray:
    out = np.atleast_1d(np.array(v, dtype=float)).ravel()
    out.setflags(write=False)
    return out


@dataclass(frozen=True, eq=False)
class LinearModel:
    """Constant-coefficient linear signal/observation pair.

    Scalars are accepted for every coefficient and promoted to 1x1
    matrices, so ``LinearModel(A=-1, C=1, sigma0=1, sigma1=0.5, x0=1)``
    is the usual scalar benchmark.
    """

    A: np.ndarray
    C: np.ndarray
    sigma0: np.ndarray
    sigma1: np.ndarray
    x0: np.ndarray
    T: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "A", _as_matrix(self.A))
        object.__setattr__(self, "C", _as_matrix(self.C))
        object.__setattr__(self, "sigma0", _as_matrix(self.sigma0))
        s1 = np.array(self.sigma1, dtype=float)
        if s1.ndim == 1 and s1.size > 1:
            # a vector loading means d x 1 (one shared noise)
            s1 = s1.reshape(-1, 1)
        object.__setattr__(self, "sigma1", _as_matrix(s1))
        object.__setattr__(self, "x0", _as_vector(self.x0))
        object.__setattr__(self, "T", float(self.T))

    @property
    def d(self) -> int:
        return self.A.shape[0]

    @property
    def n(self) -> int:
        return self.C.shape[0]

    @property
    def beta(self) -> np.ndarray:
        """Drift gap matrix ``A - sigma1 C`` between the true and reference dynamics."""
        return self.A - self.sigma1 @ self.C

    @property
    def noise_cov(self) -> np.ndarray:
        """Private noise covariance rate ``sigma0 sigma0^T``."""
        return self.sigma0 @ self.sigma0.T

    def replace(self, **changes) -> "LinearModel":
        kw = dict(A=self.A, C=self.C, sigma0=self.sigma0, sigma1=self.sigma1,
                  x0=self.x0, T=self.T)
        kw.update(changes)
        return LinearModel(**kw)

    def fingerprint(self) -> str:
        """Short stable hash of the coefficients, used in output headers."""
        h = hashlib.sha256()
        for arr in (self.A, self.C, self.sigma0, self.sigma1, self.x0):
            h.update(np.ascontiguousarray(arr, dtype="<f8").tobytes())
            h.update(str(arr.shape).encode())
        h.update(repr(self.T).encode())
        return h.hexdigest()[:16]

    # uniform interface shared with NonlinearModel (used by the sampler)
    def drift(self, t, x):
        return x @ self.A.T

    def obs(self, x):
        return x @ self.C.T

    def sigma0_at(self, t, x):
        return self.sigma0

    def sigma1_at(self, t, x):
        return self.sigma1


@dataclass(frozen=True, eq=False)
class NonlinearModel:
    """General signal/observation model with user-supplied coefficient maps.

    ``b(t, x)``, ``h(x)``, ``sigma0(t, x)``, ``sigma1(t, x)`` act on a single
    state vector of length ``d``.  ``x0_sampler(rng)`` draws the initial
    state from a ``numpy.random.Generator``.
    """

    b: Callable
    h: Callable
    sigma0: Callable
    sigma1: Callable
    x0_sampler: Callable
    d: int
    n: int
    T: float = 1.0
    growth_bound: float = 10.0

    def drift(self, t, x):
        return np.asarray(self.b(t, x), dtype=float)

    def obs(self, x):
        return np.asarray(self.h(x), dtype=float)

    def sigma0_at(self, t, x):
        return np.asarray(self.sigma0(t, x), dtype=float).reshape(self.d, self.d)

    def sigma1_at(self, t, x):
        return np.asarray(self.sigma1(t, x), dtype=float).reshape(self.d, self.n)


@dataclass
class ValidationReport:
    problems: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.problems

    def raise_if_failed(self):
        if self.problems:
            raise ModelError("; ".join(self.problems))

    def __bool__(self):
        return self.ok


def validate_linear(model: LinearModel) -> ValidationReport:
    """Check shapes, finiteness and invertibility of ``sigma0``.

    Never raises; every violated invariant is listed in the report.
    A singular ``sigma0`` is reported as ``"sigma0 singular"``.
    """
    rep = ValidationReport()
    d = model.A.shape[0]
    shapes = {
        "A": (model.A.shape, (d, d)),
        "C": (model.C.shape, (model.C.shape[0], d)),
        "sigma0": (model.sigma0.shape, (d, d)),
        "sigma1": (model.sigma1.shape, (d, model.C.shape[0])),
        "x0": (model.x0.shape, (d,)),
    }
    bad = [f"{k} has shape {got}, expected {want}"
           for k, (got, want) in shapes.items() if got != want]
    if bad:
        rep.problems.append("dimension mismatch: " + ", ".join(bad))
    for name in ("A", "C", "sigma0", "sigma1", "x0"):
        if not np.all(np.isfinite(getattr(model, name))):
            rep.problems.append(f"{name} has non-finite entries")
    if not (np.isfinite(model.T) and model.T > 0):
        rep.problems.append("horizon T must be positive")
    s0 = model.sigma0
    if s0.shape[0] == s0.shape[1] and np.all(np.isfinite(s0)):
        sv = np.linalg.svd(s0, compute_uv=False)
        if sv[0] == 0 or sv[-1] <= SIGMA0_RCOND * sv[0]:
            rep.problems.append("sigma0 singular (smallest/largest singular value "
                                f"{(sv[-1] / sv[0]) if sv[0] else 0.0:.3g} "
                                f"<= {SIGMA0_RCOND:g})")
    return rep


def validate_nonlinear(model: NonlinearModel, n_checks: int = 64,
                       seed: int = 0) -> ValidationReport:
    """Spot-check finiteness and the declared linear-growth bound."""
    rep = ValidationReport()
    rng = np.random.default_rng(seed)
    for _ in range(n_checks):
        t = rng.uniform(0.0, model.T)
        x = rng.standard_normal(model.d) * rng.choice([0.1, 1.0, 10.0])
        try:
            b = model.drift(t, x)
            h = model.obs(x)
            s0 = model.sigma0_at(t, x)
            s1 = model.sigma1_at(t, x)
        except Exception as exc:  # noqa: BLE001 - report, don't raise
            rep.problems.append(f"coefficient evaluation failed: {exc}")
            return rep
        if b.shape != (model.d,) or h.shape != (model.n,):
            rep.problems.append("dimension mismatch: b or h returns wrong shape")
            return rep
        vals = [b, h, s0, s1]
        if not all(np.all(np.isfinite(v)) for v in vals):
            rep.problems.append(f"non-finite coefficient at t={t:.3g}")
            return rep
        total = sum(np.linalg.norm(v) for v in vals)
        if total > model.growth_bound * (1.0 + np.linalg.norm(x)):
            rep.problems.append(
                f"growth bound {model.growth_bound:g} exceeded at |x|={np.linalg.norm(x):.3g}")
            return rep
    return rep


@dataclass(frozen=True, eq=False)
class TimeGrid:
    level: int
    T: float
    times: np.ndarray = field(repr=False)

    @property
    def n_steps(self) -> int:
        return 2 ** self.level

    @property
    def dt(self) -> float:
        return self.T / 2 ** self.level

    def __len__(self):
        return self.times.size

    def same_as(self, other: "TimeGrid") -> bool:
        return self.level == other.level and self.T == other.T

    def refine(self) -> "TimeGrid":
        return make_dyadic_grid(self.level + 1, self.T)

    def index_of(self, t: float) -> int:
        """Index of a grid time; raises ``ModelError`` off-grid."""
        k = t / self.dt
        i = int(round(k))
        if not (0 <= i <= self.n_steps) or abs(self.times[i] - t) > 1e-12 * max(1.0, self.T):
            raise ModelError(f"t={t!r} is not a point of the level-{self.level} grid")
        return i


def make_dyadic_grid(level: int, T: float) -> TimeGrid:
    """Equispaced grid with ``2**level + 1`` points on ``[0, T]``."""
    if int(level) != level or level < 0:
        raise ModelError(f"grid level must be a non-negative integer, got {level!r}")
    level = int(level)
    if level > MAX_GRID_LEVEL:
        raise ModelError(f"grid level {level} exceeds memory guard {MAX_GRID_LEVEL}")
    if not (np.isfinite(T) and T > 0):
        raise ModelError(f"horizon must be positive, got T={T!r}")
    N = 2 ** level
    times = np.arange(N + 1) * (float(T) / N)
    times[-1] = T
    times.setflags(write=False)
    return TimeGrid(level, float(T), times)


@dataclass(frozen=True, eq=False)
class Path:
    grid: TimeGrid
    values: np.ndarray

    def __post_init__(self):
        v = np.array(self.values, dtype=float)
        if v.ndim == 1:
            v = v[:, None]
        if v.shape[0] != len(self.grid):
            raise ModelError(f"path has {v.shape[0]} rows, grid has {len(self.grid)} points")
        if not np.all(np.isfinite(v)):
            raise NumericalError("path contains non-finite values")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def dim(self) -> int:
        return self.values.shape[1]

    def increments(self) -> np.ndarray:
        return np.diff(self.values, axis=0)

    def subsample(self, level: int) -> "Path":
        """Restrict to a coarser dyadic grid (observed at the coarse times)."""
        if level > self.grid.level:
            raise ModelError("cannot subsample to a finer grid")
        stride = 2 ** (self.grid.level - level)
        return Path(make_dyadic_grid(level, self.grid.T), self.values[::stride])


@dataclass(frozen=True, eq=False)
class PathPair:
    x: Path
    y: Path
    coupling_tag: Coupling

    def __post_init__(self):
        if not self.x.grid.same_as(self.y.grid):
            raise ModelError("signal and observation paths live on different grids")
        if np.any(self.y.values[0] != 0.0):
            raise ModelError("observation path must start at 0")
        object.__setattr__(self, "coupling_tag", Coupling(self.coupling_tag))

    @property
    def grid(self) -> TimeGrid:
        return self.x.grid
