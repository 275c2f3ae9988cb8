"""Physical parameter vectors, their bounds, and part-level containers.

Every part carries six positive quantities in a fixed order::

    youngs_modulus   Pa
    poisson_ratio    -
    yield_stress     Pa
    viscosity        Pa*s   (plastic viscosity)
    friction_angle   degrees
    density          kg/m^3

Only the Young's modulus range below is taken from published practice
(1e3..1e7 Pa); the remaining ranges are conventional artifact defaults.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

PARAM_NAMES: tuple[str, ...] = (
    "youngs_modulus",
    "poisson_ratio",
    "yield_stress",
    "viscosity",
    "friction_angle",
    "density",
)
PARAM_DIM = len(PARAM_NAMES)
E, NU, YIELD, VISC, FRICTION, DENSITY = range(PARAM_DIM)

DEFAULT_LOWER = np.array([1e3, 0.05, 1e2, 1.0, 10.0, 1e2])
DEFAULT_UPPER = np.array([1e7, 0.45, 1e6, 1e4, 45.0, 1e4])
DEFAULT_EPS = 1e-8

# a yield stress at (or above) this value disables plasticity entirely
ELASTIC_YIELD_CAP = float(DEFAULT_UPPER[YIELD])


def param_index(name: str) -> int:
    try:
        return PARAM_NAMES.index(name)
    except ValueError:
        raise ValueError(f"unknown parameter {name!r}; expected one of {PARAM_NAMES}") from None


@dataclass(frozen=True)
class ParamBounds:
    """Box bounds ``lower <= theta <= upper`` for one parameter vector."""

    lower: np.ndarray = field(default_factory=lambda: DEFAULT_LOWER.copy())
    upper: np.ndarray = field(default_factory=lambda: DEFAULT_UPPER.copy())
    eps: float = DEFAULT_EPS

    def __post_init__(self):
        lower = np.asarray(self.lower, dtype=np.float64)
        upper = np.asarray(self.upper, dtype=np.float64)
        object.__setattr__(self, "lower", lower)
        object.__setattr__(self, "upper", upper)
        if lower.shape != upper.shape or lower.ndim != 1:
            raise ValueError("bounds must be 1-D arrays of equal length")
        if np.any(lower <= 0) or np.any(upper <= lower):
            raise ValueError("bounds require 0 < lower < upper elementwise")
        if self.eps <= 0:
            raise ValueError("eps must be positive")

    @property
    def dim(self) -> int:
        return self.lower.size

    def tile(self, reps: int) -> "ParamBounds":
        """Bounds for ``reps`` stacked copies of this vector (flattened)."""
        return ParamBounds(np.tile(self.lower, reps), np.tile(self.upper, reps), self.eps)

    def contains(self, theta, rtol: float = 1e-12) -> bool:
        theta = np.asarray(theta, dtype=np.float64)
        lo = self.lower * (1 - rtol)
        hi = self.upper * (1 + rtol)
        return bool(np.all(theta >= lo) and np.all(theta <= hi))

    def to_json(self) -> dict:
        return {"lower": self.lower.tolist(), "upper": self.upper.tolist(), "eps": self.eps}

    @classmethod
    def from_json(cls, data: dict) -> "ParamBounds":
        return cls(np.asarray(data["lower"], float), np.asarray(data["upper"], float),
                   float(data.get("eps", DEFAULT_EPS)))


def theta_from_mapping(values: dict, defaults=None) -> np.ndarray:
    """Build a parameter vector from a ``{name: value}`` mapping."""
    theta = np.array(DEFAULT_THETA if defaults is None else defaults, dtype=np.float64)
    for name, value in values.items():
        theta[param_index(name)] = float(value)
    return theta


def theta_to_mapping(theta) -> dict:
    return {name: float(v) for name, v in zip(PARAM_NAMES, np.asarray(theta, float))}


# a moderately soft elastic solid
DEFAULT_THETA = np.array([1e5, 0.3, ELASTIC_YIELD_CAP, 10.0, 30.0, 1e3])


@dataclass
class PartParams:
    """Per-part physical parameters ``theta`` of shape ``(M, 6)`` with shared bounds."""

    theta: np.ndarray
    bounds: ParamBounds = field(default_factory=ParamBounds)

    def __post_init__(self):
        self.theta = np.atleast_2d(np.asarray(self.theta, dtype=np.float64)).copy()
        if self.theta.shape[1] != self.bounds.dim:
            raise ValueError(f"theta has {self.theta.shape[1]} columns, bounds have {self.bounds.dim}")
        if np.any(self.theta <= 0):
            raise ValueError("physical parameters must be positive")

    @property
    def n_parts(self) -> int:
        return self.theta.shape[0]

    def copy(self) -> "PartParams":
        return PartParams(self.theta.copy(), self.bounds)

    def per_particle(self, labels: np.ndarray) -> np.ndarray:
        """Expand to a ``(P, 6)`` table by part label."""
        return self.theta[np.asarray(labels, dtype=np.int64)]

    def to_json(self) -> dict:
        return {"theta": [theta_to_mapping(t) for t in self.theta], "bounds": self.bounds.to_json()}

    @classmethod
    def from_json(cls, data: dict) -> "PartParams":
        bounds = ParamBounds.from_json(data["bounds"]) if "bounds" in data else ParamBounds()
        rows = [theta_from_mapping(t) if isinstance(t, dict) else np.asarray(t, float)
                for t in data["theta"]]
        return cls(np.array(rows), bounds)


@dataclass(frozen=True)
class ParamLayout:
    """Selects the entries of a ``(M, 6)`` parameter table that form a flat search vector.

    ``active`` lists parameter indices; with ``shared=True`` one value per
    active parameter is broadcast to every part (object-level), otherwise each
    part has its own copy (part-level, vector laid out part-major).
    """

    n_parts: int
    active: tuple[int, ...] = tuple(range(PARAM_DIM))
    shared: bool = False

    def __post_init__(self):
        active = tuple(int(a) for a in self.active)
        if not active or len(set(active)) != len(active) or not all(0 <= a < PARAM_DIM for a in active):
            raise ValueError(f"active parameter indices must be distinct values in [0, {PARAM_DIM})")
        object.__setattr__(self, "active", active)
        if self.n_parts < 1:
            raise ValueError("n_parts must be >= 1")

    @classmethod
    def from_names(cls, n_parts: int, names=None, shared: bool = False) -> "ParamLayout":
        active = tuple(range(PARAM_DIM)) if names is None else tuple(param_index(n) for n in names)
        return cls(n_parts, active, shared)

    @property
    def dim(self) -> int:
        return len(self.active) * (1 if self.shared else self.n_parts)

    @property
    def groups(self) -> int:
        return 1 if self.shared else self.n_parts

    def labels(self) -> list[str]:
        names = [PARAM_NAMES[a] for a in self.active]
        if self.shared:
            return names
        return [f"part{m}.{n}" for m in range(self.n_parts) for n in names]

    def bounds(self, base: ParamBounds) -> ParamBounds:
        idx = list(self.active)
        return ParamBounds(np.tile(base.lower[idx], self.groups), np.tile(base.upper[idx], self.groups), base.eps)

    def flatten(self, params: PartParams) -> np.ndarray:
        """Extract the search vector; shared layouts take the per-parameter geometric mean."""
        if params.n_parts != self.n_parts:
            raise ValueError(f"expected {self.n_parts} parts, got {params.n_parts}")
        sub = params.theta[:, list(self.active)]
        if self.shared:
            return np.exp(np.log(sub).mean(axis=0))
        return sub.reshape(-1).copy()

    def expand(self, vec, base: PartParams) -> PartParams:
        """Write a search vector back into a copy of ``base``."""
        vec = np.asarray(vec, dtype=np.float64).reshape(self.groups, len(self.active))
        theta = base.theta.copy()
        theta[:, list(self.active)] = vec
        return PartParams(theta, base.bounds)
