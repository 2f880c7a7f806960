"""Design-of-experiments sampling for surgical configurations.

Continuous osteotomy ratios are drawn by Latin-hypercube stratification
mapped through each marginal's inverse CDF; spring models are drawn
uniformly from the catalog, independently for the front and back
positions. Among several candidate hypercube draws the plan keeps the
one with the best maximin spread in range-normalized space.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import truncnorm

from .mesh import OsteotomySpec

__all__ = [
    "DesignError",
    "SpringModel",
    "DEFAULT_SPRING_CATALOG",
    "ParamSpace",
    "SurgicalConfig",
    "DesignPlan",
    "PlanEntry",
    "sample_plan",
    "validate_plan",
    "write_plan_csv",
    "read_plan_csv",
]

MAX_PLAN_SIZE = 10_000
_DIST_NAMES = ("truncated-normal", "uniform")


class DesignError(ValueError):
    """Raised for invalid sampling spaces or plans."""


@dataclass(frozen=True)
class SpringModel:
    """Linear distractor spring: force k*(L0 - d) while compressed."""

    stiffness: float   # N/mm
    free_length: float  # mm
    id: str

    def __post_init__(self):
        if not (self.stiffness > 0):
            raise DesignError(f"spring {self.id!r}: stiffness must be positive")
        if not (self.free_length > 0):
            raise DesignError(f"spring {self.id!r}: free length must be positive")
        if not self.id:
            raise DesignError("spring id must be non-empty")


DEFAULT_SPRING_CATALOG = (
    SpringModel(stiffness=0.4, free_length=55.0, id="soft"),
    SpringModel(stiffness=0.8, free_length=60.0, id="standard"),
    SpringModel(stiffness=1.2, free_length=65.0, id="stiff"),
)


@dataclass(frozen=True)
class ParamSpace:
    """Ranges and marginal distributions for the three osteotomy ratios.

    ``distributions`` names the marginal for (A, AP, LAT) in order.
    Truncated normals use mean = range midpoint and sd = width/6,
    truncated at the bounds.
    """

    a_range: tuple = (0.18, 0.30)
    ap_range: tuple = (0.47, 0.63)
    lat_range: tuple = (0.10, 0.25)
    spring_catalog: tuple = DEFAULT_SPRING_CATALOG
    distributions: tuple = ("truncated-normal",) * 3

    def __post_init__(self):
        for name, (lo, hi) in zip(("A", "AP", "LAT"), self.ranges):
            if not (0.0 < lo < hi < 1.0):
                raise DesignError(f"{name} range [{lo}, {hi}] must satisfy 0 < lo < hi < 1")
        if len(self.spring_catalog) == 0:
            raise DesignError("spring catalog is empty")
        if len(self.distributions) != 3:
            raise DesignError("need one distribution per continuous dimension")
        for d in self.distributions:
            if d not in _DIST_NAMES:
                raise DesignError(f"unknown distribution {d!r}, expected one of {_DIST_NAMES}")
        ids = [s.id for s in self.spring_catalog]
        if len(set(ids)) != len(ids):
            raise DesignError("spring catalog ids must be unique")

    @property
    def ranges(self):
        return (self.a_range, self.ap_range, self.lat_range)

    def _truncnorm(self, dim: int):
        lo, hi = self.ranges[dim]
        mean = 0.5 * (lo + hi)
        sd = (hi - lo) / 6.0
        return truncnorm((lo - mean) / sd, (hi - mean) / sd, loc=mean, scale=sd)

    def ppf(self, dim: int, u):
        """Inverse CDF of the marginal for dimension dim (0=A, 1=AP, 2=LAT)."""
        lo, hi = self.ranges[dim]
        if self.distributions[dim] == "uniform":
            return lo + np.asarray(u) * (hi - lo)
        return self._truncnorm(dim).ppf(u)

    def cdf(self, dim: int, x):
        lo, hi = self.ranges[dim]
        if self.distributions[dim] == "uniform":
            return (np.asarray(x) - lo) / (hi - lo)
        return self._truncnorm(dim).cdf(x)

    def spring_by_id(self, spring_id: str) -> SpringModel:
        for s in self.spring_catalog:
            if s.id == spring_id:
                return s
        raise DesignError(f"unknown spring id {spring_id!r}")


@dataclass(frozen=True)
class SurgicalConfig:
    """One simulated surgery: osteotomy ratios plus the two springs."""

    a_ratio: float
    ap_ratio: float
    lat_ratio: float
    front_spring: SpringModel
    back_spring: SpringModel

    def to_osteotomy_spec(self, notch_diameter: float = 5.0) -> OsteotomySpec:
        return OsteotomySpec(a_ratio=self.a_ratio, ap_ratio=self.ap_ratio,
                             lat_ratio=self.lat_ratio, notch_diameter=notch_diameter)


@dataclass
class DesignPlan:
    configs: list
    seed: int
    maximin_score: float
    candidate_scores: list = field(default_factory=list)

    def __len__(self):
        return len(self.configs)


def _lhs_unit(rng: np.random.Generator, n: int, dims: int) -> np.ndarray:
    """Latin-hypercube draw on the unit cube: one point per stratum per dim."""
    u = np.empty((n, dims))
    for d in range(dims):
        u[:, d] = (rng.permutation(n) + rng.uniform(size=n)) / n
    return u


def _min_pairwise_distance(x: np.ndarray) -> float:
    if len(x) < 2:
        return np.inf
    d2 = np.sum((x[:, None, :] - x[None, :, :]) ** 2, axis=-1)
    d2[np.diag_indices(len(x))] = np.inf
    return float(np.sqrt(d2.min()))


def sample_plan(n: int, space: ParamSpace = None, seed: int = 0,
                candidates: int = 20) -> DesignPlan:
    """Sample n surgical configurations.

    Draws ``candidates`` Latin-hypercube instances for the continuous
    ratios and keeps the one with the largest minimum pairwise distance
    in range-normalized space, then maps through the marginal inverse
    CDFs and attaches uniformly drawn springs. Where the A and AP
    ranges overlap, rows violating A < AP get their AP values re-paired
    with other rows, which preserves every marginal stratification
    census. Deterministic for a given seed.
    """
    if space is None:
        space = ParamSpace()
    if not (1 <= n <= MAX_PLAN_SIZE):
        raise DesignError(f"plan size must lie in [1, {MAX_PLAN_SIZE}]")
    if candidates < 1:
        raise DesignError("need at least one candidate design")
    rng = np.random.default_rng(seed)

    best_u, best_score, scores = None, -np.inf, []
    for _ in range(candidates):
        u = _lhs_unit(rng, n, 3)
        score = _min_pairwise_distance(u)
        scores.append(score)
        if score > best_score:
            best_u, best_score = u, score

    vals = np.column_stack([space.ppf(d, best_u[:, d]) for d in range(3)])
    # enforce A < AP by re-pairing AP values between rows; the per-dim
    # value multisets are untouched, so the stratification census holds.
    # each swap fixes row i without breaking its partner, so this stops.
    viol = np.nonzero(vals[:, 0] >= vals[:, 1])[0]
    while len(viol):
        i = viol[0]
        partners = np.nonzero((vals[:, 1] > vals[i, 0]) & (vals[:, 0] < vals[i, 1]))[0]
        if len(partners) == 0:
            raise DesignError(
                "could not satisfy A < AP by re-pairing samples; "
                "the A and AP ranges overlap too much")
        j = partners[rng.integers(len(partners))]
        vals[[i, j], 1] = vals[[j, i], 1]
        viol = np.nonzero(vals[:, 0] >= vals[:, 1])[0]

    n_springs = len(space.spring_catalog)
    front = rng.integers(0, n_springs, size=n)
    back = rng.integers(0, n_springs, size=n)
    configs = [
        SurgicalConfig(
            a_ratio=float(vals[i, 0]),
            ap_ratio=float(vals[i, 1]),
            lat_ratio=float(vals[i, 2]),
            front_spring=space.spring_catalog[front[i]],
            back_spring=space.spring_catalog[back[i]],
        )
        for i in range(n)
    ]
    return DesignPlan(configs=configs, seed=seed,
                      maximin_score=best_score, candidate_scores=scores)


def validate_plan(configs, space: ParamSpace = None) -> list:
    """Range, ordering, and catalog membership checks; returns violations."""
    if space is None:
        space = ParamSpace()
    catalog_ids = {s.id: s for s in space.spring_catalog}
    problems = []
    for i, cfg in enumerate(configs):
        for name, value, (lo, hi) in zip(
                ("A", "AP", "LAT"),
                (cfg.a_ratio, cfg.ap_ratio, cfg.lat_ratio),
                space.ranges):
            if not (lo <= value <= hi):
                problems.append(f"config {i}: {name}={value:.4f} outside [{lo}, {hi}]")
        if not (cfg.a_ratio < cfg.ap_ratio):
            problems.append(f"config {i}: A={cfg.a_ratio:.4f} not below AP={cfg.ap_ratio:.4f}")
        for which, s in (("front", cfg.front_spring), ("back", cfg.back_spring)):
            known = catalog_ids.get(s.id)
            if known is None or known != s:
                problems.append(f"config {i}: {which} spring {s.id!r} not in catalog")
    return problems


_PLAN_COLUMNS = ["patient_id", "config_id", "A", "AP", "LAT",
                 "front_k", "front_L0", "back_k", "back_L0",
                 "front_id", "back_id", "seed"]


@dataclass(frozen=True)
class PlanEntry:
    patient_id: str
    config_id: str
    config: SurgicalConfig
    seed: int


def write_plan_csv(entries, path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(_PLAN_COLUMNS)
        for e in entries:
            c = e.config
            w.writerow([
                e.patient_id, e.config_id,
                repr(c.a_ratio), repr(c.ap_ratio), repr(c.lat_ratio),
                repr(c.front_spring.stiffness), repr(c.front_spring.free_length),
                repr(c.back_spring.stiffness), repr(c.back_spring.free_length),
                c.front_spring.id, c.back_spring.id, e.seed,
            ])


def read_plan_csv(path, space: ParamSpace = None) -> list:
    """Load plan entries; spring columns must match the catalog exactly."""
    if space is None:
        space = ParamSpace()
    entries = []
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames != _PLAN_COLUMNS:
            raise DesignError(
                f"unexpected plan columns {reader.fieldnames}, expected {_PLAN_COLUMNS}")
        for row in reader:
            front = space.spring_by_id(row["front_id"])
            back = space.spring_by_id(row["back_id"])
            for which, s in (("front", front), ("back", back)):
                if (float(row[f"{which}_k"]) != s.stiffness
                        or float(row[f"{which}_L0"]) != s.free_length):
                    raise DesignError(
                        f"plan row {row['config_id']}: {which} spring parameters "
                        f"disagree with catalog entry {s.id!r}")
            entries.append(PlanEntry(
                patient_id=row["patient_id"],
                config_id=row["config_id"],
                config=SurgicalConfig(
                    a_ratio=float(row["A"]),
                    ap_ratio=float(row["AP"]),
                    lat_ratio=float(row["LAT"]),
                    front_spring=front,
                    back_spring=back,
                ),
                seed=int(row["seed"]),
            ))
    return entries
