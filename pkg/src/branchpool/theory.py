"""Numerical verification of the information-sharing analysis.

Works on small discrete joints over (Y, Z_1..Z_K) by exact summation, plus a
closed-form Gaussian model of correlated per-path noise. Conditioning on any
ambient state is absorbed: tables are interpreted as already conditioned; an
explicit state variable can be emulated as one more axis in the given-set.
All quantities are in nats; 0 log 0 = 0.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

MAX_TABLE_CELLS = 10_000_000
_NORMALIZATION_TOL = 1e-12


@dataclass(frozen=True)
class DiscreteJoint:
    """A normalized probability table over axes (Y, Z_1, ..., Z_K).

    Axis 0 is always the answer variable Y; axes 1..K are the per-path
    information variables.
    """

    table: np.ndarray

    def __post_init__(self) -> None:
        table = np.asarray(self.table, dtype=np.float64)
        object.__setattr__(self, "table", table)
        if table.ndim < 2:
            raise ValueError("joint needs at least axes (Y, Z_1)")
        if table.size > MAX_TABLE_CELLS:
            raise ValueError(f"joint table too large ({table.size} cells)")
        if any(s < 1 for s in table.shape):
            raise ValueError("every variable needs support of at least 1")
        if np.any(table < 0):
            raise ValueError("probabilities must be nonnegative")
        if abs(float(table.sum()) - 1.0) > _NORMALIZATION_TOL:
            raise ValueError(f"table must sum to 1 (got {float(table.sum())!r})")

    @property
    def num_paths(self) -> int:
        return self.table.ndim - 1

    @property
    def path_vars(self) -> tuple[int, ...]:
        return tuple(range(1, self.table.ndim))


def _marginal_entropy(joint: DiscreteJoint, vars: Sequence[int]) -> float:
    """Entropy of the marginal over *vars* (empty set has entropy 0)."""
    keep = set(vars)
    axes = tuple(i for i in range(joint.table.ndim) if i not in keep)
    marginal = joint.table.sum(axis=axes) if axes else joint.table
    p = np.asarray(marginal, dtype=np.float64).ravel()
    p = p[p > 0.0]
    return float(-np.sum(p * np.log(p)))


def _check_vars(joint: DiscreteJoint, *groups: Sequence[int]) -> None:
    seen: set[int] = set()
    for group in groups:
        for v in group:
            if not 0 <= v < joint.table.ndim:
                raise ValueError(f"variable index {v} out of range")
            if v in seen:
                raise ValueError(f"variable index sets overlap on {v}")
            seen.add(v)


def mutual_information(
    joint: DiscreteJoint,
    left_vars: Sequence[int],
    right_vars: Sequence[int],
    given_vars: Sequence[int] = (),
) -> float:
    """Exact conditional mutual information I(left; right | given) in nats.

    Variables outside the three sets are marginalized out. The index sets
    must be pairwise disjoint.
    """
    _check_vars(joint, left_vars, right_vars, given_vars)
    left, right, given = tuple(left_vars), tuple(right_vars), tuple(given_vars)
    return (
        _marginal_entropy(joint, left + given)
        + _marginal_entropy(joint, right + given)
        - _marginal_entropy(joint, given)
        - _marginal_entropy(joint, left + right + given)
    )


@dataclass(frozen=True)
class InfoQuantities:
    """Pooled (G), aggregate (L), and redundant (R = L - G) information."""

    pooled: float
    aggregate: float
    redundant: float


def info_quantities(joint: DiscreteJoint, given_vars: Sequence[int] = ()) -> InfoQuantities:
    """G, L, R for the answer axis against all path axes."""
    given = tuple(given_vars)
    paths = tuple(v for v in joint.path_vars if v not in given)
    pooled = mutual_information(joint, (0,), paths, given)
    aggregate = sum(mutual_information(joint, (0,), (v,), given) for v in paths)
    return InfoQuantities(pooled=pooled, aggregate=aggregate, redundant=aggregate - pooled)


def total_correlation(
    joint: DiscreteJoint,
    vars: Sequence[int],
    given_vars: Sequence[int] = (),
) -> float:
    """Conditional total correlation of *vars*: sum of marginal conditional
    entropies minus the joint conditional entropy."""
    if len(vars) < 2:
        raise ValueError("total correlation needs at least 2 variables")
    _check_vars(joint, vars, given_vars)
    given = tuple(given_vars)
    h_given = _marginal_entropy(joint, given)
    parts = sum(_marginal_entropy(joint, (v,) + given) - h_given for v in vars)
    joint_h = _marginal_entropy(joint, tuple(vars) + given) - h_given
    return parts - joint_h


@dataclass(frozen=True)
class IdentityReport:
    """Both sides of the redundancy / total-correlation identity."""

    redundant: float
    tc_difference: float
    tc_given_answer: float
    residual: float
    ok: bool


IDENTITY_TOLERANCE = 1e-10


def verify_tc_identity(joint: DiscreteJoint) -> IdentityReport:
    """Check R = TC(Z) - TC(Z | Y) by computing both sides independently."""
    quantities = info_quantities(joint)
    tc_plain = total_correlation(joint, joint.path_vars)
    tc_given_answer = total_correlation(joint, joint.path_vars, given_vars=(0,))
    difference = tc_plain - tc_given_answer
    residual = abs(quantities.redundant - difference)
    return IdentityReport(
        redundant=quantities.redundant,
        tc_difference=difference,
        tc_given_answer=tc_given_answer,
        residual=residual,
        ok=residual <= IDENTITY_TOLERANCE,
    )


@dataclass(frozen=True)
class CollaborativeGain:
    """Deltas (collaborative minus independent) and the identity residual."""

    delta_pooled: float
    delta_aggregate: float
    delta_redundant: float
    residual: float


def collaborative_gain(joint_col: DiscreteJoint, joint_ind: DiscreteJoint) -> CollaborativeGain:
    """Decompose the pooled-information difference between two regimes.

    The identity under test: delta pooled = delta aggregate + (redundant_ind
    - redundant_col). The residual should vanish for any pair of joints over
    the same answer variable.
    """
    if joint_col.table.shape[0] != joint_ind.table.shape[0]:
        raise ValueError("answer-variable arity mismatch between joints")
    col = info_quantities(joint_col)
    ind = info_quantities(joint_ind)
    delta_pooled = col.pooled - ind.pooled
    delta_aggregate = col.aggregate - ind.aggregate
    delta_redundant = col.redundant - ind.redundant
    residual = abs(delta_pooled - delta_aggregate - (ind.redundant - col.redundant))
    return CollaborativeGain(delta_pooled, delta_aggregate, delta_redundant, residual)


def random_joint(arities: Sequence[int], rng: np.random.Generator) -> DiscreteJoint:
    """A dense random normalized joint over the given axis sizes."""
    table = rng.random(tuple(arities))
    return DiscreteJoint(table / table.sum())


def product_channel_joint(
    answer_arity: int,
    path_arities: Sequence[int],
    rng: np.random.Generator,
) -> DiscreteJoint:
    """A joint where paths are conditionally independent given the answer.

    Built as p(y) * prod_i p(z_i | y) with random marginal and channels, so
    TC(Z | Y) = 0 holds by construction.
    """
    p_y = rng.random(answer_arity)
    p_y = p_y / p_y.sum()
    table = p_y.copy()
    for arity in path_arities:
        channel = rng.random((answer_arity, arity))
        channel = channel / channel.sum(axis=1, keepdims=True)
        # table has axes (y, z_1..z_j); broadcast the next channel over them.
        expanded = channel.reshape((answer_arity,) + (1,) * (table.ndim - 1) + (arity,))
        table = table[..., np.newaxis] * expanded
    return DiscreteJoint(table)


@dataclass(frozen=True)
class GaussianRedundancyModel:
    """Scalar signal observed through paths with shared and private noise.

    Each path sees the signal plus a common noise component (variance
    ``sigma_c2``, shared by all paths) plus its own noise (``sigma_u2``).
    """

    num_paths: int
    sigma_u2: float
    sigma_c2: float

    def __post_init__(self) -> None:
        if self.num_paths < 1:
            raise ValueError("num_paths must be at least 1")
        if self.sigma_u2 <= 0:
            raise ValueError("sigma_u2 must be positive")
        if self.sigma_c2 < 0:
            raise ValueError("sigma_c2 must be nonnegative")

    @property
    def sigma2(self) -> float:
        """Marginal noise variance of each path."""
        return self.sigma_u2 + self.sigma_c2

    @property
    def rho(self) -> float:
        """Pairwise noise correlation across paths."""
        return self.sigma_c2 / self.sigma2


def gaussian_mi_closed_form(model: GaussianRedundancyModel) -> float:
    """Closed-form I(Y; Z_1..Z_K) in nats."""
    k = model.num_paths
    return 0.5 * math.log1p(k / (model.sigma_u2 + k * model.sigma_c2))


def gaussian_mi_oracle(model: GaussianRedundancyModel) -> float:
    """Independent oracle: build the noise covariance, invert numerically."""
    k = model.num_paths
    if k > 4096:
        raise ValueError("oracle limited to 4096 paths (dense inversion)")
    cov = model.sigma_u2 * np.eye(k) + model.sigma_c2 * np.ones((k, k))
    ones = np.ones(k)
    quad = float(ones @ np.linalg.solve(cov, ones))
    return 0.5 * math.log1p(quad)


def gaussian_mi_via_width(model: GaussianRedundancyModel) -> float:
    """Equivalent form through the effective parallel width."""
    width = effective_width(model.num_paths, model.rho)
    return 0.5 * math.log1p(width / model.sigma2)


def gaussian_mi_monte_carlo(
    model: GaussianRedundancyModel,
    n_samples: int,
    rng: np.random.Generator,
) -> tuple[float, float]:
    """Sampled MI estimate using the analytic posterior; returns (mean, SE)."""
    if n_samples < 2:
        raise ValueError("need at least 2 samples")
    k = model.num_paths
    y = rng.standard_normal(n_samples)
    common = rng.standard_normal(n_samples) * math.sqrt(model.sigma_c2)
    private = rng.standard_normal((n_samples, k)) * math.sqrt(model.sigma_u2)
    z = y[:, None] + common[:, None] + private
    denom = model.sigma_u2 + k * model.sigma_c2
    precision = 1.0 + k / denom
    mean = (z.sum(axis=1) / denom) / precision
    # log p(y|z) - log p(y), averaged over the joint, equals the MI.
    log_ratio = 0.5 * math.log(precision) - 0.5 * precision * (y - mean) ** 2 + 0.5 * y**2
    estimate = float(np.mean(log_ratio))
    std_error = float(np.std(log_ratio, ddof=1) / math.sqrt(n_samples))
    return estimate, std_error


def effective_width(num_paths: int, rho: float) -> float:
    """Independent-equivalent path count under pairwise noise correlation."""
    if num_paths < 1:
        raise ValueError("num_paths must be at least 1")
    if not 0.0 <= rho <= 1.0:
        raise ValueError("rho must be in [0, 1]")
    return num_paths / (1.0 + (num_paths - 1) * rho)
