"""Inconsistency score of two environments' Hessians and a descent comparison on quadratic toys."""
from dataclasses import dataclass
from typing import Sequence, Tuple, Union
import logging

import numpy as np

from aggregation import arith_mean, weighted_geo_mean

# Get logger for this module
logger = logging.getLogger(__name__)

SYMMETRY_TOL = 1e-9
MAX_DIM = 16
DIVERGENCE_NORM = 1e6


class AnalysisError(ValueError):
    """Raised on invalid Hessians or diverging descent"""
    pass


def sym_eigenvalues(h: np.ndarray) -> np.ndarray:
    """Ascending eigenvalues of a small symmetric matrix"""
    h = np.asarray(h, dtype=np.float64)
    if h.ndim != 2 or h.shape[0] != h.shape[1]:
        raise AnalysisError(f"expected a square matrix, got shape {h.shape}")
    if h.shape[0] > MAX_DIM:
        raise AnalysisError(f"matrix is {h.shape[0]}x{h.shape[0]}, limit is {MAX_DIM}")
    asymmetry = np.max(np.abs(h - h.T)) if h.size else 0.0
    if asymmetry > SYMMETRY_TOL:
        raise AnalysisError(f"matrix is not symmetric (max |H - H^T| = {asymmetry:.3g})")
    return np.linalg.eigvalsh(h)


@dataclass(frozen=True, eq=False)
class QuadEnv:
    """0.5 (θ - θ*)^T H (θ - θ*) + offset"""
    h: np.ndarray
    theta_star: np.ndarray
    offset: float = 0.0

    def __post_init__(self):
        if self.h.shape != (self.theta_star.shape[0],) * 2:
            raise AnalysisError(f"Hessian {self.h.shape} does not match optimum of length {self.theta_star.shape[0]}")
        if np.max(np.abs(self.h - self.h.T)) > 1e-12:
            raise AnalysisError("Hessian must be symmetric")

    @classmethod
    def diagonal(cls, curvature: Sequence[float], theta_star: Sequence[float], offset: float = 0.0) -> "QuadEnv":
        return cls(np.diag(np.asarray(curvature, dtype=np.float64)), np.asarray(theta_star, dtype=np.float64), offset)

    def loss(self, theta: np.ndarray) -> float:
        gap = theta - self.theta_star
        return float(0.5 * gap @ self.h @ gap + self.offset)

    def grad(self, theta: np.ndarray) -> np.ndarray:
        return self.h @ (theta - self.theta_star)


@dataclass(frozen=True, eq=False)
class Landscape:
    """Piecewise-quadratic loss: the basin with the lowest value is active at each point"""
    basins: Tuple[QuadEnv, ...]

    def active(self, theta: np.ndarray) -> QuadEnv:
        values = [basin.loss(theta) for basin in self.basins]
        return self.basins[int(np.argmin(values))]

    def grad(self, theta: np.ndarray) -> np.ndarray:
        return self.active(theta).grad(theta)


EnvLike = Union[QuadEnv, Landscape]


def _as_landscape(env: EnvLike) -> Landscape:
    return env if isinstance(env, Landscape) else Landscape((env,))


def inconsistency_score(a: QuadEnv, b: QuadEnv, eps: float) -> float:
    """eps * worst ratio between paired (ascending) eigenvalues of the two Hessians"""
    if eps <= 0:
        raise AnalysisError(f"eps must be positive, got {eps}")
    lam_a = sym_eigenvalues(a.h)
    lam_b = sym_eigenvalues(b.h)
    if lam_a.shape != lam_b.shape:
        raise AnalysisError("environments have different dimensions")
    if lam_a[0] <= 0 or lam_b[0] <= 0:
        raise AnalysisError("Hessians must be positive definite")
    ratios = np.maximum(lam_b / lam_a, lam_a / lam_b)
    return float(eps * np.max(ratios))


def compare_minimizer_consistency(envs: Sequence[EnvLike], steps: int, lr: float, start: np.ndarray,
                                  eps: float = 1.0) -> Tuple[float, float]:
    """Descend with arithmetic and with weighted geometric aggregation, score each end point"""
    if len(envs) != 2:
        raise AnalysisError(f"expected 2 environments, got {len(envs)}")
    landscapes = [_as_landscape(env) for env in envs]

    scores = []
    for combine in (arith_mean, weighted_geo_mean):
        theta = np.asarray(start, dtype=np.float64).copy()
        for step in range(steps):
            theta = theta - lr * combine([landscape.grad(theta) for landscape in landscapes])
            if np.linalg.norm(theta) > DIVERGENCE_NORM:
                raise AnalysisError(f"{combine.__name__} descent diverged at step {step + 1}")
        basin_a, basin_b = (landscape.active(theta) for landscape in landscapes)
        scores.append(inconsistency_score(basin_a, basin_b, eps))
        logger.debug(f"{combine.__name__}: end point {theta}, score {scores[-1]:.4g}")
    return scores[0], scores[1]


def mismatched_curvature_toy(seed: int, jitter: float = 0.2) -> Tuple[Landscape, Landscape, np.ndarray]:
    """Two 2-D environments sharing a flat minimum at the origin; only the first has a sharp well on the way.

    The shared basins are flat in complementary directions, so the two
    gradients agree in sign but differ in size and the geometric mean moves
    slowly. The sharp well sits on the straight path from the start to the
    origin.
    """
    rng = np.random.default_rng(seed)
    shared_a = QuadEnv.diagonal([1.0, 0.01], [0.0, 0.0])
    sharp_a = QuadEnv.diagonal([25.0, 25.0], [2.0, 2.0], offset=-1.0)
    shared_b = QuadEnv.diagonal([0.01, 1.0], [0.0, 0.0])
    start = np.array([4.0, 4.0]) + rng.uniform(-jitter, jitter, size=2)
    return Landscape((shared_a, sharp_a)), Landscape((shared_b,)), start
