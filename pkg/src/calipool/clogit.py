"""Conditional logistic regression for matched sets with one case each.

With exactly one case per stratum the conditional likelihood for a stratum
with control-minus-case difference rows d_1..d_m is

    1 / (1 + sum_i exp(beta' d_i)),

so the log likelihood, score, and observed information have closed forms in
terms of a per-stratum softmax over the m control rows plus the implicit
zero row for the case.  Everything here is evaluated with log-sum-exp
stabilization: calibrated exposures arrive on raw assay scales and can
produce large linear predictors.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import SingularDesignError

# Separation heuristics: a fit is flagged (not failed) when the scaled
# coefficients or the conditioning of the information explode.
SEPARATION_BETA_SCALE = 50.0
SEPARATION_COND = 1e12
PERFECT_FIT_TOL = 1e-6


@dataclass(frozen=True)
class ClogitProblem:
    """Stacked difference rows with per-stratum boundaries.

    ``rows`` holds all strata's control rows contiguously; ``offsets`` has
    length n_strata + 1 with stratum s occupying rows[offsets[s]:offsets[s+1]].
    """

    rows: np.ndarray
    offsets: np.ndarray

    def __post_init__(self):
        rows = np.ascontiguousarray(np.atleast_2d(np.asarray(self.rows, dtype=float)))
        offsets = np.asarray(self.offsets, dtype=np.intp)
        if rows.ndim != 2:
            raise ValueError("rows must be a 2-d array")
        if offsets.ndim != 1 or len(offsets) < 2 or offsets[0] != 0 or offsets[-1] != len(rows):
            raise ValueError("offsets must start at 0 and end at len(rows)")
        if np.any(np.diff(offsets) < 1):
            raise ValueError("every stratum must contribute at least one row")
        object.__setattr__(self, "rows", rows)
        object.__setattr__(self, "offsets", offsets)
        object.__setattr__(
            self, "_stratum_index",
            np.repeat(np.arange(len(offsets) - 1), np.diff(offsets)),
        )

    @classmethod
    def from_blocks(cls, blocks: Sequence[np.ndarray]) -> "ClogitProblem":
        """Build from one difference-row array per stratum."""
        arrs = [np.atleast_2d(np.asarray(b, dtype=float)) for b in blocks]
        if not arrs:
            raise ValueError("no strata")
        offsets = np.zeros(len(arrs) + 1, dtype=np.intp)
        np.cumsum([len(a) for a in arrs], out=offsets[1:])
        return cls(rows=np.vstack(arrs), offsets=offsets)

    @property
    def n_strata(self) -> int:
        return len(self.offsets) - 1

    @property
    def p(self) -> int:
        return self.rows.shape[1]

    @property
    def stratum_index(self) -> np.ndarray:
        """Stratum id of each row."""
        return self._stratum_index


@dataclass(frozen=True)
class ClogitFit:
    beta: np.ndarray
    info: np.ndarray
    loglik: float
    iterations: int
    converged: bool
    separation: bool = False
    message: str = ""


def _check_beta(problem: ClogitProblem, beta) -> np.ndarray:
    beta = np.asarray(beta, dtype=float).ravel()
    if beta.shape[0] != problem.p:
        raise ValueError(f"beta has dimension {beta.shape[0]}, problem has p={problem.p}")
    if not np.all(np.isfinite(beta)):
        raise ValueError("beta contains non-finite values")
    return beta


def _log_denominators(problem: ClogitProblem, beta: np.ndarray):
    """Per-stratum log(1 + sum_i exp(u_i)) and per-row softmax probabilities."""
    u = problem.rows @ beta
    starts = problem.offsets[:-1]
    seg = problem.stratum_index
    # The case contributes an implicit exponent of zero; fold it into the max.
    m = np.maximum(np.maximum.reduceat(u, starts), 0.0)
    ex = np.exp(u - m[seg])
    log_denom = m + np.log(np.exp(-m) + np.add.reduceat(ex, starts))
    probs = np.exp(u - log_denom[seg])
    return log_denom, probs


def control_probabilities(problem: ClogitProblem, beta) -> np.ndarray:
    """Conditional probability that each control row would be the case."""
    beta = _check_beta(problem, beta)
    return _log_denominators(problem, beta)[1]


def loglik(problem: ClogitProblem, beta) -> float:
    """Conditional log likelihood at ``beta``."""
    beta = _check_beta(problem, beta)
    log_denom, _ = _log_denominators(problem, beta)
    return float(-log_denom.sum())


def score(problem: ClogitProblem, beta) -> np.ndarray:
    """Gradient of the conditional log likelihood."""
    beta = _check_beta(problem, beta)
    _, probs = _log_denominators(problem, beta)
    return -(problem.rows.T @ probs)


def _information_from_probs(problem: ClogitProblem, probs: np.ndarray) -> np.ndarray:
    weighted = problem.rows * probs[:, None]
    first = problem.rows.T @ weighted
    t = np.add.reduceat(weighted, problem.offsets[:-1], axis=0)
    info = first - t.T @ t
    return 0.5 * (info + info.T)


def information(problem: ClogitProblem, beta) -> np.ndarray:
    """Observed information (negative Hessian), returned symmetric."""
    beta = _check_beta(problem, beta)
    _, probs = _log_denominators(problem, beta)
    return _information_from_probs(problem, probs)


def stratum_scores(problem: ClogitProblem, beta) -> np.ndarray:
    """Per-stratum score contributions, one row per stratum (sums to score)."""
    beta = _check_beta(problem, beta)
    _, probs = _log_denominators(problem, beta)
    weighted = problem.rows * probs[:, None]
    return -np.add.reduceat(weighted, problem.offsets[:-1], axis=0)


def fit(
    problem: ClogitProblem,
    init: np.ndarray | None = None,
    grad_tol: float = 1e-8,
    max_iter: int = 50,
    step_halving_max: int = 20,
) -> ClogitFit:
    """Newton-Raphson with step halving on likelihood decrease.

    Returns a non-converged fit (rather than raising) when the iteration
    budget runs out, which is how separated data surfaces; a genuinely
    singular information matrix raises :class:`SingularDesignError`.
    """
    beta = np.zeros(problem.p) if init is None else _check_beta(problem, init)
    log_denom, probs = _log_denominators(problem, beta)
    ll = float(-log_denom.sum())
    converged = False
    message = ""
    iterations = 0

    for iterations in range(1, max_iter + 1):
        g = -(problem.rows.T @ probs)
        if np.max(np.abs(g)) < grad_tol:
            converged = True
            iterations -= 1
            break
        info = _information_from_probs(problem, probs)
        try:
            step = np.linalg.solve(info, g)
        except np.linalg.LinAlgError:
            raise SingularDesignError(
                "singular information matrix: no usable exposure contrast "
                "or collinear columns"
            ) from None
        if not np.all(np.isfinite(step)):
            raise SingularDesignError("information matrix is numerically singular")

        # slack tolerates likelihood changes below float resolution near the
        # optimum, where the true Newton gain is smaller than rounding noise
        slack = 1e-10 * (1.0 + abs(ll))
        scale = 1.0
        for _ in range(step_halving_max + 1):
            candidate = beta + scale * step
            if not np.all(np.isfinite(candidate)):
                scale *= 0.5
                continue
            cand_denom, cand_probs = _log_denominators(problem, candidate)
            ll_candidate = float(-cand_denom.sum())
            if ll_candidate >= ll - slack:
                break
            scale *= 0.5
        else:
            message = "step halving failed to improve the log likelihood"
            break
        beta, ll, probs = candidate, ll_candidate, cand_probs
    else:
        message = f"gradient tolerance not reached in {max_iter} iterations"

    info = _information_from_probs(problem, probs)

    separation = False
    col_scale = np.sqrt(np.mean(problem.rows**2, axis=0))
    col_scale[col_scale == 0.0] = 1.0
    if np.max(np.abs(beta * col_scale)) > SEPARATION_BETA_SCALE:
        separation = True
        message = "coefficients diverged; data may be separated"
    elif ll > -PERFECT_FIT_TOL:
        # The conditional likelihood's supremum is 0; approaching it means the
        # cases are perfectly predicted and the maximizer lies at infinity.
        separation = True
        message = "likelihood approached its supremum; data are separated"
    else:
        eigs = np.linalg.eigvalsh(info)
        if eigs[-1] > 0 and eigs[0] <= eigs[-1] / SEPARATION_COND:
            separation = True
            message = message or "information matrix is near-singular at the optimum"
    if separation:
        converged = False
    elif converged:
        try:
            np.linalg.cholesky(info)
        except np.linalg.LinAlgError:
            raise SingularDesignError(
                "singular information matrix at the optimum: no usable exposure "
                "contrast or collinear columns"
            ) from None

    return ClogitFit(beta=beta, info=info, loglik=ll, iterations=iterations,
                     converged=converged, separation=separation, message=message)
