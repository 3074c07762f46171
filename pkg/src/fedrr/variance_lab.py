"""Without-replacement sample variances: closed forms and enumeration oracles.

The closed-form expressions below describe the variance of prefix averages
under the two-level shuffle (a random client order crossed with independent
per-client data orders), including the grouped variant where C parallel
groups each run their own two-level shuffle.  Every formula is checked
against exhaustive enumeration over all permutations, which is the ground
truth the tests trust.

Enumeration note: the grouped cross-covariance term carries coefficient
2*k_N*(k - k_N) / (k^2 * (M - 1)); a variant with an extra 1/C factor does
not match enumeration (the two coincide at C = 1).
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .problem import FederatedProblem
from .rng import stream
from .shuffling import fisher_yates

ENUMERATION_GUARD = 10_000_000


class EnumerationTooLarge(ValueError):
    pass


@dataclass
class VarianceInputs:
    """Fixed vectors zeta[m, j] with their population means and variances."""

    zeta: np.ndarray  # (M, N, d)

    def __post_init__(self):
        z = np.asarray(self.zeta, dtype=np.float64)
        if z.ndim == 2:
            z = z[:, :, None]
        self.zeta = z
        self.M, self.N, self.d = z.shape
        self.grand_mean = z.mean(axis=(0, 1))
        self.client_means = z.mean(axis=1)
        # compensated sums: these feed exact-identity tests
        self.sigma2 = math.fsum(
            float((z[m, j] - self.grand_mean) @ (z[m, j] - self.grand_mean))
            for m in range(self.M)
            for j in range(self.N)
        ) / (self.M * self.N)
        self.sigma_tilde2 = math.fsum(
            float((self.client_means[m] - self.grand_mean) @ (self.client_means[m] - self.grand_mean))
            for m in range(self.M)
        ) / self.M


def star_variances(problem: FederatedProblem, x_star: np.ndarray) -> tuple[float, float]:
    """Component-level and client-level gradient variance at the optimum.

    Returns (sigma_star^2, sigma_tilde_star^2) where the first averages
    squared component-gradient norms over all M*N components and the second
    averages squared client-gradient norms over the M clients.
    """
    comp = math.fsum(
        float(np.linalg.norm(problem.component_gradient(m, j, x_star)) ** 2)
        for m in range(problem.M)
        for j in range(problem.N)
    ) / (problem.M * problem.N)
    cli = math.fsum(
        float(np.linalg.norm(problem.client_gradient(m, x_star)) ** 2) for m in range(problem.M)
    ) / problem.M
    return comp, cli


def closed_form_variance(k: int, M: int, N: int, sigma2: float, sigma_tilde2: float) -> float:
    """Variance of the k-sample prefix average under the two-level shuffle."""
    if not 1 <= k <= M * N:
        raise ValueError(f"k={k} out of range [1, {M * N}]")
    if N == 1:
        if M == 1:
            return 0.0
        return sigma_tilde2 * (M - k) / (k * (M - 1))
    if M == 1:
        return sigma2 * (N - k) / (k * (N - 1))
    m_k, j_k = divmod(k, N)
    data_term = j_k * (N - j_k) / (k * k * (N - 1)) * sigma2
    coef = (
        (m_k * N * N + j_k * j_k) * (M * N - 1) / (k * k * (N - 1) * (M - 1))
        - N / (k * (N - 1))
        - 1.0 / (M - 1)
    )
    return data_term + coef * sigma_tilde2


def closed_form_minibatch_variance(
    k: int, M: int, N: int, C: int, sigma2: float, sigma_tilde2: float
) -> float:
    """Prefix-average variance for C parallel groups of M/C clients each.

    Position k in [1, N*M/C] contributes C samples per completed row (one per
    group) plus a partial tail from a single group.
    """
    if M % C != 0:
        raise ValueError(f"group count {C} does not divide client count {M}")
    R = M // C
    if not 1 <= k <= N * R:
        raise ValueError(f"k={k} out of range [1, {N * R}]")
    k_N = (k // N) * N
    out = 0.0
    if k_N > 0:
        out += (k_N / k) ** 2 * closed_form_variance(k_N * C, M, N, sigma2, sigma_tilde2)
    if k > k_N:
        out += ((k - k_N) / k) ** 2 * closed_form_variance(k - k_N, M, N, sigma2, sigma_tilde2)
    if M > 1:
        out -= 2.0 * k_N * (k - k_N) / (k * k * (M - 1)) * sigma_tilde2
    return out


def upper_bound_check(M: int, N: int, C: int, sigma2: float, sigma_tilde2: float) -> float:
    """Uniform-in-k bound on k^2 times the prefix variance."""
    return (M / (2.0 * C * C) + 2.0) * N * N * sigma_tilde2 + N / 2.0 * sigma2


@lru_cache(maxsize=64)
def _enumerate_sequences(M: int, N: int, C: int) -> np.ndarray:
    """All equally likely grouped shuffle outcomes as flat sample indices.

    Shape (n_outcomes, C, N*M/C); entry [o, p, i] is the flattened (client*N
    + data) index of the sample processed at position i by group p.  A
    uniform client permutation chunked into C blocks yields the uniform
    group assignment and uniform within-group orders simultaneously.
    """
    R = M // C
    n_client = math.factorial(M)
    n_data = math.factorial(N) ** M
    if n_client * n_data > ENUMERATION_GUARD:
        raise EnumerationTooLarge(f"{n_client * n_data} outcomes exceed the enumeration guard")
    data_perms = list(itertools.permutations(range(N)))
    out = np.empty((n_client * n_data, C, N * R), dtype=np.int64)
    o = 0
    for sigma in itertools.permutations(range(M)):
        for combo in itertools.product(range(len(data_perms)), repeat=M):
            for p in range(C):
                pos = 0
                for b in range(R):
                    m = sigma[p * R + b]
                    pi = data_perms[combo[m]]
                    for j in range(N):
                        out[o, p, pos] = m * N + pi[j]
                        pos += 1
            o += 1
    return out


def _prefix_estimators(inputs: VarianceInputs, C: int) -> np.ndarray:
    """Deviations of all prefix estimators: shape (n_outcomes, C, NR, d).

    Entry [o, g, k-1] is the k-sample estimator for tail group g under
    outcome o, minus the grand mean.
    """
    seq = _enumerate_sequences(inputs.M, inputs.N, C)
    n_out, _, NR = seq.shape
    flat = inputs.zeta.reshape(inputs.M * inputs.N, inputs.d)
    vals = flat[seq]  # (n_out, C, NR, d)
    cum = np.cumsum(vals, axis=2)
    row_mean_cum = cum.mean(axis=1, keepdims=True)  # (n_out, 1, NR, d)
    k = np.arange(1, NR + 1)
    k_N = (k // inputs.N) * inputs.N
    # numerator(k, g) = sum of complete rows averaged over groups + tail of group g
    complete = np.where(k_N[None, None, :, None] > 0, np.take(row_mean_cum, np.maximum(k_N - 1, 0), axis=2), 0.0)
    tail = cum - np.where(k_N[None, None, :, None] > 0, np.take(cum, np.maximum(k_N - 1, 0), axis=2), 0.0)
    est = (complete + tail) / k[None, None, :, None]
    return est - inputs.grand_mean


def brute_force_all(inputs: VarianceInputs, C: int = 1) -> np.ndarray:
    """Exact prefix-average variances for every k in one enumeration pass."""
    if inputs.M % C != 0:
        raise ValueError(f"group count {C} does not divide client count {inputs.M}")
    dev = _prefix_estimators(inputs, C)
    return np.mean(np.sum(dev * dev, axis=-1), axis=(0, 1))


def brute_force_variance(inputs: VarianceInputs, k: int, C: int = 1) -> float:
    """Exact prefix-average variance by enumerating every shuffle outcome."""
    R = inputs.M // C
    if inputs.M % C != 0:
        raise ValueError(f"group count {C} does not divide client count {inputs.M}")
    if not 1 <= k <= inputs.N * R:
        raise ValueError(f"k={k} out of range [1, {inputs.N * R}]")
    return float(brute_force_all(inputs, C)[k - 1])


def brute_force_expectation(inputs: VarianceInputs, k: int, C: int = 1) -> np.ndarray:
    """Mean of the k-sample prefix estimator over all outcomes (should equal the grand mean)."""
    dev = _prefix_estimators(inputs, C)[:, :, k - 1, :]
    return dev.mean(axis=(0, 1)) + inputs.grand_mean


@dataclass
class VarianceReport:
    M: int
    N: int
    C: int
    sigma2: float
    sigma_tilde2: float
    closed_form: list[float]
    brute_force: list[float]
    max_rel_error: float

    def to_json(self) -> str:
        return json.dumps(self.__dict__, indent=2)


def build_report(inputs: VarianceInputs, C: int = 1) -> VarianceReport:
    """Closed form vs enumeration for every admissible prefix length."""
    R = inputs.M // C
    ks = range(1, inputs.N * R + 1)
    closed = [
        closed_form_minibatch_variance(k, inputs.M, inputs.N, C, inputs.sigma2, inputs.sigma_tilde2)
        for k in ks
    ]
    brute = [float(v) for v in brute_force_all(inputs, C)]
    rel = max(
        abs(c - b) / max(abs(b), 1e-30) if abs(b) > 1e-12 else abs(c - b)
        for c, b in zip(closed, brute)
    )
    return VarianceReport(
        M=inputs.M,
        N=inputs.N,
        C=C,
        sigma2=inputs.sigma2,
        sigma_tilde2=inputs.sigma_tilde2,
        closed_form=closed,
        brute_force=brute,
        max_rel_error=rel,
    )


@dataclass
class StarSequenceStats:
    """Monte-Carlo deviation statistics of the optimum-anchored sequence."""

    mean_sq_dev: np.ndarray  # (R, N) mean ||x - x*||^2 after local step j+1 in round r
    max_mean_sq_dev: float
    max_sigma_ds: float  # max over slots of mean Bregman divergence / gamma^2


def star_sequence_deviation(
    problem: FederatedProblem,
    x_star: np.ndarray,
    gamma: float,
    C: int,
    n_draws: int = 200,
    seed: int = 0,
) -> StarSequenceStats:
    """Simulate the fictitious sequence started at the optimum.

    Local steps use gradients frozen at x*; rounds end with a cohort average.
    Cohorts and permutations are redrawn per draw; returned statistics are
    per-(round, local step) means over draws.
    """
    M, N = problem.M, problem.N
    if M % C != 0:
        raise ValueError("C must divide M")
    R = M // C
    star_grads = np.array(
        [[problem.component_gradient(m, j, x_star) for j in range(N)] for m in range(M)]
    )
    sq = np.zeros((R, N))
    breg = np.zeros((R, N))
    for draw in range(n_draws):
        rng = stream(seed, "star_sequence", draw)
        client_perm = fisher_yates(M, rng)
        perms = [fisher_yates(N, rng) for _ in range(M)]
        x_round = x_star.copy()
        for r in range(R):
            cohort = client_perm[r * C : (r + 1) * C]
            endpoints = []
            for m in cohort:
                x = x_round.copy()
                for j in range(N):
                    comp = int(perms[m][j])
                    x = x - gamma * star_grads[m, comp]
                    delta = x - x_star
                    sq[r, j] += float(delta @ delta)
                    breg[r, j] += _bregman(problem, int(m), comp, x, x_star)
                endpoints.append(x)
            x_round = np.mean(endpoints, axis=0)
    sq /= n_draws * C
    breg /= n_draws * C
    max_sigma_ds = float(breg.max() / (gamma * gamma)) if gamma > 0 else 0.0
    return StarSequenceStats(
        mean_sq_dev=sq,
        max_mean_sq_dev=float(sq.max()),
        max_sigma_ds=max_sigma_ds,
    )


def _bregman(problem, m, j, x, y):
    gy = problem.component_gradient(m, j, y)
    return float(problem.component_loss(m, j, x) - problem.component_loss(m, j, y) - gy @ (x - y))
