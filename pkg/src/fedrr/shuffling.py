"""Permutations, cohort schedules, and the composed two-level index map.

The participation scheme is "regularized": every meta-epoch the M clients are
partitioned into R = M/C disjoint cohorts of size C, so each client trains
exactly once per meta-epoch.  Client and data permutations can each be drawn
once up front (shuffle-once), redrawn every meta-epoch (reshuffling), or, for
the client level, supplied as a fixed deterministic schedule.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .rng import stream


class ScheduleError(ValueError):
    """Invalid cohort geometry or deterministic schedule."""


class ClientMode(Enum):
    SHUFFLE_ONCE = "shuffle_once"
    RESHUFFLING = "reshuffling"
    DETERMINISTIC_FIXED = "deterministic_fixed"


class DataMode(Enum):
    SHUFFLE_ONCE = "shuffle_once"
    RESHUFFLING = "reshuffling"


@dataclass(frozen=True)
class ShuffleMode:
    client_mode: ClientMode = ClientMode.SHUFFLE_ONCE
    data_mode: DataMode = DataMode.SHUFFLE_ONCE
    # rounds-per-epoch lists of client ids, one list of cohorts per meta-epoch;
    # reused cyclically when shorter than the run
    fixed_schedule: tuple[tuple[tuple[int, ...], ...], ...] | None = None


@dataclass(frozen=True)
class CohortSchedule:
    """Disjoint cohorts for one meta-epoch: ``cohorts[r]`` holds C client ids."""

    R: int
    C: int
    cohorts: tuple[tuple[int, ...], ...]

    def round_cohort(self, r: int) -> tuple[int, ...]:
        return self.cohorts[r]


def fisher_yates(n: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform permutation of range(n) via the classic swap loop."""
    if n < 1:
        raise ValueError("n must be >= 1")
    perm = np.arange(n, dtype=np.int64)
    for i in range(n - 1, 0, -1):
        j = int(rng.integers(0, i + 1))
        perm[i], perm[j] = perm[j], perm[i]
    return perm


def double_shuffle_index(k: int, N: int, client_perm, local_perms) -> tuple[int, int]:
    """Map global step k in [0, M*N) to a (client id, data index) pair.

    Steps walk clients in ``client_perm`` order; within a client, data points
    follow that client's local permutation.  All indexing is 0-based.
    """
    M = len(client_perm)
    if not 0 <= k < M * N:
        raise IndexError(f"step {k} out of range for {M}x{N}")
    block, j = divmod(k, N)
    m = int(client_perm[block])
    return m, int(local_perms[m][j])


def build_cohort_schedule(
    M: int,
    C: int,
    mode: ShuffleMode,
    meta_epoch: int,
    seed: int,
) -> CohortSchedule:
    """Cohorts for one meta-epoch under the configured client mode.

    Shuffle-once replays the epoch-0 permutation; reshuffling redraws per
    epoch; a fixed schedule is validated and applied as given.
    """
    if M % C != 0:
        raise ScheduleError(f"cohort size {C} does not divide client count {M}")
    R = M // C
    if mode.client_mode is ClientMode.DETERMINISTIC_FIXED:
        if not mode.fixed_schedule:
            raise ScheduleError("deterministic client mode requires a fixed schedule")
        epoch_plan = mode.fixed_schedule[meta_epoch % len(mode.fixed_schedule)]
        flat = [m for cohort in epoch_plan for m in cohort]
        if len(epoch_plan) != R or any(len(c) != C for c in epoch_plan) or sorted(flat) != list(range(M)):
            raise ScheduleError("fixed schedule is not a partition of clients into R cohorts of C")
        cohorts = tuple(tuple(int(m) for m in cohort) for cohort in epoch_plan)
        return CohortSchedule(R=R, C=C, cohorts=cohorts)

    t = 0 if mode.client_mode is ClientMode.SHUFFLE_ONCE else meta_epoch
    perm = fisher_yates(M, stream(seed, "client_perm", t))
    cohorts = tuple(tuple(int(m) for m in perm[r * C : (r + 1) * C]) for r in range(R))
    return CohortSchedule(R=R, C=C, cohorts=cohorts)


def draw_data_permutations(M: int, N: int, mode: ShuffleMode, meta_epoch: int, seed: int) -> list[np.ndarray]:
    """Per-client data permutations with independent named streams.

    Stream ids are derived from (seed, "data_perm", epoch, client), so adding
    clients never perturbs existing clients' permutations.
    """
    t = 0 if mode.data_mode is DataMode.SHUFFLE_ONCE else meta_epoch
    return [fisher_yates(N, stream(seed, "data_perm", t, m)) for m in range(M)]


def load_fixed_schedule(path) -> tuple[tuple[tuple[int, ...], ...], ...]:
    """Read a deterministic client schedule from a JSON array-of-arrays file.

    Layout: ``[epoch][round] -> [client ids]``.
    """
    with open(path) as fh:
        raw = json.load(fh)
    return tuple(tuple(tuple(int(m) for m in cohort) for cohort in epoch) for epoch in raw)
