"""Sequential vs pre-assign odds of keeping the almighty entity for the last task.

Closed forms plus Monte Carlo estimates on explicit best-set instances.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

MIN_TRIALS = 10_000


class BoundDomainError(ValueError):
    pass


class Strategy(enum.Enum):
    SEQUENTIAL = "sequential"
    PREASSIGN = "preassign"


def sequential_bound(n: int, N: int) -> float:
    """Upper bound ((n-1)/(n+N-2))^(N-1) on sequential selection keeping w_o for T_N."""
    if n < 2 or N < 2:
        raise BoundDomainError(f"need n >= 2 and N >= 2, got n={n}, N={N}")
    return ((n - 1) / (n + N - 2)) ** (N - 1)


def preassign_probability(N: int) -> float:
    if N < 1:
        raise BoundDomainError(f"need N >= 1, got {N}")
    return 1.0 / N


@dataclass
class BoundInstance:
    """Best-set structure of a Retain-the-Almighty instance.

    Entity 0 is the almighty w_o. ``exclusive_sizes[i]`` counts the entities
    that only task i+1 can use (i = 0..N-2); the last task's best set is {w_o}.
    ``overlap[i]`` lists the ids in b_i outside its exclusive part and must
    contain 0.
    """

    N: int
    n: int
    exclusive_sizes: list[int]
    overlap: list[list[int]] = field(default_factory=list)

    def __post_init__(self) -> None:
        if not self.overlap:
            self.overlap = [[0] for _ in range(self.N - 1)]

    def validate(self) -> None:
        if self.N < 2 or self.n < 2:
            raise BoundDomainError("need N >= 2 and n >= 2")
        if len(self.exclusive_sizes) != self.N - 1 or len(self.overlap) != self.N - 1:
            raise BoundDomainError("one exclusive size and one overlap set per task before the last")
        if any(s < 0 for s in self.exclusive_sizes):
            raise BoundDomainError("exclusive sizes must be non-negative")
        if sum(self.exclusive_sizes) > self.n - 1:
            raise BoundDomainError("exclusive parts must fit in the n-1 entities other than w_o")
        shared_lo = 1 + sum(self.exclusive_sizes)
        for ov in self.overlap:
            if 0 not in ov:
                raise BoundDomainError("every overlap set must contain w_o")
            if any(e != 0 and not (shared_lo <= e < self.n) for e in ov):
                raise BoundDomainError("overlap members other than w_o must be non-exclusive entities")

    def best_sets(self) -> list[list[int]]:
        sets, nxt = [], 1
        for size, ov in zip(self.exclusive_sizes, self.overlap):
            sets.append(list(range(nxt, nxt + size)) + sorted(set(ov)))
            nxt += size
        return sets


def random_instance(rng: np.random.Generator, n: int, N: int) -> BoundInstance:
    """Random split of the non-almighty entities into exclusive parts; overlaps are {w_o}."""
    total = int(rng.integers(N - 1, n))  # between N-1 and n-1 exclusives
    cuts = np.sort(rng.choice(np.arange(1, total), size=N - 2, replace=False)) if N > 2 else np.array([], int)
    sizes = np.diff(np.concatenate([[0], cuts, [total]])).astype(int).tolist()
    return BoundInstance(N=N, n=n, exclusive_sizes=sizes)


@dataclass
class MonteCarloResult:
    probability: float
    stderr: float
    trials: int


def monte_carlo_selection(instance: BoundInstance, strategy: Strategy, trials: int,
                          rng: np.random.Generator) -> MonteCarloResult:
    """Empirical P(w_o ends up with the last task)."""
    if trials < MIN_TRIALS:
        raise BoundDomainError(f"need at least {MIN_TRIALS} trials, got {trials}")
    instance.validate()
    if strategy is Strategy.PREASSIGN:
        hits = rng.integers(0, instance.N, size=trials) == instance.N - 1
    else:
        taken = np.zeros((trials, instance.n), dtype=bool)
        for members in instance.best_sets():
            members = np.asarray(members)
            avail = ~taken[:, members]
            keys = np.where(avail, rng.random(avail.shape), -1.0)
            pick = np.argmax(keys, axis=1)
            has_any = avail.any(axis=1)
            rows = np.nonzero(has_any)[0]
            taken[rows, members[pick[rows]]] = True
        hits = ~taken[:, 0]
    p = float(np.mean(hits))
    return MonteCarloResult(p, math.sqrt(max(p * (1 - p), 1e-300) / trials), trials)


def verify_bounds(n: int, N: int, trials: int, seed: int = 0) -> dict:
    """Closed forms and Monte Carlo estimates on the tightest instance of size (n, N)."""
    if trials < MIN_TRIALS:
        raise BoundDomainError(f"need at least {MIN_TRIALS} trials, got {trials}")
    rng = np.random.default_rng(seed)
    closed = sequential_bound(n, N)
    pre = preassign_probability(N)
    # the bound is tightest when exclusive parts split n-1 as evenly as possible
    base, extra = divmod(n - 1, N - 1)
    sizes = [base + (1 if i < extra else 0) for i in range(N - 1)]
    inst = BoundInstance(N=N, n=n, exclusive_sizes=sizes)
    seq = monte_carlo_selection(inst, Strategy.SEQUENTIAL, trials, rng)
    pa = monte_carlo_selection(inst, Strategy.PREASSIGN, trials, rng)
    seq_ok = seq.probability <= closed + 3 * seq.stderr
    pa_ok = abs(pa.probability - pre) <= 3 * math.sqrt(pre * (1 - pre) / trials)
    return {
        "n": n,
        "N": N,
        "closed_form": closed,
        "preassign": pre,
        "empirical": seq.probability,
        "stderr": seq.stderr,
        "empirical_preassign": pa.probability,
        "stderr_preassign": pa.stderr,
        "trials": trials,
        "preassign_exceeds_bound": pre > closed,
        "pass": bool(seq_ok and pa_ok),
    }
