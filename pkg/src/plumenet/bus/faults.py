"""Message-level fault injection for emulating harsh field links."""

from __future__ import annotations

from dataclasses import dataclass
from typing import TypeVar

import numpy as np

T = TypeVar("T")


@dataclass(frozen=True)
class FaultProfile:
    """Stochastic link behaviour: loss, duplication and latency.

    All draws come from a generator seeded by ``rng_seed``, so a link's
    behaviour is fully reproducible.  ``delay_ms`` bounds a uniform
    per-message latency draw.
    """

    drop_prob: float = 0.0
    delay_ms: tuple[float, float] = (0.0, 0.0)
    duplicate_prob: float = 0.0
    rng_seed: int = 0

    def __post_init__(self) -> None:
        if not 0.0 <= self.drop_prob <= 1.0:
            raise ValueError(f"drop_prob {self.drop_prob} outside [0, 1]")
        if not 0.0 <= self.duplicate_prob <= 1.0:
            raise ValueError(f"duplicate_prob {self.duplicate_prob} outside [0, 1]")
        lo, hi = self.delay_ms
        if lo < 0 or hi < lo:
            raise ValueError(f"delay_ms bounds ({lo}, {hi}) invalid")

    @property
    def is_clean(self) -> bool:
        return self.drop_prob == 0.0 and self.duplicate_prob == 0.0 and self.delay_ms == (0.0, 0.0)


PERFECT_LINK = FaultProfile()


class FaultInjector:
    """One direction of a faulted link; owns its RNG stream."""

    def __init__(self, profile: FaultProfile, rng: np.random.Generator):
        self.profile = profile
        self.rng = rng
        # TCP-like streams never reorder: later messages cannot overtake
        # earlier ones even when their latency draw is smaller.
        self._last_deliver_at = -np.inf

    def inject(self, now: float, item: T) -> list[tuple[float, T]]:
        """Schedule deliveries for one transmitted message.

        Returns ``[]`` when the message is dropped, one ``(deliver_at,
        item)`` normally, and two entries when the link duplicates.
        """
        p = self.profile
        if p.drop_prob > 0.0 and self.rng.random() < p.drop_prob:
            return []
        copies = 1
        if p.duplicate_prob > 0.0 and self.rng.random() < p.duplicate_prob:
            copies = 2
        out: list[tuple[float, T]] = []
        for _ in range(copies):
            lo, hi = p.delay_ms
            delay_s = self.rng.uniform(lo, hi) / 1000.0 if hi > 0.0 else 0.0
            deliver_at = max(now + delay_s, self._last_deliver_at)
            self._last_deliver_at = deliver_at
            out.append((deliver_at, item))
        return out


def make_link_injectors(profile: FaultProfile) -> tuple[FaultInjector, FaultInjector]:
    """Build the uplink/downlink injector pair for one client connection."""
    seq = np.random.SeedSequence(profile.rng_seed)
    up_seed, down_seed = seq.spawn(2)
    return (FaultInjector(profile, np.random.Generator(np.random.PCG64(up_seed))),
            FaultInjector(profile, np.random.Generator(np.random.PCG64(down_seed))))
