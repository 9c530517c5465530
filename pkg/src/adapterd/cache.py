"""Tiered adapter weight cache with asynchronous promotion and LRU eviction.

Adapters live on one of four tiers (remote, disk, cpu, gpu) or are in transit
toward the GPU. A touch on a non-resident adapter starts a background load
whose completion time is the sum of the remaining per-hop latencies; the
serving loop is never blocked. Eviction is LRU per tier with a demotion
cascade (gpu to cpu to disk; disk and remote are unbounded), applied when a
load completes. In-transit entries are never eviction victims, only ``touch``
updates recency, and repeated touches during transit are idempotent.

The cache has a single logical owner (the engine loop); operations mutate in
place and are not thread-safe on their own.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

from .core import BASE_ADAPTER, EngineConfig, VirtualTime

_TIERS = ("gpu", "cpu", "disk", "remote")


class UnknownAdapterError(KeyError):
    pass


class ClockRegressionError(ValueError):
    pass


@dataclass(frozen=True)
class CacheOutcome:
    """Result of a touch: resident now, or pending until ``ready_at``."""

    ready_at: VirtualTime | None = None

    @property
    def resident(self) -> bool:
        return self.ready_at is None


_RESIDENT = CacheOutcome()


@dataclass(frozen=True)
class AdapterEntry:
    """Snapshot of one adapter's residency state."""

    tier: str
    last_used: VirtualTime
    ready_at: VirtualTime | None


class AdapterCache:
    def __init__(
        self,
        config: EngineConfig,
        adapters: Iterable[str],
        *,
        prewarm: bool = False,
    ):
        self._config = config
        self._tier: dict[str, str] = {}
        self._last_used: dict[str, float] = {}
        self._ready_at: dict[str, float] = {}
        self._clock = float("-inf")
        for index, name in enumerate(sorted(adapters)):
            if name in self._tier:
                raise ValueError(f"duplicate adapter id {name!r}")
            if prewarm and index < config.gpu_slots:
                self._tier[name] = "gpu"
            else:
                self._tier[name] = "remote"
            self._last_used[name] = -1.0

    def _remaining_hops_ms(self, tier: str) -> float:
        cfg = self._config
        if tier == "remote":
            return cfg.t_download_ms + cfg.t_disk_to_cpu_ms + cfg.t_cpu_to_gpu_ms
        if tier == "disk":
            return cfg.t_disk_to_cpu_ms + cfg.t_cpu_to_gpu_ms
        return cfg.t_cpu_to_gpu_ms

    def touch(self, adapter: str, now: VirtualTime) -> CacheOutcome:
        """Record use of ``adapter`` and begin/continue promotion toward the GPU."""
        if adapter == BASE_ADAPTER:
            return _RESIDENT
        tier = self._tier.get(adapter)
        if tier is None:
            raise UnknownAdapterError(adapter)
        self._last_used[adapter] = now
        if tier == "gpu":
            return _RESIDENT
        if tier == "in_transit":
            return CacheOutcome(self._ready_at[adapter])
        ready_at = now + self._remaining_hops_ms(tier)
        self._tier[adapter] = "in_transit"
        self._ready_at[adapter] = ready_at
        return CacheOutcome(ready_at)

    def _count(self, tier: str) -> int:
        return sum(1 for t in self._tier.values() if t == tier)

    def _lru_victim(self, tier: str) -> str:
        return min(
            (a for a, t in self._tier.items() if t == tier),
            key=lambda a: (self._last_used[a], a),
        )

    def _place_on_gpu(self, adapter: str) -> None:
        if self._count("gpu") >= self._config.gpu_slots:
            victim = self._lru_victim("gpu")
            if self._config.cpu_slots == 0:
                self._tier[victim] = "disk"
            else:
                if self._count("cpu") >= self._config.cpu_slots:
                    self._tier[self._lru_victim("cpu")] = "disk"
                self._tier[victim] = "cpu"
        self._tier[adapter] = "gpu"
        self._ready_at.pop(adapter, None)

    def on_clock(self, now: VirtualTime) -> None:
        """Complete every in-transit load whose ready_at <= now (inclusive)."""
        if now < self._clock:
            raise ClockRegressionError(f"on_clock moved backwards: {now} < {self._clock}")
        self._clock = now
        due = sorted(
            (a for a, t in self._tier.items() if t == "in_transit" and self._ready_at[a] <= now),
            key=lambda a: (self._ready_at[a], a),
        )
        for adapter in due:
            self._place_on_gpu(adapter)

    def residency_stats(self) -> dict[str, int]:
        stats = {tier: 0 for tier in _TIERS}
        stats["in_transit"] = 0
        for tier in self._tier.values():
            stats[tier] += 1
        return stats

    def next_ready_at(self) -> VirtualTime | None:
        if not self._ready_at:
            return None
        return min(self._ready_at.values())

    def snapshot(self) -> dict[str, AdapterEntry]:
        return {
            a: AdapterEntry(self._tier[a], self._last_used[a], self._ready_at.get(a))
            for a in self._tier
        }
