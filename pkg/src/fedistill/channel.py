"""Deterministic uplink/downlink budget model.

A round gives each direction a fixed byte budget. A payload that fits is
delivered after ``payload / rate`` seconds; anything larger is lost and
burns the whole round window.
"""

from __future__ import annotations

from dataclasses import dataclass

KIB = 1024


@dataclass(frozen=True)
class LinkBudget:
    uplink_bytes_per_round: int
    downlink_bytes_per_round: int
    uplink_rate: float
    downlink_rate: float

    def __post_init__(self):
        if min(self.uplink_bytes_per_round, self.downlink_bytes_per_round) <= 0:
            raise ValueError("per-round budgets must be positive")
        if min(self.uplink_rate, self.downlink_rate) <= 0:
            raise ValueError("link rates must be positive")

    def budget(self, direction: str) -> int:
        return self._pick(direction, self.uplink_bytes_per_round, self.downlink_bytes_per_round)

    def rate(self, direction: str) -> float:
        return self._pick(direction, self.uplink_rate, self.downlink_rate)

    @staticmethod
    def _pick(direction, up, down):
        if direction == "up":
            return up
        if direction == "down":
            return down
        raise ValueError(f"direction must be 'up' or 'down', got {direction!r}")


@dataclass(frozen=True)
class Transmission:
    delivered: bool
    latency_seconds: float


# one round lasts one second at the nominal rates
PRESETS = {
    "symmetric": LinkBudget(64 * KIB, 64 * KIB, 64 * KIB, 64 * KIB),
    "asymmetric": LinkBudget(1 * KIB, 64 * KIB, 1 * KIB, 64 * KIB),
}


def preset(name: str, **overrides) -> LinkBudget:
    try:
        base = PRESETS[name]
    except KeyError:
        raise ValueError(f"unknown channel preset {name!r}; choose from {sorted(PRESETS)}") from None
    if not overrides:
        return base
    fields = {**base.__dict__, **overrides}
    return LinkBudget(**fields)


def transmit(budget: LinkBudget, direction: str, payload_bytes: int) -> Transmission:
    if payload_bytes < 0:
        raise ValueError("payload size must be non-negative")
    cap = budget.budget(direction)
    rate = budget.rate(direction)
    if payload_bytes <= cap:
        return Transmission(True, payload_bytes / rate)
    return Transmission(False, cap / rate)
