"""Capacity planning: required cores, container delta, and per-type quotas.

Capacity covers the predicted peak usage at the target utilization with a
safety margin; container counts are standard-quota units rounded up, and
per-type quotas scale the standard quota by each type's efficiency factor so
container utilization stays level across heterogeneous machines.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

from .normalize import RedTable

PLAN_COLUMNS = ("epoch_ts", "service_id", "Y_max", "R_prime_mcore", "n_prime", "delta_n")
QUOTA_COLUMNS = ("epoch_ts", "service_id", "machine_type", "quota_mcore")


@dataclass(frozen=True)
class ServicePolicy:
    u_star: float = 0.5            # target utilization upper limit, fraction
    psi: float = 0.08              # capacity safety margin
    r_std_mcore: float = 4000.0    # standard container quota
    h_p_hours: float = 1.0         # adjustment interval
    rho_star_ms: float | None = None   # tail latency limit; None derives from the latency model
    n_min: int = 1                 # container floor so a service never scales to zero
    max_step_fraction: float | None = None   # optional rate limit hook, off by default

    def __post_init__(self):
        if not 0 < self.u_star <= 1:
            raise ValueError("u_star must be in (0, 1]")
        if self.psi < 0:
            raise ValueError("psi must be non-negative")
        if self.r_std_mcore <= 0:
            raise ValueError("r_std_mcore must be positive")


@dataclass(frozen=True)
class CapacityPlan:
    service_id: str
    epoch_ts: int
    y_max: float
    r_prime: float
    n_prime: int
    delta_n: int
    quotas: dict[str, float] = field(default_factory=dict)


def estimate_capacity(y_max: float, policy: ServicePolicy) -> float:
    """Required capacity in mCore: peak usage at target utilization plus margin."""
    if y_max < 0:
        raise ValueError("y_max must be non-negative")
    return (y_max / policy.u_star) * (1.0 + policy.psi)


def plan_containers(r_prime: float, current_n: int,
                    policy: ServicePolicy) -> tuple[int, int]:
    """Standard-container count for the capacity and the signed adjustment."""
    if current_n < 0:
        raise ValueError("current_n must be non-negative")
    n_prime = int(math.ceil(r_prime / policy.r_std_mcore))
    n_prime = max(n_prime, policy.n_min)
    if policy.max_step_fraction is not None and current_n > 0:
        cap = max(1, int(math.ceil(policy.max_step_fraction * current_n)))
        n_prime = min(max(n_prime, current_n - cap), current_n + cap)
    return n_prime, n_prime - current_n


def quota_for_type(red_j: float, policy: ServicePolicy) -> float:
    """Per-type container quota: the standard quota scaled by the type's RED."""
    if red_j <= 0:
        raise ValueError("RED factor must be positive")
    return red_j * policy.r_std_mcore


def build_plan(service_id: str, epoch_ts: int, y_max: float, current_n: int,
               policy: ServicePolicy, red: RedTable) -> CapacityPlan:
    r_prime = estimate_capacity(y_max, policy)
    n_prime, delta_n = plan_containers(r_prime, current_n, policy)
    quotas = {mtype: quota_for_type(red.factor(mtype), policy)
              for mtype in sorted(red.entries)}
    return CapacityPlan(service_id=service_id, epoch_ts=epoch_ts, y_max=y_max,
                        r_prime=r_prime, n_prime=n_prime, delta_n=delta_n,
                        quotas=quotas)


def write_plans_csv(plans: list[CapacityPlan], path: str | Path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(PLAN_COLUMNS)
        for p in plans:
            writer.writerow([p.epoch_ts, p.service_id, repr(p.y_max),
                             repr(p.r_prime), p.n_prime, p.delta_n])


def write_quotas_csv(plans: list[CapacityPlan], path: str | Path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(QUOTA_COLUMNS)
        for p in plans:
            for mtype in sorted(p.quotas):
                writer.writerow([p.epoch_ts, p.service_id, mtype, repr(p.quotas[mtype])])
