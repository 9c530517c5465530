"""Synthetic closed-loop workload generation.

Each simulated user is a closed loop with zero think time: submit a request,
wait for its last token, submit the next one at that same instant, and stop
submitting once the run deadline has passed.  Users carry independent
deterministic random streams derived from the run seed and their global user
index, so replica layouts and user counts never perturb each other's draws.

Payload sampling draws, in a fixed order: the task profile (when profiles are
configured), the input length, the output length, and finally the adapter.
Pinned-adapter sampling skips only the adapter draw, leaving the token-length
stream untouched.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

from .core import (
    BASE_ADAPTER,
    Rng,
    WorkloadConfig,
    adapter_name,
    rng_next_uniform,
    rng_split,
)

__all__ = [
    "Payload",
    "Stop",
    "Submit",
    "UserState",
    "Wait",
    "initial_user_state",
    "pinned_adapter",
    "sample_payload",
    "user_tick",
]


@dataclass(frozen=True)
class Payload:
    """One sampled request shape."""

    adapter: str
    input_tokens: int
    output_tokens: int


@dataclass(frozen=True)
class UserState:
    """Closed-loop user automaton state."""

    user_id: int
    rng: Rng
    phase: str = "idle"  # "idle" | "waiting" | "stopped"

    def completed(self) -> "UserState":
        """Return the state after the user's in-flight request finished."""
        return replace(self, phase="idle")


@dataclass(frozen=True)
class Submit:
    payload: Payload


@dataclass(frozen=True)
class Wait:
    pass


@dataclass(frozen=True)
class Stop:
    pass


def initial_user_state(user_id: int, workload: WorkloadConfig) -> UserState:
    """Seed a user's private random stream from the run seed and user index."""
    return UserState(user_id=user_id, rng=rng_split(Rng(workload.seed), user_id))


def sample_payload(
    rng: Rng, workload: WorkloadConfig, fixed_adapter: str | None = None
) -> tuple[Payload, Rng]:
    """Draw one request shape, returning the payload and the advanced stream."""
    input_lo, input_hi = workload.input_tokens_min, workload.input_tokens_max
    output_lo, output_hi = workload.output_tokens_min, workload.output_tokens_max
    if workload.task_profiles:
        index, rng = rng_next_uniform(rng, 0, len(workload.task_profiles) - 1)
        profile = workload.task_profiles[index]
        input_lo, input_hi = profile.input_min, profile.input_p95
        output_lo, output_hi = profile.output_min, profile.output_p95
    input_tokens, rng = rng_next_uniform(rng, input_lo, input_hi)
    output_tokens, rng = rng_next_uniform(rng, output_lo, output_hi)
    if fixed_adapter is not None:
        adapter = fixed_adapter
    elif workload.n_adapters == 0:
        adapter = BASE_ADAPTER
    else:
        adapter_index, rng = rng_next_uniform(rng, 0, workload.n_adapters - 1)
        adapter = adapter_name(adapter_index)
    return Payload(adapter=adapter, input_tokens=input_tokens, output_tokens=output_tokens), rng


def pinned_adapter(workload: WorkloadConfig, user_id: int) -> str | None:
    """Adapter a user is pinned to under per-user assignment, else None."""
    if workload.adapter_assignment == "per_user" and workload.n_adapters > 0:
        return adapter_name(user_id % workload.n_adapters)
    return None


def user_tick(
    state: UserState, now: float, deadline: float, workload: WorkloadConfig
) -> tuple[Submit | Wait | Stop, UserState]:
    """Advance one user's automaton at the given instant."""
    if state.phase == "waiting":
        return Wait(), state
    if state.phase == "stopped" or now >= deadline:
        return Stop(), replace(state, phase="stopped")
    fixed = pinned_adapter(workload, state.user_id)
    payload, rng = sample_payload(state.rng, workload, fixed_adapter=fixed)
    return Submit(payload), replace(state, rng=rng, phase="waiting")
