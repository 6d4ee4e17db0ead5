"""Corrective takeovers: a scripted expert plus a live-human override.

The scripted path stands in for a human operator: it watches for stalls
(no progress over a window) and workspace-boundary collisions, takes over
with a proportional controller for a bounded number of steps, and hands
control back once progress has resumed, the episode ends, or its ticks run
out. A live human command always preempts the script.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .sim import EnvState, TaskSpec

SOURCE_EXPLORATION = "exploration"
SOURCE_INTERVENTION = "intervention"
SOURCE_DEMO = "demo"


@dataclass(frozen=True)
class IntervenerConfig:
    stall_window: int = 40  # M most recent progress distances
    stall_epsilon: float = 0.01
    oob_margin: float = 0.0
    expert_gain: float = 1.0
    max_takeover_len: int = 30
    resume_progress: float = 0.25  # progress since takeover start that ends it
    noise_std: float = 0.0  # optional stochastic-expert jitter

    def __post_init__(self):
        if self.stall_window < 1:
            raise ValueError("stall_window must be >= 1")
        if self.expert_gain <= 0:
            raise ValueError("expert_gain must be > 0")


@dataclass
class TakeoverState:
    active: bool = False
    ticks_remaining: int = 0
    origin: str | None = None  # "scripted" | "human"
    start_progress: float = 0.0


def should_intervene(cfg: IntervenerConfig, recent_distances: list[float], clamp_event: bool) -> bool:
    """Trigger on a boundary collision, or on a full window without progress."""
    if clamp_event:
        return True
    if len(recent_distances) < cfg.stall_window:
        return False
    return (recent_distances[0] - recent_distances[-1]) < cfg.stall_epsilon


def begin_scripted_takeover(cfg: IntervenerConfig, start_progress: float) -> TakeoverState:
    return TakeoverState(active=True, ticks_remaining=cfg.max_takeover_len, origin="scripted", start_progress=start_progress)


def tick_takeover(tko: TakeoverState, cfg: IntervenerConfig, progress_now: float, episode_done: bool) -> TakeoverState:
    """Advance a scripted takeover one step; ends it when recovery is visible."""
    if not tko.active or tko.origin != "scripted":
        return tko
    tko.ticks_remaining -= 1
    recovered = (tko.start_progress - progress_now) >= cfg.resume_progress
    if episode_done or tko.ticks_remaining <= 0 or recovered:
        return TakeoverState()
    return tko


def expert_action(
    state: EnvState,
    task: TaskSpec,
    cfg: IntervenerConfig,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """Proportional controller toward the current subgoal, clamped to [-1, 1]."""
    if task.name == "touch2":
        target = np.asarray(task.goals[state.active_goal], dtype=np.float64)
        gripper = None
    elif state.held or state.obj is None:
        target = np.asarray(task.goals[0], dtype=np.float64) if task.goals else state.tip
        gripper = 1.0
    else:
        target = state.obj
        near = np.linalg.norm(state.tip - state.obj) <= task.grasp_radius + task.action_scale
        gripper = 1.0 if near else -1.0

    direction = target - state.tip
    xy = np.clip(cfg.expert_gain * direction / task.action_scale, -1.0, 1.0)
    action = xy if gripper is None else np.concatenate([xy, [gripper]])
    if cfg.noise_std > 0.0 and rng is not None:
        action = np.clip(action + rng.normal(0.0, cfg.noise_std, size=action.shape), -1.0, 1.0)
    return action


def resolve_action(
    takeover: TakeoverState,
    policy_action: np.ndarray,
    expert_act: np.ndarray | None,
    human_command: np.ndarray | None = None,
) -> tuple[np.ndarray, str]:
    """Pick the executed action; human commands preempt the script."""
    if human_command is not None:
        return np.asarray(human_command, dtype=np.float64), SOURCE_INTERVENTION
    if takeover.active and expert_act is not None:
        return expert_act, SOURCE_INTERVENTION
    return policy_action, SOURCE_EXPLORATION
