"""Deterministic 2-D kinematic manipulation tasks with sparse rewards.

Four tasks of increasing structure:

  touch2      reach whichever of two goal points is active this episode
  pick        grasp a block (approach + close gripper)
  pick_place  grasp a block and carry it to a target point
  stack       place two blocks, one after the other, on the same target

State vectors are flat float arrays laid out as:

  touch2      [tip_x, tip_y, goal_x, goal_y]
  pick        [tip_x, tip_y, obj_x, obj_y, held]
  pick_place  [tip_x, tip_y, obj_x, obj_y, goal_x, goal_y, held]
  stack       [tip_x, tip_y, obj_x, obj_y, goal_x, goal_y, held, phase0, phase1]

Actions are in [-1, 1]^action_dim: (dx, dy) scaled by ``action_scale``, plus
a gripper channel for the pick variants (> 0.5 closes; anything else opens).
``step`` is pure arithmetic: no hidden RNG, identical outputs on every
platform.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np


@dataclass(frozen=True)
class TaskSpec:
    name: str
    workspace: tuple[tuple[float, float], tuple[float, float]]  # (lo, hi) corners
    goals: tuple[tuple[float, float], ...]
    success_radius: float = 0.03
    horizon: int = 200
    action_scale: float = 0.05
    state_dim: int = 4
    action_dim: int = 2
    grasp_radius: float = 0.03
    object_spawns: tuple[tuple[float, float], ...] = ()
    reset_jitter: float = 0.05

    @property
    def has_gripper(self) -> bool:
        return self.action_dim >= 3

    @property
    def lo(self) -> np.ndarray:
        return np.asarray(self.workspace[0], dtype=np.float64)

    @property
    def hi(self) -> np.ndarray:
        return np.asarray(self.workspace[1], dtype=np.float64)

    @property
    def center(self) -> np.ndarray:
        return (self.lo + self.hi) / 2.0

    def validate(self) -> None:
        if self.success_radius <= 0:
            raise ValueError("success_radius must be > 0")
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        for g in self.goals:
            if np.any(np.asarray(g) < self.lo) or np.any(np.asarray(g) > self.hi):
                raise ValueError(f"goal {g} outside workspace")


@dataclass
class EnvState:
    tip: np.ndarray
    held: bool = False
    obj: np.ndarray | None = None
    phase: int = 0
    active_goal: int = 0
    t: int = 0

    def copy(self) -> "EnvState":
        return EnvState(self.tip.copy(), self.held, None if self.obj is None else self.obj.copy(), self.phase, self.active_goal, self.t)

    def to_json_dict(self) -> dict:
        return {
            "tip": [float(self.tip[0]), float(self.tip[1])],
            "held": bool(self.held),
            "object": None if self.obj is None else [float(self.obj[0]), float(self.obj[1])],
            "phase": int(self.phase),
            "active_goal": int(self.active_goal),
            "t": int(self.t),
        }


_UNIT = ((0.0, 0.0), (1.0, 1.0))

TASKS: dict[str, TaskSpec] = {
    "touch2": TaskSpec("touch2", _UNIT, goals=((0.2, 0.8), (0.8, 0.8)), state_dim=4, action_dim=2),
    "pick": TaskSpec("pick", _UNIT, goals=(), state_dim=5, action_dim=3, object_spawns=((0.7, 0.3),)),
    "pick_place": TaskSpec(
        "pick_place", _UNIT, goals=((0.25, 0.75),), state_dim=7, action_dim=3, object_spawns=((0.7, 0.3),), horizon=300
    ),
    "stack": TaskSpec(
        "stack", _UNIT, goals=((0.5, 0.75),), state_dim=9, action_dim=3, object_spawns=((0.7, 0.3), (0.3, 0.3)), horizon=400
    ),
}


def make_task(name: str, **overrides) -> TaskSpec:
    if name not in TASKS:
        raise KeyError(f"unknown task {name!r}; available: {sorted(TASKS)}")
    task = replace(TASKS[name], **overrides) if overrides else TASKS[name]
    task.validate()
    return task


def reset(task: TaskSpec, rng: np.random.Generator) -> EnvState:
    """Tip at workspace center + uniform jitter; goal drawn uniformly.

    Draw order is fixed (tip jitter, goal index, object jitter) so streams
    stay aligned across runs.
    """
    j = task.reset_jitter
    tip = task.center + rng.uniform(-j, j, size=2)
    tip = np.clip(tip, task.lo, task.hi)
    active_goal = int(rng.integers(len(task.goals))) if task.goals else 0
    obj = None
    if task.object_spawns:
        obj = np.asarray(task.object_spawns[0], dtype=np.float64) + rng.uniform(-j, j, size=2)
        obj = np.clip(obj, task.lo, task.hi)
    return EnvState(tip=tip, held=False, obj=obj, phase=0, active_goal=active_goal, t=0)


def success(task: TaskSpec, state: EnvState) -> bool:
    """Pure success predicate; distances compare strictly below the radius."""
    if task.name == "touch2":
        goal = np.asarray(task.goals[state.active_goal])
        return bool(np.linalg.norm(state.tip - goal) < task.success_radius)
    if task.name == "pick":
        return bool(state.held)
    if task.name == "pick_place":
        if state.obj is None:
            return False
        return bool(np.linalg.norm(state.obj - np.asarray(task.goals[0])) < task.success_radius)
    if task.name == "stack":
        return state.phase >= len(task.object_spawns)
    raise KeyError(task.name)


def clamp_event(task: TaskSpec, state: EnvState, action: np.ndarray, margin: float = 0.0) -> bool:
    """True when the requested tip motion would exceed the workspace bounds."""
    raw = state.tip + task.action_scale * np.clip(np.asarray(action, dtype=np.float64)[:2], -1.0, 1.0)
    return bool(np.any(raw < task.lo - margin) or np.any(raw > task.hi + margin))


def step(task: TaskSpec, state: EnvState, action: np.ndarray) -> tuple[EnvState, float, bool]:
    action = np.asarray(action, dtype=np.float64)
    if action.shape != (task.action_dim,):
        raise ValueError(f"action must have shape ({task.action_dim},)")
    if not np.all(np.isfinite(action)):
        raise ValueError("non-finite action rejected")
    action = np.clip(action, -1.0, 1.0)

    tip = np.clip(state.tip + task.action_scale * action[:2], task.lo, task.hi)
    held = state.held
    obj = None if state.obj is None else state.obj.copy()
    phase = state.phase

    if task.has_gripper and obj is not None:
        if action[2] > 0.5:
            if not held and np.linalg.norm(tip - obj) < task.grasp_radius:
                held = True
        else:
            held = False
        if held:
            obj = tip.copy()

    if task.name == "stack" and phase < len(task.object_spawns) and obj is not None:
        if np.linalg.norm(obj - np.asarray(task.goals[0])) < task.success_radius:
            phase += 1
            held = False
            if phase < len(task.object_spawns):
                obj = np.asarray(task.object_spawns[phase], dtype=np.float64)

    nxt = EnvState(tip=tip, held=held, obj=obj, phase=phase, active_goal=state.active_goal, t=state.t + 1)
    reached = success(task, nxt)
    reward = 1.0 if reached else 0.0
    done = reached or nxt.t >= task.horizon
    return nxt, reward, done


def observe(task: TaskSpec, state: EnvState) -> np.ndarray:
    """Flat state vector per the layout in the module docstring."""
    parts = [state.tip]
    if task.name == "touch2":
        parts.append(np.asarray(task.goals[state.active_goal], dtype=np.float64))
    else:
        parts.append(state.obj if state.obj is not None else np.zeros(2))
        if task.goals:
            parts.append(np.asarray(task.goals[0], dtype=np.float64))
        parts.append(np.array([1.0 if state.held else 0.0]))
        if task.name == "stack":
            onehot = np.zeros(len(task.object_spawns))
            if state.phase < len(task.object_spawns):
                onehot[state.phase] = 1.0
            parts.append(onehot)
    vec = np.concatenate(parts)
    assert vec.shape == (task.state_dim,), f"state layout drifted: {vec.shape}"
    return vec


def progress_distance(task: TaskSpec, state: EnvState) -> float:
    """Remaining task distance; the intervener watches this for stalls."""
    if task.name == "touch2":
        return float(np.linalg.norm(state.tip - np.asarray(task.goals[state.active_goal])))
    if task.name == "pick":
        return 0.0 if state.held else float(np.linalg.norm(state.tip - state.obj))
    # carry tasks: reach the object if not held, then carry it to the goal
    goal = np.asarray(task.goals[0], dtype=np.float64)
    if state.obj is None:
        return 0.0
    if task.name == "stack" and state.phase >= len(task.object_spawns):
        return 0.0
    d = float(np.linalg.norm(state.obj - goal))
    if not state.held:
        d += float(np.linalg.norm(state.tip - state.obj))
    if task.name == "stack":
        for p in range(state.phase + 1, len(task.object_spawns)):
            spawn = np.asarray(task.object_spawns[p], dtype=np.float64)
            d += float(np.linalg.norm(spawn - goal))
    return d
