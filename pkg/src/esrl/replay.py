"""Two-buffer replay memory with 50/50 batch composition.

A ring buffer for everything the agent experiences and a second ring for
demonstrations plus human/scripted interventions. Training batches are
always half replay, half demo, sampled uniformly with replacement. Storage
is columnar so a batch gather is a couple of fancy-index reads.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

SOURCES = ("exploration", "intervention", "demo")
SOURCE_CODE = {name: i for i, name in enumerate(SOURCES)}

BUFFER_REPLAY = 0
BUFFER_DEMO = 1


class EmptyBufferError(RuntimeError):
    """A buffer has no entries yet; defer learning until both are nonempty."""


@dataclass
class Transition:
    state: np.ndarray
    action: np.ndarray
    reward: float
    next_state: np.ndarray
    done: bool
    source: str
    id: int
    step: int

    def __post_init__(self):
        if self.reward not in (0.0, 1.0):
            raise ValueError("reward must be 0 or 1 (sparse success signal)")
        if self.source not in SOURCES:
            raise ValueError(f"unknown source {self.source!r}")


@dataclass
class Batch:
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray
    dones: np.ndarray
    sources: np.ndarray  # int8 codes into SOURCES
    ids: np.ndarray
    buffer_tags: np.ndarray  # BUFFER_REPLAY / BUFFER_DEMO per row

    def __len__(self) -> int:
        return len(self.states)


class Buffer:
    """Fixed-capacity ring; oldest entries are evicted first."""

    def __init__(self, capacity: int, state_dim: int, action_dim: int):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self.state_dim = state_dim
        self.action_dim = action_dim
        self.insert_count = 0
        self._states = np.zeros((capacity, state_dim))
        self._actions = np.zeros((capacity, action_dim))
        self._rewards = np.zeros(capacity)
        self._next_states = np.zeros((capacity, state_dim))
        self._dones = np.zeros(capacity)
        self._sources = np.zeros(capacity, dtype=np.int8)
        self._ids = np.zeros(capacity, dtype=np.int64)
        self._steps = np.zeros(capacity, dtype=np.int64)

    def __len__(self) -> int:
        return min(self.insert_count, self.capacity)

    def push(self, t: Transition) -> None:
        if t.state.shape != (self.state_dim,) or t.next_state.shape != (self.state_dim,):
            raise ValueError("state dims do not match this buffer")
        i = self.insert_count % self.capacity
        self._states[i] = t.state
        self._actions[i] = t.action
        self._rewards[i] = t.reward
        self._next_states[i] = t.next_state
        self._dones[i] = 1.0 if t.done else 0.0
        self._sources[i] = SOURCE_CODE[t.source]
        self._ids[i] = t.id
        self._steps[i] = t.step
        self.insert_count += 1

    def get(self, i: int) -> Transition:
        """i-th oldest surviving entry."""
        n = len(self)
        if not 0 <= i < n:
            raise IndexError(i)
        start = self.insert_count - n
        j = (start + i) % self.capacity
        return Transition(
            state=self._states[j].copy(),
            action=self._actions[j].copy(),
            reward=float(self._rewards[j]),
            next_state=self._next_states[j].copy(),
            done=bool(self._dones[j]),
            source=SOURCES[self._sources[j]],
            id=int(self._ids[j]),
            step=int(self._steps[j]),
        )

    def transitions(self) -> list[Transition]:
        return [self.get(i) for i in range(len(self))]

    def gather_slots(self, idx: np.ndarray, buffer_tag: int) -> Batch:
        """Gather raw ring slots (callers map logical indices first)."""
        return Batch(
            states=self._states[idx],
            actions=self._actions[idx],
            rewards=self._rewards[idx],
            next_states=self._next_states[idx],
            dones=self._dones[idx],
            sources=self._sources[idx],
            ids=self._ids[idx],
            buffer_tags=np.full(len(idx), buffer_tag, dtype=np.int8),
        )


def sample_half_half(rep: Buffer, demo: Buffer, n: int, rng: np.random.Generator) -> Batch:
    """Exactly n/2 uniform-with-replacement draws from each buffer."""
    if n % 2 != 0:
        raise ValueError("batch size must be even")
    if len(rep) == 0 or len(demo) == 0:
        raise EmptyBufferError("both buffers must be nonempty; defer learning")
    half = n // 2
    idx_r = rng.integers(0, len(rep), size=half)
    idx_d = rng.integers(0, len(demo), size=half)
    # map logical (oldest-first) indices to ring slots
    br = rep.gather_slots((rep.insert_count - len(rep) + idx_r) % rep.capacity, BUFFER_REPLAY)
    bd = demo.gather_slots((demo.insert_count - len(demo) + idx_d) % demo.capacity, BUFFER_DEMO)
    return Batch(
        states=np.concatenate([br.states, bd.states]),
        actions=np.concatenate([br.actions, bd.actions]),
        rewards=np.concatenate([br.rewards, bd.rewards]),
        next_states=np.concatenate([br.next_states, bd.next_states]),
        dones=np.concatenate([br.dones, bd.dones]),
        sources=np.concatenate([br.sources, bd.sources]),
        ids=np.concatenate([br.ids, bd.ids]),
        buffer_tags=np.concatenate([br.buffer_tags, bd.buffer_tags]),
    )


def transition_to_json_dict(t: Transition) -> dict:
    return {
        "id": t.id,
        "step": t.step,
        "source": t.source,
        "state": [float(v) for v in t.state],
        "action": [float(v) for v in t.action],
        "reward": t.reward,
        "next_state": [float(v) for v in t.next_state],
        "done": t.done,
    }


def export_jsonl(transitions: list[Transition], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for t in transitions:
            f.write(json.dumps(transition_to_json_dict(t)) + "\n")


def load_jsonl(path: str | Path) -> list[Transition]:
    out = []
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            d = json.loads(line)
            out.append(
                Transition(
                    state=np.asarray(d["state"], dtype=np.float64),
                    action=np.asarray(d["action"], dtype=np.float64),
                    reward=float(d["reward"]),
                    next_state=np.asarray(d["next_state"], dtype=np.float64),
                    done=bool(d["done"]),
                    source=d["source"],
                    id=int(d["id"]),
                    step=int(d["step"]),
                )
            )
    return out
