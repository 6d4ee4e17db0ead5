"""End-to-end training loop with intervention branching and sample selection.

Per environment step: resolve the action (human > scripted takeover >
policy), store the transition (interventions land in both buffers), run G
critic updates on half/half batches, score the last batch's influence on
policy entropy, build the percentile selection mask (all-ones in uniform
mode), take one masked actor step, adapt the temperature, and emit one
metrics row. Checkpoints and evals run every ``eval_every`` steps and at
exit.

All randomness flows from named substreams of the master seed, so identical
(config, seed) pairs produce bit-identical metrics streams.
"""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import influence as infl
from . import intervene as iv
from . import sim
from .config import TrainConfig
from .nn import Adam, NonFiniteError, load_checkpoint, save_checkpoint
from .policy import (
    GaussianPolicy,
    Temperature,
    TwinCritic,
    critic_update,
    entropy_estimate_with_noise,
    polyak_update,
    temperature_update,
)
from .replay import SOURCES, Buffer, Transition, export_jsonl, sample_half_half
from .rng import counter_normals, stream_key, substream
from .wire import TelemetryBus

log = logging.getLogger("esrl.trainer")


@dataclass
class MetricsRow:
    step: int
    entropy_estimate: float
    dh_pred: float
    dh_meas: float
    success_rate: float
    intervention_rate: float
    retained_fraction: float
    mean_abs_c_by_source: dict
    alpha: float
    critic_loss: float
    actor_loss: float

    def to_json_dict(self) -> dict:
        return {
            "step": self.step,
            "entropy_estimate": self.entropy_estimate,
            "dh_pred": self.dh_pred,
            "dh_meas": self.dh_meas,
            "success_rate": self.success_rate,
            "intervention_rate": self.intervention_rate,
            "retained_fraction": self.retained_fraction,
            "mean_abs_c_by_source": self.mean_abs_c_by_source,
            "alpha": self.alpha,
            "critic_loss": self.critic_loss,
            "actor_loss": self.actor_loss,
        }


def build_agents(state_dim: int, action_dim: int, seed: int, hidden_dim: int = 64, hidden_layers: int = 2) -> tuple[GaussianPolicy, TwinCritic]:
    policy = GaussianPolicy.build(state_dim, action_dim, seed, hidden_dim, hidden_layers)
    critic = TwinCritic.build(state_dim, action_dim, seed, hidden_dim, hidden_layers)
    return policy, critic


def agent_tensors(policy: GaussianPolicy, critic: TwinCritic, temp: Temperature) -> dict[str, np.ndarray]:
    tensors: dict[str, np.ndarray] = {}
    for p in policy.trunk.params():
        tensors[p.name] = p.values
    for net, prefix in ((critic.q1, "q1"), (critic.q2, "q2"), (critic.target_q1, "target_q1"), (critic.target_q2, "target_q2")):
        for p in net.params():
            tensors[f"{prefix}:{p.name}"] = p.values
    tensors["temperature.log_alpha"] = np.array([temp.log_alpha])
    return tensors


def save_agents(path: str | Path, policy: GaussianPolicy, critic: TwinCritic, temp: Temperature, meta: dict) -> None:
    save_checkpoint(path, agent_tensors(policy, critic, temp), meta)


def load_agents(path: str | Path) -> tuple[GaussianPolicy, TwinCritic, Temperature, dict]:
    tensors, meta = load_checkpoint(path)
    policy, critic = build_agents(
        int(meta["state_dim"]), int(meta["action_dim"]), int(meta.get("seed", 0)),
        int(meta.get("hidden_dim", 64)), int(meta.get("hidden_layers", 2)),
    )
    for p in policy.trunk.params():
        p.values[...] = tensors[p.name]
    for net, prefix in ((critic.q1, "q1"), (critic.q2, "q2"), (critic.target_q1, "target_q1"), (critic.target_q2, "target_q2")):
        for p in net.params():
            p.values[...] = tensors[f"{prefix}:{p.name}"]
    temp = Temperature(
        log_alpha=float(tensors["temperature.log_alpha"][0]),
        target_entropy=float(meta.get("target_entropy", -meta["action_dim"])),
        lr_alpha=float(meta.get("lr_alpha", 3e-4)),
    )
    return policy, critic, temp, meta


def evaluate(policy: GaussianPolicy, task: sim.TaskSpec, episodes: int, rng: np.random.Generator) -> float:
    """Deterministic rollouts (action = tanh(mean)); fraction that succeed."""
    if episodes < 1:
        raise ValueError("episodes must be >= 1")
    successes = 0
    for _ in range(episodes):
        state = sim.reset(task, rng)
        for _ in range(task.horizon):
            action = policy.mean_action(sim.observe(task, state))
            state, reward, done = sim.step(task, state, action)
            if done:
                if reward > 0:
                    successes += 1
                break
    return successes / episodes


def measure_entropy_change(
    policy_before: GaussianPolicy,
    policy_after: GaussianPolicy,
    probe_states: np.ndarray,
    K: int,
    rng: np.random.Generator,
) -> float:
    """Entropy difference on a fixed probe set with draws pinned across both."""
    eps = rng.standard_normal((len(probe_states), K, policy_before.action_dim))
    before = entropy_estimate_with_noise(policy_before, probe_states, eps)
    after = entropy_estimate_with_noise(policy_after, probe_states, eps)
    return after - before


class Trainer:
    def __init__(
        self,
        cfg: TrainConfig,
        out_dir: str | Path,
        bus: TelemetryBus | None = None,
        stop_flag=None,
    ):
        cfg.validate()
        self.cfg = cfg
        self.out_dir = Path(out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self.bus = bus
        self.stop_flag = stop_flag

        self.task = sim.make_task(cfg.task)
        self.policy, self.critic = build_agents(self.task.state_dim, self.task.action_dim, cfg.seed, cfg.hidden_dim, cfg.hidden_layers)
        self.actor_opt = Adam(self.policy.trunk.params(), lr=cfg.actor_lr)
        self.critic_opt = Adam(self.critic.params(), lr=cfg.critic_lr)
        target_entropy = cfg.target_entropy if cfg.target_entropy is not None else -float(self.task.action_dim)
        self.temp = Temperature(log_alpha=math.log(cfg.alpha_init), target_entropy=target_entropy, lr_alpha=cfg.lr_alpha)

        self.replay = Buffer(cfg.replay_capacity, self.task.state_dim, self.task.action_dim)
        self.demo = Buffer(cfg.demo_capacity, self.task.state_dim, self.task.action_dim)

        s = cfg.seed
        self.rng_env = substream(s, "env")
        self.rng_policy = substream(s, "policy")
        self.rng_buffer = substream(s, "buffer")
        self.rng_critic = substream(s, "critic")
        self.rng_probe = substream(s, "probe")
        self.rng_actor = substream(s, "actor")
        self.rng_expert = substream(s, "expert")
        self.influence_key = stream_key(s, "influence")

        self.icfg = iv.IntervenerConfig(
            stall_window=cfg.stall_window,
            stall_epsilon=cfg.stall_epsilon,
            oob_margin=cfg.oob_margin,
            expert_gain=cfg.expert_gain,
            max_takeover_len=cfg.max_takeover_len,
            resume_progress=cfg.resume_progress,
            noise_std=cfg.expert_noise,
        )

        self.next_id = 0
        self.global_env_step = 0
        self.intervention_steps = 0
        self.interaction_steps = 0
        self.eval_index = 0
        self.last_success_rate = 0.0
        self.steps_to_70pct: int | None = None
        self.probe_set: np.ndarray | None = None
        self.probe_eps: np.ndarray | None = None
        self.probe_entropy = 0.0
        self.probe_step = -(10**9)
        self.metrics_path = self.out_dir / "metrics.jsonl"
        self._metrics_file = None

        # live-operator state
        self.human_takeover = False
        self.human_action: np.ndarray | None = None
        self.paused = False

    # ------------------------------------------------------------------
    def _push(self, t: Transition) -> None:
        self.replay.push(t)
        if t.source in (iv.SOURCE_INTERVENTION, iv.SOURCE_DEMO):
            self.demo.push(t)

    def _make_transition(self, state_vec, action, reward, next_vec, done, source) -> Transition:
        t = Transition(
            state=np.asarray(state_vec, dtype=np.float64),
            action=np.asarray(action, dtype=np.float64),
            reward=float(reward),
            next_state=np.asarray(next_vec, dtype=np.float64),
            done=bool(done),
            source=source,
            id=self.next_id,
            step=self.global_env_step,
        )
        self.next_id += 1
        return t

    def _collect_demos(self) -> None:
        """Scripted-expert episodes into the demo buffer before training."""
        for _ in range(self.cfg.demo_episodes):
            state = sim.reset(self.task, self.rng_env)
            for _ in range(self.task.horizon):
                action = iv.expert_action(state, self.task, self.icfg, self.rng_expert)
                nxt, reward, done = sim.step(self.task, state, action)
                tr = self._make_transition(
                    sim.observe(self.task, state), action, reward, sim.observe(self.task, nxt), reward > 0, iv.SOURCE_DEMO
                )
                self.demo.push(tr)  # demos seed the demo buffer only
                self.global_env_step += 1
                state = nxt
                if done:
                    break

    def _drain_commands(self) -> None:
        if self.bus is None:
            return
        for msg in self.bus.commands.drain():
            mtype = msg.get("type")
            payload = msg.get("payload") if isinstance(msg.get("payload"), dict) else {}
            if mtype == "takeover":
                on = payload.get("on", msg.get("on", False))
                self.human_takeover = bool(on)
                if not self.human_takeover:
                    self.human_action = None
            elif mtype == "action":
                vec = payload.get("a", msg.get("a"))
                if isinstance(vec, list) and len(vec) == self.task.action_dim:
                    arr = np.clip(np.asarray(vec, dtype=np.float64), -1.0, 1.0)
                    if np.all(np.isfinite(arr)):
                        self.human_action = arr
            elif mtype == "pause":
                self.paused = True
            elif mtype == "resume":
                self.paused = False
            else:
                log.warning("ignoring unknown inbound message type %r", mtype)

    def _snapshot_payload(self, state: sim.EnvState, source: str, takeover: iv.TakeoverState, reward: float) -> dict:
        payload = state.to_json_dict()
        payload.update(
            {
                "source": source,
                "takeover": bool(takeover.active or self.human_takeover),
                "origin": "human" if self.human_takeover else takeover.origin,
                "reward": float(reward),
            }
        )
        return payload

    def _refresh_probe(self, t: int) -> None:
        if self.probe_set is not None and t - self.probe_step < self.cfg.probe_refresh:
            return
        n = len(self.replay)
        idx = self.rng_probe.integers(0, n, size=self.cfg.probe_states)
        slots = (self.replay.insert_count - n + idx) % self.replay.capacity
        self.probe_set = self.replay._states[slots].copy()
        # draws stay pinned for the probe set's lifetime, so consecutive
        # before/after entropy estimates share noise and telescope cleanly
        self.probe_eps = self.rng_probe.standard_normal((self.cfg.probe_states, self.cfg.k_draws, self.task.action_dim))
        self.probe_entropy = entropy_estimate_with_noise(self.policy, self.probe_set, self.probe_eps)
        self.probe_step = t

    def _influence_payload(self, batch, mask: np.ndarray, bounds) -> dict:
        """Fig.-6-style task-space histograms, downsampled to <= 256 bins."""
        bins = 16
        lo, hi = self.task.lo, self.task.hi
        tips = batch.states[:, :2]
        retained = mask > 0.5

        def grid(points):
            h, _, _ = np.histogram2d(points[:, 0], points[:, 1], bins=bins, range=[[lo[0], hi[0]], [lo[1], hi[1]]])
            return [int(v) for v in h.ravel()]

        by_source = {}
        for code, name in enumerate(SOURCES):
            sel = batch.sources == code
            if np.any(sel):
                by_source[name] = {"retained": int(np.sum(retained & sel)), "clipped": int(np.sum(~retained & sel))}
        return {
            "bins": [bins, bins],
            "extent": [[float(lo[0]), float(lo[1])], [float(hi[0]), float(hi[1])]],
            "retained": grid(tips[retained]),
            "clipped": grid(tips[~retained]),
            "by_source": by_source,
            "bounds": {"lower": float(bounds.lower), "upper": float(bounds.upper)},
        }

    def _run_eval(self, t: int) -> None:
        rng = substream(self.cfg.seed, "eval", self.eval_index)
        self.eval_index += 1
        self.last_success_rate = evaluate(self.policy, self.task, self.cfg.eval_episodes, rng)
        if self.steps_to_70pct is None and self.last_success_rate >= 0.70:
            self.steps_to_70pct = t
        ckpt = self.out_dir / "checkpoints" / f"step_{t:08d}"
        save_agents(ckpt, self.policy, self.critic, self.temp, self._meta(t))

    def _meta(self, t: int) -> dict:
        return {
            "task": self.cfg.task,
            "state_dim": self.task.state_dim,
            "action_dim": self.task.action_dim,
            "hidden_dim": self.cfg.hidden_dim,
            "hidden_layers": self.cfg.hidden_layers,
            "seed": self.cfg.seed,
            "mode": self.cfg.mode,
            "alpha": self.temp.alpha,
            "target_entropy": self.temp.target_entropy,
            "lr_alpha": self.cfg.lr_alpha,
            "k_draws": self.cfg.k_draws,
            "actor_lr": self.cfg.actor_lr,
            "low_pct": self.cfg.low_pct,
            "high_pct": self.cfg.high_pct,
            "step": t,
        }

    def _write_metrics(self, row: MetricsRow) -> None:
        if self._metrics_file is None:
            self._metrics_file = open(self.metrics_path, "w", encoding="utf-8")
        line = json.dumps(row.to_json_dict(), separators=(",", ":"))
        self._metrics_file.write(line + "\n")
        if self.bus is not None:
            self.bus.publish("metrics", row.step, row.to_json_dict())

    # ------------------------------------------------------------------
    def run(self) -> dict:
        cfg = self.cfg
        if self.bus is not None:
            self.bus.set_hello(
                {
                    "task": self.task.name,
                    "mode": cfg.mode,
                    "workspace": [[float(v) for v in self.task.lo], [float(v) for v in self.task.hi]],
                    "goals": [[float(g[0]), float(g[1])] for g in self.task.goals],
                    "action_dim": self.task.action_dim,
                    "total_steps": cfg.total_steps,
                }
            )
        self._collect_demos()

        state = sim.reset(self.task, self.rng_env)
        takeover = iv.TakeoverState()
        stall_window: list[float] = []
        last_clamped = False
        learn_min = cfg.batch_size // 2
        aborted = None

        try:
            for t in range(cfg.total_steps):
                if self.stop_flag is not None and self.stop_flag.is_set():
                    log.info("stop requested at step %d", t)
                    break
                self._drain_commands()
                while self.paused:
                    time.sleep(0.05)
                    self._drain_commands()
                    if self.stop_flag is not None and self.stop_flag.is_set():
                        break

                state_vec = sim.observe(self.task, state)
                policy_action, _ = self.policy.sample(state_vec, self.rng_policy)

                progress = sim.progress_distance(self.task, state)
                if not takeover.active and not self.human_takeover:
                    if iv.should_intervene(self.icfg, stall_window, last_clamped):
                        takeover = iv.begin_scripted_takeover(self.icfg, progress)
                expert_act = None
                if takeover.active or self.human_takeover:
                    expert_act = iv.expert_action(state, self.task, self.icfg, self.rng_expert)
                human_cmd = self.human_action if self.human_takeover else None
                if self.human_takeover and human_cmd is None:
                    human_cmd = np.zeros(self.task.action_dim)
                action, source = iv.resolve_action(takeover, policy_action, expert_act, human_cmd)

                last_clamped = sim.clamp_event(self.task, state, action, self.icfg.oob_margin)
                nxt, reward, done = sim.step(self.task, state, action)
                # bootstrap-terminal only on success: a horizon timeout truncates
                # the episode but is not a terminal state of the task MDP
                tr = self._make_transition(state_vec, action, reward, sim.observe(self.task, nxt), reward > 0, source)
                if source == iv.SOURCE_INTERVENTION:
                    self._push(tr)  # lands in both buffers
                    self.intervention_steps += 1
                else:
                    self.replay.push(tr)
                self.global_env_step += 1
                self.interaction_steps += 1

                progress_after = sim.progress_distance(self.task, nxt)
                stall_window.append(progress_after)
                if len(stall_window) > self.icfg.stall_window:
                    stall_window.pop(0)
                prev_active = takeover.active
                takeover = iv.tick_takeover(takeover, self.icfg, progress_after, done)
                if prev_active and not takeover.active:
                    stall_window.clear()  # fresh observation window after a takeover

                if self.bus is not None:
                    self.bus.publish_snapshot(t, self._snapshot_payload(nxt, source, takeover, reward))

                if done:
                    state = sim.reset(self.task, self.rng_env)
                    stall_window.clear()
                    last_clamped = False
                    if takeover.origin == "scripted":
                        takeover = iv.TakeoverState()
                else:
                    state = nxt

                if len(self.replay) >= learn_min and len(self.demo) >= learn_min:
                    if self.probe_set is None:
                        self._run_eval(t)  # baseline eval + checkpoint at learning start
                    self._learn_step(t)
                    if (t + 1) % cfg.eval_every == 0:
                        self._run_eval(t + 1)
        except NonFiniteError as err:
            aborted = str(err)
            log.error("aborting: %s", err)
            save_agents(self.out_dir / "checkpoints" / "abort", self.policy, self.critic, self.temp, self._meta(-1))

        final_step = self.interaction_steps
        self._run_eval(final_step)
        save_agents(self.out_dir / "checkpoints" / "final", self.policy, self.critic, self.temp, self._meta(final_step))
        export_jsonl(self.replay.transitions(), self.out_dir / "replay.jsonl")
        export_jsonl(self.demo.transitions(), self.out_dir / "demo.jsonl")
        summary = {
            "task": cfg.task,
            "mode": cfg.mode,
            "seed": cfg.seed,
            "total_steps": final_step,
            "success_rate": self.last_success_rate,
            "intervention_rate": (self.intervention_steps / self.interaction_steps) if self.interaction_steps else 0.0,
            "steps_to_70pct": self.steps_to_70pct,
            "aborted": aborted,
        }
        (self.out_dir / "summary.json").write_text(json.dumps(summary, indent=1))
        if self._metrics_file is not None:
            self._metrics_file.close()
            self._metrics_file = None
        elif not self.metrics_path.exists():
            self.metrics_path.write_text("")  # T=0: empty metrics stream
        if aborted:
            raise NonFiniteError(aborted)
        return summary

    # ------------------------------------------------------------------
    def _learn_step(self, t: int) -> None:
        cfg = self.cfg
        alpha = self.temp.alpha
        batch = None
        critic_loss = float("nan")
        for _ in range(cfg.gradient_steps):
            batch = sample_half_half(self.replay, self.demo, cfg.batch_size, self.rng_buffer)
            critic_loss = critic_update(
                self.critic,
                batch.states,
                batch.actions,
                batch.rewards,
                batch.next_states,
                batch.dones,
                self.policy,
                alpha,
                cfg.gamma,
                self.critic_opt,
                self.rng_critic,
            )
            polyak_update(self.critic, cfg.rho_polyak)

        # influence scoring on the last sampled batch
        eps_inf = counter_normals(self.influence_key, batch.ids, (cfg.k_draws, self.task.action_dim))
        scored = infl.score_batch(batch.states, batch.actions, self.policy, self.critic, alpha, cfg.actor_lr, eps_inf)
        bounds = infl.percentile_bounds(np.abs(scored.c), cfg.low_pct, cfg.high_pct)
        if cfg.mode == "uniform":
            mask = np.ones(len(batch), dtype=np.float64)
        else:
            mask = infl.selection_mask(scored.c, bounds)

        self._refresh_probe(t)
        h_before = self.probe_entropy

        actor_eps = self.rng_actor.standard_normal((len(batch), self.task.action_dim))
        self.policy.trunk.zero_grad()
        actor_loss = infl.masked_actor_loss(batch.states, mask, self.policy, self.critic, alpha, actor_eps, cfg.mask_eps)
        if not math.isfinite(actor_loss):
            raise NonFiniteError("actor loss is not finite")
        self.actor_opt.step()

        h_after = entropy_estimate_with_noise(self.policy, self.probe_set, self.probe_eps)
        self.probe_entropy = h_after
        temperature_update(self.temp, h_after)

        abs_c = np.abs(scored.c)
        by_source = {}
        for code, name in enumerate(SOURCES):
            sel = batch.sources == code
            if np.any(sel):
                by_source[name] = float(abs_c[sel].mean())

        row = MetricsRow(
            step=t,
            entropy_estimate=h_after,
            dh_pred=scored.dh_pred,
            dh_meas=h_after - h_before,
            success_rate=self.last_success_rate,
            intervention_rate=self.intervention_steps / self.interaction_steps,
            retained_fraction=float(mask.mean()),
            mean_abs_c_by_source=by_source,
            alpha=alpha,
            critic_loss=critic_loss,
            actor_loss=actor_loss,
        )
        self._write_metrics(row)
        if self.bus is not None:
            self.bus.publish("influence", t, self._influence_payload(batch, mask, bounds))

def run_training(cfg: TrainConfig, out_dir: str | Path, bus: TelemetryBus | None = None, stop_flag=None) -> dict:
    return Trainer(cfg, out_dir, bus=bus, stop_flag=stop_flag).run()
