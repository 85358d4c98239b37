"""Reverse-SDE planner: Euler-Maruyama denoising with inpainting, value
guidance, agent branching, hierarchical coarse-to-fine inference, and
receding-horizon execution.

Each particle owns a counter-based RNG stream keyed by (seed, agent key,
level); `rng_mode="content"` keys agents by the hash of their observed
initial state, which makes the whole plan exactly permutation-equivariant.
The planner's work counter counts one unit per score evaluation per
particle plus c_psi per parent at each branching, and must finish exactly
at work_full(subdivision, N).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import env as envmod
from .env import EnvSpec
from .model import Normalizer, value_gradient
from .schedule import DiffusionSchedule, SubdivisionSchedule, work_full
from .util import content_key, stream

__all__ = [
    "ParticleSystem", "PlanConfig", "PlanResult", "reverse_step", "inpaint",
    "branch", "plan", "project_actions", "execute", "sample_reverse",
]

_DOM_INIT, _DOM_STEP, _DOM_BRANCH = 0xA0, 0xA1, 0xA2


@dataclass
class ParticleSystem:
    trajs: np.ndarray   # (count, D_tau), normalized coordinates
    t: float
    level: int
    agents: np.ndarray  # agent index carried by each particle
    work: float = 0.0


@dataclass
class PlanConfig:
    eta: float = 0.05
    delta: float = 0.1          # branching mean-field coefficient
    rng_mode: str = "index"     # "index" | "content"
    guidance: bool = True

    def __post_init__(self):
        if self.eta < 0 or self.delta < 0:
            raise ValueError("eta and delta must be nonnegative")


@dataclass
class PlanResult:
    trajs: np.ndarray   # (N, D_tau), raw coordinates, agent order
    work: float
    t_final: float
    diagnostics: dict = field(default_factory=dict)


def reverse_step(score_fn, schedule: DiffusionSchedule, ps: ParticleSystem,
                 dt: float, noise: np.ndarray, guide_fn=None, eta: float = 0.0
                 ) -> ParticleSystem:
    """One Euler-Maruyama step of the reverse SDE from t to t - dt.

    x' = x + dt*(beta/2 * x + beta * s_tilde) + sqrt(beta*dt) * noise, with
    s_tilde = score + eta * guidance. eta=0 never evaluates the guidance.
    """
    if ps.t - dt < schedule.t_min - 1e-9:
        raise ValueError(f"step to {ps.t - dt} would cross t_min={schedule.t_min}")
    beta = float(schedule.beta(ps.t))
    s = np.asarray(score_fn(ps.t, ps.trajs), dtype=np.float64)
    if eta > 0 and guide_fn is not None:
        s = s + eta * np.asarray(guide_fn(ps.t, ps.trajs), dtype=np.float64)
    x = ps.trajs + dt * (0.5 * beta * ps.trajs + beta * s) + np.sqrt(beta * dt) * noise
    return ParticleSystem(trajs=x, t=ps.t - dt, level=ps.level, agents=ps.agents,
                          work=ps.work + ps.trajs.shape[0])


def inpaint(ps: ParticleSystem, observed: np.ndarray, d_s: int) -> ParticleSystem:
    """Overwrite the s_0 slice of each particle with its agent's observation."""
    if observed.ndim != 2 or observed.shape[1] != d_s:
        raise ValueError(f"observed must be (N, {d_s})")
    trajs = ps.trajs.copy()
    trajs[:, :d_s] = observed[ps.agents]
    return ParticleSystem(trajs=trajs, t=ps.t, level=ps.level, agents=ps.agents,
                          work=ps.work)


def branch(ps: ParticleSystem, model, schedule: DiffusionSchedule,
           subdivision: SubdivisionSchedule, delta: float, new_agents: np.ndarray,
           child_noise: np.ndarray) -> ParticleSystem:
    """Spawn (b-1) children per parent: child = parent + eta_k*eps + delta*B[nu].

    eta_k = sigma(t_k) * sqrt(dt) at the branch point; parents keep their
    slots, children append. Work increases by c_psi per parent (b >= 2).
    """
    if ps.level >= subdivision.K:
        raise ValueError("cannot branch at the final level")
    b = subdivision.b
    n_k = ps.trajs.shape[0]
    if b == 1:
        return ParticleSystem(trajs=ps.trajs, t=ps.t, level=ps.level + 1,
                              agents=ps.agents, work=ps.work)
    eta_k = float(schedule.sigma(ps.t)) * np.sqrt(schedule.dt)
    bfield = model.interaction_field(ps.t, ps.trajs) if delta > 0 else 0.0
    parents_rep = np.tile(ps.trajs, (b - 1, 1))
    bfield_rep = np.tile(bfield, (b - 1, 1)) if delta > 0 else 0.0
    children = parents_rep + eta_k * child_noise + delta * bfield_rep
    trajs = np.concatenate([ps.trajs, children])
    agents = np.concatenate([ps.agents, new_agents])
    return ParticleSystem(trajs=trajs, t=ps.t, level=ps.level + 1, agents=agents,
                          work=ps.work + subdivision.c_psi * n_k)


def _agent_keys(observed: np.ndarray, rng_mode: str) -> np.ndarray:
    n = observed.shape[0]
    if rng_mode == "index":
        return np.arange(n, dtype=np.uint64)
    if rng_mode == "content":
        return np.array([content_key(observed[i]) for i in range(n)], dtype=np.uint64)
    raise ValueError(f"unknown rng_mode {rng_mode!r}")


def plan(score_model, schedule: DiffusionSchedule, subdivision: SubdivisionSchedule,
         observed: np.ndarray, config: PlanConfig, seed: int,
         value_model=None, normalizer: Normalizer | None = None,
         spec: EnvSpec | None = None) -> PlanResult:
    """Hierarchical reverse-SDE generation of N trajectories (Algorithm: start
    from N_0 Gaussian particles at t=T, S denoising steps per level with
    inpainting after each update, branch at level boundaries, finish at t_min).
    """
    observed = np.asarray(observed, dtype=np.float64)
    n_total = observed.shape[0]
    if subdivision.N != n_total:
        raise ValueError(f"subdivision targets N={subdivision.N}, observed {n_total}")
    d_s = observed.shape[1]
    d_tau = (score_model.cfg.d_tau if hasattr(score_model, "cfg")
             else spec.d_tau if spec is not None else None)
    if d_tau is None:
        raise ValueError("cannot infer D_tau; pass spec")
    norm = normalizer or Normalizer.identity(d_tau)
    obs_norm = (observed - norm.mean[:d_s]) / norm.scale[:d_s]

    keys = _agent_keys(observed, config.rng_mode)
    # agent processing order: by key rank in content mode, identity otherwise
    order = np.argsort(keys, kind="stable") if config.rng_mode == "content" else np.arange(n_total)

    dt = schedule.dt
    n0 = subdivision.N_levels[0]
    active = order[:n0]
    init = np.stack([stream(seed, _DOM_INIT, int(keys[a])).standard_normal(d_tau)
                     for a in active])
    ps = ParticleSystem(trajs=init, t=schedule.T, level=0, agents=active, work=0.0)
    ps = inpaint(ps, obs_norm, d_s)

    guide_fn = None
    if value_model is not None and config.guidance and config.eta > 0:
        if spec is None:
            raise ValueError("value guidance needs the env spec")

        def guide_fn(t, trajs_norm):
            raw = norm.denormalize(trajs_norm)
            flow = _mf_flow(spec, raw)
            g_raw = value_gradient(value_model, spec, raw, flow)
            return g_raw * norm.scale[None, :]

    steps_done = 0
    for k in range(subdivision.K + 1):
        noise_blocks = {
            int(a): stream(seed, _DOM_STEP, int(keys[a]), k).standard_normal(
                (subdivision.S, d_tau))
            for a in ps.agents
        }
        for s_i in range(subdivision.S):
            noise = np.stack([noise_blocks[int(a)][s_i] for a in ps.agents])
            ps = reverse_step(
                lambda t, x: score_model.score(t, x, train=False),
                schedule, ps, dt, noise,
                guide_fn=guide_fn, eta=config.eta if guide_fn else 0.0)
            steps_done += 1
            # clamp against the divergence of untrained/garbage score fields:
            # 50 sigma in normalized coordinates is far outside anything a
            # sane model emits, and bounding here keeps the kernel/exp
            # arithmetic out of the denormal range
            trajs = np.clip(ps.trajs, -50.0, 50.0)
            ps = ParticleSystem(trajs=trajs, t=schedule.T - steps_done * dt,
                                level=ps.level, agents=ps.agents, work=ps.work)
            ps = inpaint(ps, obs_norm, d_s)
        if k < subdivision.K:
            n_k = ps.trajs.shape[0]
            new_agents = order[n_k:subdivision.b * n_k]
            child_noise = (np.stack([stream(seed, _DOM_BRANCH, int(keys[a]), k)
                                     .standard_normal(d_tau) for a in new_agents])
                           if subdivision.b > 1 else np.zeros((0, d_tau)))
            ps = branch(ps, score_model, schedule, subdivision, config.delta,
                        new_agents, child_noise)
            ps = inpaint(ps, obs_norm, d_s)

    expected = work_full(subdivision, n_total)
    if abs(ps.work - expected) > 1e-6 * max(expected, 1.0):
        raise AssertionError(f"work counter {ps.work} != work_full {expected}")

    out_norm = np.empty((n_total, d_tau))
    out_norm[ps.agents] = ps.trajs
    out = norm.denormalize(out_norm)
    out[:, :d_s] = observed  # raw observation carried bitwise
    return PlanResult(trajs=out, work=ps.work, t_final=ps.t,
                      diagnostics={"levels": list(subdivision.N_levels)})


def _mf_flow(spec: EnvSpec, raw_trajs: np.ndarray) -> np.ndarray:
    s_idx, a_idx = envmod.state_slices(spec), envmod.action_slices(spec)
    ss = raw_trajs[:, s_idx[:-1].reshape(-1)].reshape(-1, spec.H, spec.d_s)
    aa = raw_trajs[:, a_idx.reshape(-1)].reshape(-1, spec.H, spec.d_a)
    return np.concatenate([ss.mean(axis=0), aa.mean(axis=0)], axis=1)


def project_actions(trajs: np.ndarray, spec: EnvSpec, step: int = 0) -> np.ndarray:
    """First-step actions from generated trajectories.

    Discrete: argmax over the one-hot block (ties -> lowest index);
    continuous: the raw coordinates.
    """
    a_idx = envmod.action_slices(spec)[step]
    block = np.atleast_2d(trajs)[:, a_idx]
    if spec.action_kind == "discrete":
        out = np.zeros_like(block)
        out[np.arange(block.shape[0]), np.argmax(block, axis=1)] = 1.0
        return out
    return block.copy()


def execute(spec: EnvSpec, score_model, schedule: DiffusionSchedule,
            subdivision: SubdivisionSchedule, config: PlanConfig, seed: int,
            value_model=None, normalizer: Normalizer | None = None) -> dict:
    """Receding-horizon episode: observe, plan, execute a_0, repeat.

    Returns the episode record: realized states/actions/rewards plus the
    per-plan mean transition error of the generated trajectories and the
    per-plan work counts.
    """
    state = envmod.reset(spec, seed)
    env_rng = stream(seed, 0xEE)
    states = [state.states.copy()]
    actions_all, rewards_all, terrs, works = [], [], [], []
    for h in range(spec.H):
        res = plan(score_model, schedule, subdivision, state.states, config,
                   seed=seed * 10_007 + h, value_model=value_model,
                   normalizer=normalizer, spec=spec)
        terrs.append(transition_error_of(spec, res.trajs))
        works.append(res.work)
        acts = project_actions(res.trajs, spec)
        state, rewards = envmod.step(spec, state, acts, env_rng)
        states.append(state.states.copy())
        actions_all.append(acts)
        rewards_all.append(rewards)
    return {
        "states": np.stack(states),
        "actions": np.stack(actions_all),
        "rewards": np.stack(rewards_all),
        "transition_errors": np.array(terrs),
        "work": np.array(works),
    }


def transition_error_of(spec: EnvSpec, trajs: np.ndarray) -> float:
    """(1/H) sum_h ||s_{h+1}^gen - expected next state|| averaged over agents."""
    s_idx, a_idx = envmod.state_slices(spec), envmod.action_slices(spec)
    total = 0.0
    for h in range(spec.H):
        s_h = trajs[:, s_idx[h]]
        a_h = trajs[:, a_idx[h]]
        s_next_gen = trajs[:, s_idx[h + 1]]
        expected = envmod.expected_next_state(spec, s_h, a_h)
        total += float(np.linalg.norm(s_next_gen - expected, axis=1).mean())
    return total / spec.H


def sample_reverse(score_fn, schedule: DiffusionSchedule, count: int, dim: int,
                   seed: int) -> np.ndarray:
    """Flat (non-hierarchical) reverse-SDE sampler, batched RNG; used by the
    analytic-oracle correctness suite."""
    rng = stream(seed, 0xF1)
    x = rng.standard_normal((count, dim))
    dt = schedule.dt
    ps = ParticleSystem(trajs=x, t=schedule.T, level=0,
                        agents=np.arange(count), work=0.0)
    for i in range(schedule.n_steps):
        noise = rng.standard_normal((count, dim))
        ps = reverse_step(score_fn, schedule, ps, dt, noise)
        ps = ParticleSystem(trajs=ps.trajs, t=schedule.T - (i + 1) * dt,
                            level=0, agents=ps.agents, work=ps.work)
    return ps.trajs
