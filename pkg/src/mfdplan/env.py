"""Mean-field MDP environments: Ising stage game and sequential Gaussian Squeeze.

Both environments couple agents only through the empirical distribution of
states/actions. Ising puts N spins on a periodic 2D lattice with reward
(coupling/2) * a_j * sum of neighbor spins; Gaussian Squeeze shares
G(x)/N with G(x) = x * exp(-(x - mu)^2 / sigma^2) over the aggregate x of
first action coordinates, with affine per-agent state dynamics.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .util import perm_mean, perm_sum

__all__ = [
    "EnvSpec", "MeanFieldState", "ising_spec", "gs_spec", "reset", "step",
    "order_parameter", "episode_return", "reward_gradient",
    "expected_next_state", "traj_layout", "assemble_traj",
    "state_slices", "action_slices", "mf_state_summary", "mf_sa_summary",
    "SPIN_VALUES",
]

# one-hot action index 0 is spin -1, index 1 is spin +1
SPIN_VALUES = np.array([-1.0, 1.0])


@dataclass(frozen=True)
class EnvSpec:
    name: str
    d_s: int
    d_a: int
    action_kind: str  # "discrete" | "continuous"
    H: int
    gamma: float
    N: int
    # Ising
    side: int = 0
    coupling: float = 0.0
    # Gaussian Squeeze
    mu_target: float = 0.0
    sigma_target: float = 0.0
    decay: float = 0.9
    act_gain: float = 0.1
    mix_gain: float = 0.05
    noise_std: float = 0.01

    @property
    def d_tau(self) -> int:
        return (self.d_s + self.d_a) * self.H + self.d_s


@dataclass
class MeanFieldState:
    states: np.ndarray  # (N, d_s)
    step: int
    sites: np.ndarray | None = None  # agent -> lattice site (Ising)


def ising_spec(N: int, coupling: float = 2.0, gamma: float = 1.0) -> EnvSpec:
    side = int(round(np.sqrt(N)))
    if side * side != N:
        raise ValueError(f"Ising N={N} must be a square lattice")
    if N < 2:
        raise ValueError("need N >= 2")
    return EnvSpec(name="ising", d_s=4, d_a=2, action_kind="discrete", H=1,
                   gamma=gamma, N=N, side=side, coupling=coupling)


def gs_spec(N: int, H: int = 50, gamma: float = 1.0, mu_target: float | None = None,
            sigma_target: float | None = None) -> EnvSpec:
    if N < 2 or H < 1:
        raise ValueError("need N >= 2, H >= 1")
    # aggregate target scales with N so the per-agent problem is N-invariant
    mu = N / 4.0 if mu_target is None else float(mu_target)
    sig = N / 8.0 if sigma_target is None else float(sigma_target)
    return EnvSpec(name="gs", d_s=4, d_a=4, action_kind="continuous", H=H,
                   gamma=gamma, N=N, mu_target=mu, sigma_target=sig)


# ---------------------------------------------------------------------------
# lattice helpers (Ising)

def _neighbor_sites(side: int) -> np.ndarray:
    """(N, 4) neighbor site indices in fixed order up/down/left/right."""
    n = side * side
    s = np.arange(n)
    r, c = s // side, s % side
    up = ((r - 1) % side) * side + c
    down = ((r + 1) % side) * side + c
    left = r * side + (c - 1) % side
    right = r * side + (c + 1) % side
    return np.stack([up, down, left, right], axis=1)


def _encode_ising(spins: np.ndarray, sites: np.ndarray, side: int) -> np.ndarray:
    """Per-agent 4-vector: own spin, neighbor mean spin, two padding zeros."""
    n = spins.shape[0]
    spin_at_site = np.empty(n)
    spin_at_site[sites] = spins
    nbr = _neighbor_sites(side)
    nbr_mean = spin_at_site[nbr].mean(axis=1)  # per site
    states = np.zeros((n, 4))
    states[:, 0] = spins
    states[:, 1] = nbr_mean[sites]
    return states


# ---------------------------------------------------------------------------

def reset(spec: EnvSpec, seed: int, init_spins: np.ndarray | None = None) -> MeanFieldState:
    rng = np.random.default_rng(seed)
    if spec.name == "ising":
        sites = np.arange(spec.N)
        if init_spins is not None:
            spins = np.asarray(init_spins, dtype=np.float64)
        else:
            spins = rng.choice(SPIN_VALUES, size=spec.N)
        return MeanFieldState(states=_encode_ising(spins, sites, spec.side),
                              step=0, sites=sites)
    if spec.name == "gs":
        states = rng.standard_normal((spec.N, spec.d_s))
        return MeanFieldState(states=states, step=0)
    raise ValueError(f"unknown env {spec.name!r}")


def step(spec: EnvSpec, state: MeanFieldState, actions: np.ndarray,
         rng: np.random.Generator):
    """One synchronous step; returns (next_state, per-agent rewards)."""
    if state.step >= spec.H:
        raise RuntimeError(f"episode already complete at step {state.step}")
    actions = np.asarray(actions, dtype=np.float64)
    if actions.shape != (spec.N, spec.d_a):
        raise ValueError(f"actions shape {actions.shape} != {(spec.N, spec.d_a)}")

    if spec.name == "ising":
        spins = actions @ SPIN_VALUES
        spin_at_site = np.empty(spec.N)
        spin_at_site[state.sites] = spins
        nbr = _neighbor_sites(spec.side)[state.sites]  # (N, 4), per agent
        nbr_sum = spin_at_site[nbr].sum(axis=1)
        rewards = 0.5 * spec.coupling * spins * nbr_sum
        nxt = MeanFieldState(states=_encode_ising(spins, state.sites, spec.side),
                             step=state.step + 1, sites=state.sites)
        return nxt, rewards

    if spec.name == "gs":
        x = perm_sum(actions[:, 0])
        g = x * np.exp(-((x - spec.mu_target) ** 2) / spec.sigma_target**2)
        rewards = np.full(spec.N, g / spec.N)
        mean_a = perm_mean(actions, axis=0)
        nxt_states = (spec.decay * state.states
                      + spec.act_gain * actions
                      + spec.mix_gain * (mean_a[None, :] - actions)
                      + spec.noise_std * rng.standard_normal((spec.N, spec.d_s)))
        return MeanFieldState(states=nxt_states, step=state.step + 1), rewards

    raise ValueError(f"unknown env {spec.name!r}")


def expected_next_state(spec: EnvSpec, states: np.ndarray, actions: np.ndarray) -> np.ndarray:
    """Noise-free next states, the reference for per-step transition error."""
    if spec.name == "gs":
        mean_a = perm_mean(actions, axis=0)
        return (spec.decay * states + spec.act_gain * actions
                + spec.mix_gain * (mean_a[None, :] - actions))
    if spec.name == "ising":
        spins = actions @ SPIN_VALUES
        sites = np.arange(spec.N)
        return _encode_ising(spins, sites, spec.side)
    raise ValueError(spec.name)


def order_parameter(x) -> float:
    """|N_up - N_down| / N on a spin vector or Ising state."""
    if isinstance(x, MeanFieldState):
        if x.sites is None:
            raise ValueError("order_parameter requires an Ising state")
        spins = x.states[:, 0]
    else:
        spins = np.asarray(x, dtype=np.float64)
    n_up = int((spins > 0).sum())
    n_down = int((spins < 0).sum())
    return abs(n_up - n_down) / spins.shape[0]


def episode_return(spec: EnvSpec, rewards: np.ndarray):
    """Per-agent discounted returns and social welfare J for one episode."""
    rewards = np.asarray(rewards, dtype=np.float64)
    if rewards.shape[0] != spec.H:
        raise ValueError(f"need rewards for exactly H={spec.H} steps, got {rewards.shape[0]}")
    disc = spec.gamma ** np.arange(spec.H)
    per_agent = (disc[:, None] * rewards).sum(axis=0)
    return per_agent, float(per_agent.mean())


# ---------------------------------------------------------------------------
# trajectory layout: (s_0, a_0, s_1, a_1, ..., s_{H-1}, a_{H-1}, s_H)

def traj_layout(spec: EnvSpec):
    return spec.d_s, spec.d_a, spec.H, spec.d_tau


def state_slices(spec: EnvSpec):
    """Column index array (H+1, d_s) of the state blocks."""
    stride = spec.d_s + spec.d_a
    starts = np.arange(spec.H + 1) * stride
    return starts[:, None] + np.arange(spec.d_s)[None, :]


def action_slices(spec: EnvSpec):
    """Column index array (H, d_a) of the action blocks."""
    stride = spec.d_s + spec.d_a
    starts = np.arange(spec.H) * stride + spec.d_s
    return starts[:, None] + np.arange(spec.d_a)[None, :]


def assemble_traj(spec: EnvSpec, states: np.ndarray, actions: np.ndarray) -> np.ndarray:
    """Flatten (H+1, N, d_s) states and (H, N, d_a) actions to (N, D_tau)."""
    n = states.shape[1]
    out = np.zeros((n, spec.d_tau))
    out[:, state_slices(spec).reshape(-1)] = np.transpose(states, (1, 0, 2)).reshape(n, -1)
    out[:, action_slices(spec).reshape(-1)] = np.transpose(actions, (1, 0, 2)).reshape(n, -1)
    return out


def mf_state_summary(states: np.ndarray) -> np.ndarray:
    """First two empirical moments of per-agent states: (2*d_s,)."""
    return np.concatenate([perm_mean(states, axis=0), perm_mean(states**2, axis=0)])


def mf_sa_summary(states: np.ndarray, actions: np.ndarray) -> np.ndarray:
    """Mean state and mean action, the context of the value network."""
    return np.concatenate([perm_mean(states, axis=0), perm_mean(actions, axis=0)])


def reward_gradient(spec: EnvSpec, trajs: np.ndarray, agg=None) -> np.ndarray:
    """Analytic d R / d tau per agent, mean field held fixed.

    `trajs` is (B, D_tau) or (D_tau,); the population aggregate is computed
    from the batch unless `agg` overrides it (shape (H,): GS aggregate x_h,
    or Ising neighbor-mean spins).
    """
    single = trajs.ndim == 1
    trajs = np.atleast_2d(np.asarray(trajs, dtype=np.float64))
    b = trajs.shape[0]
    a_idx = action_slices(spec)  # (H, d_a)
    acts = trajs[:, a_idx]  # (B, H, d_a)
    disc = spec.gamma ** np.arange(spec.H)
    grad = np.zeros_like(trajs)

    if spec.name == "gs":
        x = perm_sum(acts[:, :, 0], axis=0) if agg is None else np.asarray(agg)
        dgdx = np.exp(-((x - spec.mu_target) ** 2) / spec.sigma_target**2) * (
            1.0 - 2.0 * x * (x - spec.mu_target) / spec.sigma_target**2)
        per_step = disc * dgdx / spec.N  # (H,)
        grad[:, a_idx[:, 0]] = np.broadcast_to(per_step, (b, spec.H))
    elif spec.name == "ising":
        spins = acts @ SPIN_VALUES  # (B, H), relaxed spin values
        abar = perm_mean(spins, axis=0) if agg is None else np.asarray(agg)
        coeff = disc * 0.5 * spec.coupling * 4.0 * abar  # (H,)
        grad[:, a_idx] = coeff[None, :, None] * SPIN_VALUES[None, None, :]
    else:
        raise ValueError(spec.name)
    return grad[0] if single else grad


def permute_state(state: MeanFieldState, perm: np.ndarray) -> MeanFieldState:
    """Relabel agents (keeps lattice sites attached to their agents)."""
    return replace(state, states=state.states[perm],
                   sites=None if state.sites is None else state.sites[perm])
