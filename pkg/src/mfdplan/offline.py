"""Mean-field Q-learning collectors, offline datasets, binary dataset format.

MFQ is tabular over (state bucket, action, mean-action bucket), trained with
Boltzmann exploration annealed linearly. Datasets hold N-agent episodes
(states, actions, rewards, mean-field summaries) and serialize to the MFDD
binary format: magic + version + header + little-endian f32 payload + CRC32.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field

import numpy as np

from . import env as envmod
from .env import EnvSpec, MeanFieldState
from .util import perm_mean, stream

__all__ = [
    "MFQPolicy", "RandomPolicy", "MFQTrainResult", "Episode", "OfflineDataset",
    "train_mfq", "collect_split", "rollout_episode", "write_dataset",
    "read_dataset", "dataset_stats", "rbf_mmd2", "evaluate_policy",
    "evaluate_mfq_ising",
]

MAGIC = b"MFDD"
FORMAT_VERSION = 1

# quantization grids
N_MEAN_BUCKETS = 21
GS_ACTION_LEVELS = 11   # first action coordinate on [-1, 1]
GS_STATE_BUCKETS = 11   # first state coordinate on [-2, 2]


def _bucket(x, lo, hi, n):
    idx = np.floor((np.asarray(x) - lo) / (hi - lo) * n).astype(int)
    return np.clip(idx, 0, n - 1)


@dataclass
class MFQPolicy:
    """Tabular mean-field Q over (state bucket, action, mean-action bucket)."""

    env_name: str
    q: np.ndarray
    temperature: float
    lr: float
    gamma: float
    visits: np.ndarray | None = None

    def action_values(self, spec: EnvSpec) -> np.ndarray:
        if spec.name == "ising":
            return envmod.SPIN_VALUES.copy()
        return np.linspace(-1.0, 1.0, GS_ACTION_LEVELS)

    def observe_buckets(self, spec: EnvSpec, states: np.ndarray, prev_mean_action):
        if spec.name == "ising":
            s_b = (states[:, 0] > 0).astype(int)
            m_b = _bucket(states[:, 1], -1.0, 1.0 + 1e-12, N_MEAN_BUCKETS)
        else:
            s_b = _bucket(states[:, 0], -2.0, 2.0, GS_STATE_BUCKETS)
            m = float(prev_mean_action[0]) if prev_mean_action is not None else 0.0
            m_b = np.full(states.shape[0], _bucket(m, -1.0, 1.0 + 1e-12, N_MEAN_BUCKETS))
        return s_b, m_b

    def act(self, spec: EnvSpec, states: np.ndarray, prev_mean_action,
            rng: np.random.Generator, temperature: float | None = None) -> np.ndarray:
        temp = self.temperature if temperature is None else temperature
        s_b, m_b = self.observe_buckets(spec, states, prev_mean_action)
        qvals = self.q[s_b, :, m_b]  # (N, n_actions)
        if temp <= 0:
            # greedy with uniform random tie-break
            jitter = rng.random(qvals.shape) * 1e-12
            choice = np.argmax(qvals + jitter, axis=1)
        else:
            logits = (qvals - qvals.max(axis=1, keepdims=True)) / temp
            p = np.exp(logits)
            p /= p.sum(axis=1, keepdims=True)
            u = rng.random((states.shape[0], 1))
            choice = (p.cumsum(axis=1) < u).sum(axis=1)
        return self._embed(spec, choice)

    def _embed(self, spec: EnvSpec, choice: np.ndarray) -> np.ndarray:
        vals = self.action_values(spec)
        acts = np.zeros((choice.shape[0], spec.d_a))
        if spec.name == "ising":
            acts[np.arange(choice.shape[0]), choice] = 1.0
        else:
            acts[:, 0] = vals[choice]
        return acts


@dataclass
class RandomPolicy:
    env_name: str
    temperature: float = 1.0

    def act(self, spec: EnvSpec, states, prev_mean_action, rng, temperature=None):
        n = states.shape[0]
        acts = np.zeros((n, spec.d_a))
        if spec.name == "ising":
            acts[np.arange(n), rng.integers(0, 2, size=n)] = 1.0
        else:
            vals = np.linspace(-1.0, 1.0, GS_ACTION_LEVELS)
            acts[:, 0] = vals[rng.integers(0, GS_ACTION_LEVELS, size=n)]
        return acts


@dataclass
class Episode:
    states: np.ndarray    # (H+1, N, d_s)
    actions: np.ndarray   # (H, N, d_a)
    rewards: np.ndarray   # (H, N)
    summaries: np.ndarray  # (H, 2*d_s)

    def trajectories(self, spec: EnvSpec) -> np.ndarray:
        return envmod.assemble_traj(spec, self.states, self.actions)


@dataclass
class MFQTrainResult:
    expert: MFQPolicy
    medium: MFQPolicy
    replay: list
    final_state: MeanFieldState | None
    history: dict


def _q_shape(spec: EnvSpec):
    if spec.name == "ising":
        return (2, 2, N_MEAN_BUCKETS)
    return (GS_STATE_BUCKETS, GS_ACTION_LEVELS, N_MEAN_BUCKETS)


def train_mfq(spec: EnvSpec, iterations: int, seed: int,
              lr: float = 0.1, temp_hi: float | None = None,
              temp_lo: float | None = None,
              replay_cap_transitions: int = 100_000) -> MFQTrainResult:
    """Tabular MFQ with linearly annealed Boltzmann exploration.

    One iteration is one environment episode (a single round for the Ising
    stage game, whose lattice configuration persists across iterations).
    The anneal starts above the 2D Ising critical temperature so the
    lattice orders instead of quenching into stripes. Snapshots are taken
    at 50% and 100% of the iterations; every training episode goes into the
    replay buffer (oldest dropped beyond the cap).
    """
    if temp_hi is None:
        temp_hi = 4.0 if spec.name == "ising" else 1.0
    if temp_lo is None:
        temp_lo = 0.05 if spec.name == "ising" else 0.005
    rng = stream(seed, 0xF0)
    q = np.zeros(_q_shape(spec))
    if spec.name == "gs":
        # optimistic start drives systematic exploration of the action grid
        q += 5.0
    visits = np.zeros(_q_shape(spec))
    policy = MFQPolicy(spec.name, q, temperature=temp_hi, lr=lr, gamma=spec.gamma)
    replay: list[Episode] = []
    replay_transitions = 0
    medium = None
    history = {"xi": [], "return": []}
    best_q, best_j = None, -np.inf
    check_every = max(iterations // 10, 1)

    state = envmod.reset(spec, seed) if spec.name == "ising" else None

    for it in range(iterations):
        frac = it / max(iterations - 1, 1)
        temp = temp_hi + (temp_lo - temp_hi) * frac
        policy.temperature = temp
        ep_rng = stream(seed, 1, it)

        if spec.name == "ising":
            ep, state = _ising_round(spec, policy, state, ep_rng, q, lr, visits=visits)
            history["xi"].append(envmod.order_parameter(state))
        else:
            ep = _gs_episode(spec, policy, ep_rng, q, lr, learn=True, visits=visits)
        if not np.isfinite(q).all():
            raise FloatingPointError("MFQ diverged: non-finite Q values")
        history["return"].append(float(ep.rewards.sum(axis=0).mean()))

        replay.append(ep)
        replay_transitions += ep.rewards.size
        while replay_transitions > replay_cap_transitions and len(replay) > 1:
            old = replay.pop(0)
            replay_transitions -= old.rewards.size

        if medium is None and it + 1 >= (iterations + 1) // 2:
            medium = MFQPolicy(spec.name, q.copy(), temperature=temp, lr=lr,
                               gamma=spec.gamma)

        if spec.name == "gs" and (it + 1) % check_every == 0:
            cand = MFQPolicy(spec.name, q.copy(), temperature=temp_lo, lr=lr,
                             gamma=spec.gamma)
            j = np.mean([envmod.episode_return(
                spec, _gs_episode(spec, cand, stream(seed, 3, it, v), None, 0.0,
                                  learn=False).rewards)[1] for v in range(3)])
            if j > best_j:
                best_j, best_q = j, q.copy()

    if iterations == 0:
        medium = MFQPolicy(spec.name, q.copy(), temperature=temp_hi, lr=lr,
                           gamma=spec.gamma)
    # the expert is the best validated snapshot (the final table can sit on
    # a transient of the drifting self-play field)
    q_exp = best_q if best_q is not None else q.copy()
    expert = MFQPolicy(spec.name, q_exp, temperature=temp_lo, lr=lr,
                       gamma=spec.gamma)
    expert.visits = visits.copy()
    return MFQTrainResult(expert=expert, medium=medium, replay=replay,
                          final_state=state, history=history)


def _td_update(q, cells, targets, lr, visits=None, lr_floor=0.02,
               decay=True):
    """Batch tabular TD step: per-cell mean of the simultaneous agent errors
    (plain add.at would multiply the learning rate by the cell's visit count).
    With `decay` the per-cell rate falls harmonically to `lr_floor`, settling
    cells against a drifting population field; exact stationary targets
    (Ising) keep the plain rate."""
    delta = targets - q[cells]
    upd = np.zeros_like(q)
    cnt = np.zeros_like(q)
    np.add.at(upd, cells, delta)
    np.add.at(cnt, cells, 1.0)
    mask = cnt > 0
    if decay and visits is not None:
        rate = np.maximum(lr / (1.0 + 0.05 * visits[mask]), lr_floor)
    else:
        rate = lr
    q[mask] += rate * upd[mask] / cnt[mask]
    if visits is not None:
        visits += cnt


def _ising_round(spec, policy, state, rng, q, lr, visits=None,
                 temperature=None, update_frac=0.5):
    """One synchronous Ising round with sticky updates: each agent redraws
    its spin with probability `update_frac`, else resubmits its current one.
    Fully parallel redraws admit a period-2 checkerboard attractor at low
    temperature; partial updates restore the ferromagnetic fixed point."""
    actions = policy.act(spec, state.states, None, rng, temperature=temperature)
    if update_frac < 1.0:
        hold = rng.random(spec.N) >= update_frac
        prev_spin_up = state.states[:, 0] > 0
        actions[hold] = 0.0
        actions[hold, prev_spin_up[hold].astype(int)] = 1.0
    nxt, rewards = envmod.step(spec, state, actions, rng)
    if q is not None:
        # TD target is the mean-field factorized reward against the observed
        # field, r^MF = (lambda*|nbr|/2) a * abar: the Q^MF(a, abar) fixed
        # point is then exact for every visited cell. Recorded episode
        # rewards stay the environment's joint-action rewards.
        s_b, m_b = policy.observe_buckets(spec, state.states, None)
        spins = actions @ envmod.SPIN_VALUES
        r_mf = 0.5 * spec.coupling * 4.0 * spins * state.states[:, 1]
        a_idx = np.argmax(actions, axis=1)
        _td_update(q, (s_b, a_idx, m_b), r_mf, lr, visits=visits, decay=False)
    summaries = envmod.mf_state_summary(state.states)[None, :]
    ep = Episode(states=np.stack([state.states, nxt.states]),
                 actions=actions[None], rewards=rewards[None], summaries=summaries)
    # stage game: the configuration persists as the next round's observation
    nxt = MeanFieldState(states=nxt.states, step=0, sites=nxt.sites)
    return ep, nxt


def _gs_episode(spec, policy, rng, q, lr, learn, visits=None,
                update_frac=0.2):
    """One GS episode with sticky actions: after the first step only an
    `update_frac` fraction of agents redraws per step. The best-response map
    on the aggregate has slope -(N-1), so fully synchronous re-decisions
    limit-cycle; partial updates let the population settle."""
    state = envmod.reset(spec, int(rng.integers(1 << 31)))
    states = [state.states.copy()]
    acts, rews, sums = [], [], []
    prev_mean = np.zeros(spec.d_a)
    prev_actions = None
    for h in range(spec.H):
        actions = policy.act(spec, state.states, prev_mean, rng)
        if prev_actions is not None and update_frac < 1.0:
            hold = rng.random(spec.N) >= update_frac
            actions[hold] = prev_actions[hold]
        prev_actions = actions
        nxt, rewards = envmod.step(spec, state, actions, rng)
        mean_a = perm_mean(actions, axis=0)
        if learn and q is not None:
            s_b, m_b = policy.observe_buckets(spec, state.states, prev_mean)
            a_idx = _bucket(actions[:, 0], -1.0 - 1e-9, 1.0 + 1e-9, GS_ACTION_LEVELS)
            if h + 1 < spec.H:
                s_b2, m_b2 = policy.observe_buckets(spec, nxt.states, mean_a)
                target = rewards + policy.gamma * q[s_b2, :, m_b2].max(axis=1)
            else:
                target = rewards
            _td_update(q, (s_b, a_idx, m_b), target, lr, visits=visits)
        sums.append(envmod.mf_state_summary(state.states))
        states.append(nxt.states.copy())
        acts.append(actions)
        rews.append(rewards)
        state = nxt
        prev_mean = mean_a
    return Episode(states=np.stack(states), actions=np.stack(acts),
                   rewards=np.stack(rews), summaries=np.stack(sums))


def rollout_episode(spec: EnvSpec, policy, seed: int, warmup: int = 0,
                    anneal_from: float = 4.0) -> Episode:
    """One recorded episode under `policy`.

    Ising episodes run `warmup` unrecorded rounds first, with the acting
    temperature annealed from above the critical point down to the policy's
    own temperature, so the recorded round samples the policy's equilibrium
    configuration rather than a quench from random spins.
    """
    rng = stream(seed, 0xE0)
    if spec.name == "ising":
        state = envmod.reset(spec, int(rng.integers(1 << 31)))
        temp_end = getattr(policy, "temperature", 1.0)
        for w in range(warmup):
            frac = w / max(warmup - 1, 1)
            temp = anneal_from + (temp_end - anneal_from) * frac
            _, state = _ising_round(spec, policy, state, rng, None, 0.0,
                                    temperature=temp)  # discard the episode
        ep, _ = _ising_round(spec, policy, state, rng, None, 0.0)
        return ep
    return _gs_episode(spec, policy, rng, None, 0.0, learn=False)


def collect_split(spec: EnvSpec, train_result: MFQTrainResult, split: str,
                  episodes: int, seed: int, warmup: int = 20) -> "OfflineDataset":
    """Build one offline dataset split from MFQ snapshots.

    expert/medium roll out the 100%/50% snapshots; medium_replay samples
    stored training episodes uniformly; mixed flips a fair coin per episode
    between the expert and a uniform-random policy.
    """
    eps: list[Episode] = []
    if split == "medium_replay":
        if not train_result.replay:
            raise ValueError("replay buffer is empty")
        idx_rng = stream(seed, 0x52, 0)
        idx = idx_rng.integers(0, len(train_result.replay), size=episodes)
        eps = [train_result.replay[i] for i in idx]
    else:
        rand = RandomPolicy(spec.name)
        coin = stream(seed, 0xC0)
        for e in range(episodes):
            if split == "expert":
                pol = train_result.expert
            elif split == "medium":
                if train_result.medium is None:
                    raise ValueError("medium snapshot missing")
                pol = train_result.medium
            elif split == "mixed":
                pol = train_result.expert if coin.random() < 0.5 else rand
            else:
                raise ValueError(f"unknown split {split!r}")
            eps.append(rollout_episode(spec, pol, seed=seed * 1_000_003 + e,
                                       warmup=warmup if spec.name == "ising" else 0))
    return OfflineDataset(env_name=spec.name, N=spec.N, H=spec.H, d_s=spec.d_s,
                          d_a=spec.d_a, split=split, version=FORMAT_VERSION,
                          episodes=eps)


# ---------------------------------------------------------------------------
# dataset container + binary format


@dataclass
class OfflineDataset:
    env_name: str
    N: int
    H: int
    d_s: int
    d_a: int
    split: str
    version: int = FORMAT_VERSION
    episodes: list = field(default_factory=list)

    @property
    def d_tau(self) -> int:
        return (self.d_s + self.d_a) * self.H + self.d_s

    def all_trajectories(self, spec: EnvSpec) -> np.ndarray:
        """(episodes*N, D_tau) stack of per-agent trajectories."""
        if not self.episodes:
            return np.zeros((0, self.d_tau))
        return np.concatenate([ep.trajectories(spec) for ep in self.episodes])


def _pack_str(s: str) -> bytes:
    b = s.encode("utf-8")
    return struct.pack("<H", len(b)) + b


def _unpack_str(buf: io.BytesIO) -> str:
    (n,) = struct.unpack("<H", _read_exact(buf, 2))
    return _read_exact(buf, n).decode("utf-8")


def _read_exact(buf, n: int) -> bytes:
    b = buf.read(n)
    if len(b) != n:
        raise ValueError("dataset truncated")
    return b


def _f32(a: np.ndarray) -> bytes:
    return np.ascontiguousarray(a, dtype="<f4").tobytes()


def write_dataset(ds: OfflineDataset, path) -> None:
    summary_dim = 2 * ds.d_s
    header = b"".join([
        _pack_str(ds.env_name),
        struct.pack("<5I", ds.N, ds.H, ds.d_s, ds.d_a, summary_dim),
        _pack_str(ds.split),
        struct.pack("<I", len(ds.episodes)),
    ])
    payload = bytearray()
    for ep in ds.episodes:
        payload += _f32(ep.states)
        payload += _f32(ep.actions)
        payload += _f32(ep.rewards)
        payload += _f32(ep.summaries)
    from .util import crc32_of

    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", ds.version))
        f.write(header)
        f.write(payload)
        f.write(struct.pack("<I", crc32_of(bytes(payload))))


def read_dataset(path) -> OfflineDataset:
    from .util import crc32_of

    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != MAGIC:
        raise ValueError("bad magic: not an MFDD dataset")
    buf = io.BytesIO(raw[4:])
    (version,) = struct.unpack("<I", _read_exact(buf, 4))
    if version != FORMAT_VERSION:
        raise ValueError(f"unsupported dataset version {version}")
    env_name = _unpack_str(buf)
    n, h, d_s, d_a, summary_dim = struct.unpack("<5I", _read_exact(buf, 20))
    split = _unpack_str(buf)
    (n_eps,) = struct.unpack("<I", _read_exact(buf, 4))

    payload_start = buf.tell()
    per_ep = 4 * ((h + 1) * n * d_s + h * n * d_a + h * n + h * summary_dim)
    payload_len = per_ep * n_eps
    payload = _read_exact(buf, payload_len)
    (crc_stored,) = struct.unpack("<I", _read_exact(buf, 4))
    if buf.read(1):
        raise ValueError("trailing bytes after checksum")
    if crc32_of(payload) != crc_stored:
        raise ValueError("dataset payload checksum mismatch")

    eps = []
    off = 0

    def take(shape):
        nonlocal off
        size = int(np.prod(shape)) * 4
        arr = np.frombuffer(payload[off:off + size], dtype="<f4").astype(np.float64)
        off += size
        return arr.reshape(shape)

    for _ in range(n_eps):
        eps.append(Episode(states=take((h + 1, n, d_s)), actions=take((h, n, d_a)),
                           rewards=take((h, n)), summaries=take((h, summary_dim))))
    del payload_start
    return OfflineDataset(env_name=env_name, N=n, H=h, d_s=d_s, d_a=d_a,
                          split=split, version=version, episodes=eps)


# ---------------------------------------------------------------------------
# summary statistics


def rbf_mmd2(x: np.ndarray, y: np.ndarray, bandwidth: float | None = None) -> float:
    """Unbiased RBF-MMD^2 between two sample matrices (rows are samples)."""
    x = np.atleast_2d(x)
    y = np.atleast_2d(y)
    if bandwidth is None:
        pooled = np.concatenate([x, y])[:256]
        d2 = ((pooled[:, None, :] - pooled[None, :, :]) ** 2).sum(-1)
        med = np.median(d2[np.triu_indices_from(d2, k=1)])
        bandwidth = np.sqrt(max(med, 1e-12))

    def gram(a, b):
        d2 = ((a[:, None, :] - b[None, :, :]) ** 2).sum(-1)
        return np.exp(-d2 / (2.0 * bandwidth**2))

    kxx, kyy, kxy = gram(x, x), gram(y, y), gram(x, y)
    m, n = x.shape[0], y.shape[0]
    np.fill_diagonal(kxx, 0.0)
    np.fill_diagonal(kyy, 0.0)
    return (kxx.sum() / (m * (m - 1)) + kyy.sum() / (n * (n - 1))
            - 2.0 * kxy.mean())


def dataset_stats(ds: OfflineDataset, reference: OfflineDataset | None = None,
                  spec: EnvSpec | None = None, max_samples: int = 256,
                  seed: int = 0) -> dict:
    """Deterministic per-split summary; with `reference`, adds the MMD-based
    offline-shift proxy between per-agent trajectory samples."""
    if not ds.episodes:
        raise ValueError("empty dataset")
    spec = spec or _spec_of(ds)
    returns = np.array([envmod.episode_return(spec, ep.rewards)[1] for ep in ds.episodes])
    states = np.concatenate([ep.states.reshape(-1, ds.d_s) for ep in ds.episodes])
    actions = np.concatenate([ep.actions.reshape(-1, ds.d_a) for ep in ds.episodes])
    out = {
        "episodes": len(ds.episodes),
        "return_mean": float(returns.mean()),
        "return_std": float(returns.std()),
        "state_mean": states.mean(axis=0),
        "state_second_moment": (states**2).mean(axis=0),
        "action_mean": actions.mean(axis=0),
        "action_second_moment": (actions**2).mean(axis=0),
    }
    if reference is not None:
        rng = stream(seed, 0x4D)
        a = _traj_sample(ds, spec, max_samples, rng)
        b = _traj_sample(reference, _spec_of(reference), max_samples, rng)
        out["eps_offline_mmd"] = float(rbf_mmd2(a, b))
    return out


def _traj_sample(ds, spec, cap, rng):
    trajs = ds.all_trajectories(spec)
    if trajs.shape[0] > cap:
        trajs = trajs[rng.choice(trajs.shape[0], size=cap, replace=False)]
    return trajs


def _spec_of(ds: OfflineDataset) -> EnvSpec:
    if ds.env_name == "ising":
        return envmod.ising_spec(ds.N)
    return envmod.gs_spec(ds.N, H=ds.H)


# ---------------------------------------------------------------------------
# policy evaluation


def evaluate_policy(spec: EnvSpec, policy, episodes: int, seed: int,
                    warmup: int = 20) -> float:
    """Mean social welfare J over evaluation episodes."""
    js = []
    for e in range(episodes):
        ep = rollout_episode(spec, policy, seed=seed * 7_919 + e, warmup=warmup)
        js.append(envmod.episode_return(spec, ep.rewards)[1])
    return float(np.mean(js))


def evaluate_mfq_ising(spec: EnvSpec, policy: MFQPolicy, rounds: int, seed: int,
                       start_state: MeanFieldState | None = None):
    """Greedy rounds from the trained configuration; returns the xi trace."""
    rng = stream(seed, 0xA1)
    state = start_state if start_state is not None else envmod.reset(spec, seed)
    xis = []
    for _ in range(rounds):
        _, state = _ising_round(spec, policy, state, rng, None, 0.0,
                                temperature=0.0)
        xis.append(envmod.order_parameter(state))
    return np.array(xis)
