"""Score network s_theta = A + B[nu], analytic Gaussian oracle, value model.

A is an MLP over (trajectory, sinusoidal time embedding). The interaction
term averages pairwise messages B(tau_i, tau_j, t) weighted by a kernel
that decomposes across MDP steps:
K(tau_i, tau_j) = (1/H) sum_h k(s_h_i, s_h_j, ctx_h), with k a bounded
exp-kernel on projected states gated by the mean-field context. Outputs are
exactly permutation-equivariant: particles are processed in a canonical
(lexicographic) order so float reduction order cannot depend on input order.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, concat
from .env import EnvSpec, action_slices, state_slices
from .schedule import DiffusionSchedule
from .util import canonical_order, crc32_of

__all__ = [
    "ModelConfig", "ScoreModel", "ValueModel", "ValueConfig", "Normalizer",
    "analytic_score", "train_value", "value_of", "value_gradient",
    "save_checkpoint", "load_checkpoint", "time_embedding", "adam_step",
]

CHECKPOINT_MAGIC = b"MFCK"
CHECKPOINT_VERSION = 1


# ---------------------------------------------------------------------------
# parameters


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int, shape=None):
    lim = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, size=shape or (fan_in, fan_out))


def time_embedding(t: float, width: int) -> np.ndarray:
    """Sinusoidal embedding of a scalar diffusion time."""
    half = width // 2
    freqs = 2.0 ** np.arange(half)
    ang = freqs * float(t)
    return np.concatenate([np.sin(ang), np.cos(ang)])


@dataclass
class ModelConfig:
    d_s: int
    d_a: int
    H: int
    hidden: int = 256
    time_embed: int = 32
    pair_hidden: int = 32
    kernel_proj: int = 8
    knn: int | None = None  # interaction neighbors for N > 512; None = full mean

    @property
    def d_tau(self) -> int:
        return (self.d_s + self.d_a) * self.H + self.d_s


class ScoreModel:
    """Mean-field score network with named parameter segments.

    The heads predict the injected noise (A and the pairwise interaction
    messages live on the eps scale, O(1) for any t); the score field is
    -(A + B[nu]) / sigma(t). Raw-score heads would have to span the
    sigma(t_min)^-1 ~ 1e2 dynamic range and cannot fit the low-noise window.
    """

    def __init__(self, cfg: ModelConfig, schedule=None, seed: int = 0):
        self.cfg = cfg
        self.schedule = schedule
        rng = np.random.default_rng(seed)
        d, h, q, p = cfg.d_tau, cfg.hidden, cfg.pair_hidden, cfg.kernel_proj
        te = cfg.time_embed
        ctx_dim = 2 * cfg.d_s
        init = {
            "a_w0": glorot(rng, d + te, h), "a_b0": np.zeros(h),
            "a_w1": glorot(rng, h, h), "a_b1": np.zeros(h),
            "a_w2": glorot(rng, h, d), "a_b2": np.zeros(d),
            # zero-initialized time-conditioned linear bypass: the dominant
            # mode of the noise-prediction target is c(t) * x, which the
            # MLP alone is too slow to calibrate within a desk-scale budget
            "a_skip": np.zeros((te, 1)),
            "b_wa": glorot(rng, d, q), "b_wb": glorot(rng, d, q),
            "b_wt": glorot(rng, te, q), "b_b": np.zeros(q),
            "b_wout": glorot(rng, q, d), "b_bout": np.zeros(d),
            "k_proj": glorot(rng, cfg.d_s, p),
            "k_rho": np.array([0.378]),  # softplus(rho) + 0.1 ~ 1.0 bandwidth
            "k_gate_w": glorot(rng, ctx_dim, 1),
            "k_gate_b": np.zeros(1),
        }
        self.params = {k: Tensor(v, requires_grad=True) for k, v in init.items()}
        # trajectory column indices of the H per-step state blocks
        self._sidx = None

    def state_cols(self, spec_like=None) -> np.ndarray:
        if self._sidx is None:
            stride = self.cfg.d_s + self.cfg.d_a
            starts = np.arange(self.cfg.H) * stride
            self._sidx = (starts[:, None] + np.arange(self.cfg.d_s)[None, :]).reshape(-1)
        return self._sidx

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    # -- forward -----------------------------------------------------------

    def _sigma(self, t: float) -> float:
        if self.schedule is None:
            return 1.0
        return float(max(self.schedule.sigma(t), 1e-4))

    def score(self, t: float, trajs, train: bool = False,
              return_parts: bool = False):
        """Score field for an (n, D_tau) particle set at diffusion time t.

        Returns a Tensor when train=True (gradients w.r.t. parameters),
        else a plain ndarray.
        """
        x_np = trajs.data if isinstance(trajs, Tensor) else np.asarray(trajs, dtype=np.float64)
        if x_np.ndim == 1:
            raise ValueError("score expects a 2-D particle set")
        n = x_np.shape[0]
        order = canonical_order(x_np)
        inverse = np.empty(n, dtype=int)
        inverse[order] = np.arange(n)

        x = trajs if isinstance(trajs, Tensor) else Tensor(x_np)
        xc = x.take_rows(order)

        emb = time_embedding(t, self.cfg.time_embed)
        p = self.params
        a_in = concat([xc, Tensor(np.broadcast_to(emb, (n, emb.shape[0])).copy())], axis=1)
        h0 = (a_in @ p["a_w0"] + p["a_b0"]).silu()
        h1 = (h0 @ p["a_w1"] + p["a_b1"]).silu()
        skip = Tensor(emb.reshape(1, -1)) @ p["a_skip"]
        a_out = h1 @ p["a_w2"] + p["a_b2"] + skip.reshape(1, 1) * xc

        if n == 1:
            out = a_out
            inter = Tensor(np.zeros_like(a_out.data))
        else:
            inter = self._interaction(t, xc, emb, n)
            out = a_out + inter
        scale = -1.0 / self._sigma(t)
        result = out.take_rows(inverse) * scale
        if return_parts:
            a_part = a_out.take_rows(inverse) * scale
            b_part = inter.take_rows(inverse) * scale
            return (result, a_part, b_part) if train else (
                result.data, a_part.data, b_part.data)
        return result if train else result.data

    def _interaction(self, t: float, xc: Tensor, emb: np.ndarray, n: int) -> Tensor:
        cfg = self.cfg
        p = self.params
        sidx = self.state_cols()
        xs = xc[:, sidx].reshape(n, cfg.H, cfg.d_s)

        # exp-kernel on projected per-step states
        proj = xs @ p["k_proj"]                     # (n, H, kp)
        proj_h = proj.swapaxes(0, 1)                # (H, n, kp)
        gram = proj_h @ proj_h.swapaxes(1, 2)       # (H, n, n)
        sq = proj_h.square().sum(axis=2)            # (H, n)
        d2 = sq.reshape(cfg.H, n, 1) + sq.reshape(cfg.H, 1, n) - 2.0 * gram
        bw = p["k_rho"].softplus() + 0.1
        k_dist = (-d2 / bw.square()).exp()          # (H, n, n)

        # mean-field context gate, one scalar per MDP step
        ctx = np.concatenate([xs.data.mean(axis=0), (xs.data**2).mean(axis=0)],
                             axis=1)                # (H, 2*d_s)
        gate = (Tensor(ctx) @ p["k_gate_w"] + p["k_gate_b"]).sigmoid()  # (H, 1)
        kern = (k_dist * gate.reshape(cfg.H, 1, 1)).mean(axis=0)        # (n, n)

        mask = 1.0 - np.eye(n)
        if cfg.knn is not None and n - 1 > cfg.knn:
            dist = ((xc.data[:, None, :] - xc.data[None, :, :]) ** 2).sum(-1)
            np.fill_diagonal(dist, np.inf)
            keep = np.argsort(dist, axis=1)[:, :cfg.knn]
            mask = np.zeros((n, n))
            np.put_along_axis(mask, keep, 1.0, axis=1)
        kern = kern * Tensor(mask)
        denom = mask.sum(axis=1, keepdims=True)

        # pairwise messages, aggregated before the output projection
        e = xc @ p["b_wa"]
        f = xc @ p["b_wb"]
        u = Tensor(emb.reshape(1, -1)) @ p["b_wt"] + p["b_b"]
        pair = (e.reshape(n, 1, cfg.pair_hidden) + f.reshape(1, n, cfg.pair_hidden)
                + u.reshape(1, 1, cfg.pair_hidden)).silu()   # (n, n, q)
        agg = (kern.reshape(n, n, 1) * pair).sum(axis=1)     # (n, q)
        ksum = kern.sum(axis=1, keepdims=True)               # (n, 1)
        return (agg @ p["b_wout"] + ksum * p["b_bout"]) / Tensor(denom)

    def interaction_field(self, t: float, trajs: np.ndarray) -> np.ndarray:
        """B_theta[nu] alone (used by the agent-branching map)."""
        n = np.asarray(trajs).shape[0]
        if n == 1:
            return np.zeros_like(trajs)
        _, _, b_part = self.score(t, trajs, train=False, return_parts=True)
        return b_part


# ---------------------------------------------------------------------------
# analytic oracle


def analytic_score(schedule: DiffusionSchedule, t: float, x: np.ndarray) -> np.ndarray:
    """Exact score of the VP-noised unit-isotropic Gaussian: -x / marginal_var(t)."""
    return -np.asarray(x) / schedule.marginal_var(t)


class AnalyticScoreModel:
    """Oracle with the ScoreModel interface (zero interaction)."""

    def __init__(self, schedule: DiffusionSchedule):
        self.schedule = schedule

    def score(self, t, trajs, train=False, return_parts=False):
        s = analytic_score(self.schedule, t, np.asarray(trajs, dtype=np.float64))
        if return_parts:
            return s, s, np.zeros_like(s)
        return s

    def interaction_field(self, t, trajs):
        return np.zeros_like(np.asarray(trajs, dtype=np.float64))


# ---------------------------------------------------------------------------
# value estimator


@dataclass
class ValueConfig:
    d_s: int
    d_a: int
    hidden: int = 64
    gamma: float = 1.0
    lr: float = 1e-3
    batch: int = 1024
    epochs: int = 3
    seed: int = 0


class ValueModel:
    """Q-hat over (state, action, mean-field summary); V-hat sums gamma^h Q-hat."""

    def __init__(self, cfg: ValueConfig):
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        # own (s, a) + flow context (mean s, mean a, normalized step index)
        d_in = cfg.d_s + cfg.d_a + cfg.d_s + cfg.d_a + 1
        h = cfg.hidden
        init = {
            "v_w0": glorot(rng, d_in, h), "v_b0": np.zeros(h),
            "v_w1": glorot(rng, h, h), "v_b1": np.zeros(h),
            "v_w2": glorot(rng, h, 1), "v_b2": np.zeros(1),
        }
        self.params = {k: Tensor(v, requires_grad=True) for k, v in init.items()}

    def qhat(self, inputs, train: bool = False):
        x = inputs if isinstance(inputs, Tensor) else Tensor(np.asarray(inputs, dtype=np.float64))
        p = self.params
        h0 = (x @ p["v_w0"] + p["v_b0"]).silu()
        h1 = (h0 @ p["v_w1"] + p["v_b1"]).silu()
        out = h1 @ p["v_w2"] + p["v_b2"]
        return out if train else out.data[:, 0]

    def qhat_input_grad(self, inputs: np.ndarray) -> np.ndarray:
        """d qhat / d inputs, closed-form chain through the two SiLU layers
        (the planner calls this every denoising step; no tape needed)."""
        p = {k: t.data for k, t in self.params.items()}
        x = np.asarray(inputs, dtype=np.float64)
        z0 = x @ p["v_w0"] + p["v_b0"]
        s0 = 1.0 / (1.0 + np.exp(-np.clip(z0, -500, 500)))
        h0 = z0 * s0
        z1 = h0 @ p["v_w1"] + p["v_b1"]
        s1 = 1.0 / (1.0 + np.exp(-np.clip(z1, -500, 500)))
        d1 = (s1 + z1 * s1 * (1 - s1)) * p["v_w2"][:, 0][None, :]
        d0 = (s0 + z0 * s0 * (1 - s0)) * (d1 @ p["v_w1"].T)
        return d0 @ p["v_w0"].T

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None


def _value_inputs(spec: EnvSpec, trajs: np.ndarray, mf_flow: np.ndarray):
    """Stack (s_h, a_h, ctx_h, h/H) rows for all agents and steps.

    trajs: (n, D_tau); mf_flow: (H, d_s + d_a) context rows, held fixed.
    Returns (n*H, d_in) with step-major grouping per agent.
    """
    n = trajs.shape[0]
    s_idx, a_idx = state_slices(spec), action_slices(spec)
    ss = trajs[:, s_idx[:-1].reshape(-1)].reshape(n, spec.H, spec.d_s)
    aa = trajs[:, a_idx.reshape(-1)].reshape(n, spec.H, spec.d_a)
    ctx = np.broadcast_to(mf_flow, (n, spec.H, mf_flow.shape[1]))
    hh = np.broadcast_to((np.arange(spec.H) / spec.H)[None, :, None],
                         (n, spec.H, 1))
    return np.concatenate([ss, aa, ctx, hh], axis=2).reshape(n * spec.H, -1)


def value_of(vm: ValueModel, spec: EnvSpec, trajs: np.ndarray,
             mf_flow: np.ndarray) -> np.ndarray:
    """V-hat(tau, mu-bar) = sum_h gamma^h Q-hat per trajectory; (n,) array."""
    trajs = np.atleast_2d(trajs)
    q = vm.qhat(_value_inputs(spec, trajs, mf_flow)).reshape(trajs.shape[0], spec.H)
    disc = vm.cfg.gamma ** np.arange(spec.H)
    return q @ disc


def value_gradient(vm: ValueModel, spec: EnvSpec, trajs: np.ndarray,
                   mf_flow: np.ndarray) -> np.ndarray:
    """d V-hat / d tau on the own-trajectory coordinates, context held fixed."""
    single = np.asarray(trajs).ndim == 1
    trajs = np.atleast_2d(np.asarray(trajs, dtype=np.float64))
    n = trajs.shape[0]
    g = vm.qhat_input_grad(_value_inputs(spec, trajs, mf_flow)).reshape(n, spec.H, -1)
    disc = vm.cfg.gamma ** np.arange(spec.H)
    g *= disc[None, :, None]
    grad = np.zeros_like(trajs)
    s_idx, a_idx = state_slices(spec), action_slices(spec)
    for h in range(spec.H):
        grad[:, s_idx[h]] += g[:, h, :spec.d_s]
        grad[:, a_idx[h]] += g[:, h, spec.d_s:spec.d_s + spec.d_a]
    return grad[0] if single else grad


def adam_step(params: dict, state: dict, lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
    state.setdefault("t", 0)
    state["t"] += 1
    t = state["t"]
    for name, p in params.items():
        if p.grad is None:
            continue
        m = state.setdefault("m_" + name, np.zeros_like(p.data))
        v = state.setdefault("v_" + name, np.zeros_like(p.data))
        m *= beta1
        m += (1 - beta1) * p.grad
        v *= beta2
        v += (1 - beta2) * p.grad**2
        mhat = m / (1 - beta1**t)
        vhat = v / (1 - beta2**t)
        p.data = p.data - lr * mhat / (np.sqrt(vhat) + eps)


def train_value(dataset, spec: EnvSpec, cfg: ValueConfig | None = None) -> ValueModel:
    """TD(0) regression of Q-hat on dataset transitions (SARSA targets)."""
    cfg = cfg or ValueConfig(d_s=spec.d_s, d_a=spec.d_a, gamma=spec.gamma)
    vm = ValueModel(cfg)
    rng = np.random.default_rng(cfg.seed)

    rows, rows_next, rewards, nonterm = _td_rows(dataset, spec)
    n = rows.shape[0]
    state: dict = {}
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        for lo in range(0, n, cfg.batch):
            idx = order[lo:lo + cfg.batch]
            q_next = vm.qhat(rows_next[idx])
            target = rewards[idx] + cfg.gamma * nonterm[idx] * q_next
            if not np.isfinite(target).all():
                raise FloatingPointError("value training diverged")
            vm.zero_grad()
            pred = vm.qhat(rows[idx], train=True)
            err = pred.reshape(len(idx)) - Tensor(target)
            loss = err.square().mean()
            loss.backward()
            adam_step(vm.params, state, cfg.lr)
    return vm


def _td_rows(dataset, spec: EnvSpec):
    rows, rows_next, rewards, nonterm = [], [], [], []
    for ep in dataset.episodes:
        ctx = np.array([np.concatenate([ep.states[h].mean(axis=0),
                                        ep.actions[h].mean(axis=0)])
                        for h in range(spec.H)])
        for h in range(spec.H):
            cur = np.concatenate([ep.states[h], ep.actions[h],
                                  np.broadcast_to(ctx[h], (spec.N, ctx.shape[1])),
                                  np.full((spec.N, 1), h / spec.H)], axis=1)
            if h + 1 < spec.H:
                nxt = np.concatenate([ep.states[h + 1], ep.actions[h + 1],
                                      np.broadcast_to(ctx[h + 1], (spec.N, ctx.shape[1])),
                                      np.full((spec.N, 1), (h + 1) / spec.H)], axis=1)
                term = 1.0
            else:
                nxt = np.zeros_like(cur)
                term = 0.0
            rows.append(cur)
            rows_next.append(nxt)
            rewards.append(ep.rewards[h])
            nonterm.append(np.full(spec.N, term))
    return (np.concatenate(rows), np.concatenate(rows_next),
            np.concatenate(rewards), np.concatenate(nonterm))


# ---------------------------------------------------------------------------
# data normalization


@dataclass
class Normalizer:
    mean: np.ndarray
    scale: np.ndarray

    @classmethod
    def fit(cls, trajs: np.ndarray) -> "Normalizer":
        mean = trajs.mean(axis=0)
        std = trajs.std(axis=0)
        scale = np.where(std > 1e-8, std, 1.0)
        return cls(mean=mean, scale=scale)

    @classmethod
    def identity(cls, dim: int) -> "Normalizer":
        return cls(mean=np.zeros(dim), scale=np.ones(dim))

    def normalize(self, x):
        return (x - self.mean) / self.scale

    def denormalize(self, x):
        return x * self.scale + self.mean


# ---------------------------------------------------------------------------
# checkpoint format: MFCK | u32 version | u32 json_len | json | f32 payload | crc32


def save_checkpoint(path, arrays: dict, meta: dict) -> None:
    segments = []
    payload = bytearray()
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name], dtype="<f4")
        segments.append({"name": name, "shape": list(arr.shape)})
        payload += arr.tobytes()
    header = json.dumps({"meta": meta, "segments": segments},
                        sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<II", CHECKPOINT_VERSION, len(header)))
        f.write(header)
        f.write(payload)
        f.write(struct.pack("<I", crc32_of(bytes(payload))))


def load_checkpoint(path):
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise ValueError("bad magic: not an MFCK checkpoint")
    if len(raw) < 16:
        raise ValueError("checkpoint truncated")
    version, hlen = struct.unpack("<II", raw[4:12])
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    header = json.loads(raw[12:12 + hlen].decode("utf-8"))
    sizes = [int(np.prod(seg["shape"])) * 4 for seg in header["segments"]]
    payload = raw[12 + hlen:12 + hlen + sum(sizes)]
    if len(payload) != sum(sizes) or len(raw) < 12 + hlen + sum(sizes) + 4:
        raise ValueError("checkpoint truncated")
    (crc_stored,) = struct.unpack("<I", raw[12 + hlen + sum(sizes):12 + hlen + sum(sizes) + 4])
    if crc32_of(payload) != crc_stored:
        raise ValueError("checkpoint payload checksum mismatch")
    arrays, off = {}, 0
    for seg, size in zip(header["segments"], sizes):
        arrays[seg["name"]] = np.frombuffer(payload[off:off + size], dtype="<f4").astype(
            np.float64).reshape(seg["shape"])
        off += size
    return arrays, header["meta"]
