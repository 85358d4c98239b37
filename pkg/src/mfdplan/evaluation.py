"""Measurable quantities: normalized return, exploitability (exact and
learned), Wasserstein-2 estimators, propagation-of-chaos curves, the
effective-Lipschitz probe, and horizon-exponent fitting.

Conventions fixed here: the Ising exploitability oracle enumerates the 16
spin configurations of the 4-neighborhood with neighbors drawn iid from the
policy's stationary marginal, and the deviator acts after observing the
standing neighbor spins; the learned estimators roll out the same
mean-field abstraction so the oracle sandwich is exact up to MC noise.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import product as iproduct

import numpy as np
from scipy.optimize import linear_sum_assignment

from . import env as envmod, offline
from .env import EnvSpec
from .util import perm_mean, stream

__all__ = [
    "MetricRecord", "normalized_return", "suboptimality_gap",
    "ising_stationary_up_prob", "exploitability_exact_ising",
    "exploitability_learned", "ExploitEstimate",
    "w2", "sinkhorn_cost", "poc_curve", "loglog_slope",
    "effective_lipschitz", "make_reverse_drift_step", "horizon_fit",
    "transition_error", "gs_tuple_sampler", "iid_tuple_sampler",
]


@dataclass
class MetricRecord:
    name: str
    env: str
    N: int
    H: int
    seed: int
    split: str
    value: float
    std: float = 0.0
    slope: float = float("nan")
    ci_lo: float = float("nan")
    ci_hi: float = float("nan")

    def __post_init__(self):
        if not np.isfinite(self.value):
            raise ValueError("metric value must be finite")
        if np.isfinite(self.ci_lo) and np.isfinite(self.ci_hi) and self.ci_lo > self.ci_hi:
            raise ValueError("CI lower bound exceeds upper bound")


def normalized_return(j: float, j_rand: float, j_expert: float) -> float:
    """100 * (J - J_rand) / (J_expert - J_rand); may leave [0, 100]."""
    denom = j_expert - j_rand
    if abs(denom) < 1e-12:
        raise ValueError("degenerate normalization: J_expert == J_rand")
    return 100.0 * (j - j_rand) / denom


def suboptimality_gap(j: float, j_rand: float, j_expert: float) -> float:
    return 100.0 - normalized_return(j, j_rand, j_expert)


# ---------------------------------------------------------------------------
# Ising exploitability


def _policy_fn(policy, spec):
    """Normalize a policy to a callable mean -> P(spin +1)."""
    if callable(policy):
        return policy
    if isinstance(policy, offline.MFQPolicy):
        def fn(abar):
            states = np.array([[1.0, abar, 0.0, 0.0]])
            s_b, m_b = policy.observe_buckets(spec, states, None)
            q = policy.q[s_b[0], :, m_b[0]]
            if policy.temperature <= 0:
                return float(q[1] > q[0]) + 0.5 * float(q[1] == q[0])
            z = (q - q.max()) / policy.temperature
            e = np.exp(z)
            return float(e[1] / e.sum())
        return fn
    raise TypeError(f"unsupported policy type {type(policy)}")


NEIGHBOR_MEANS = np.array([-1.0, -0.5, 0.0, 0.5, 1.0])


def ising_stationary_up_prob(policy_fn, damping: float = 0.5, iters: int = 300) -> float:
    """Mean-field consistency fixed point p = E_{abar ~ Binom(p)} pi(+1 | abar)."""
    p = 0.5
    for _ in range(iters):
        probs = np.array([_binom4(k, p) for k in range(5)])
        p_next = float(sum(probs[k] * policy_fn(NEIGHBOR_MEANS[k]) for k in range(5)))
        p = (1 - damping) * p + damping * p_next
    return p


def _binom4(k: int, p: float) -> float:
    from math import comb

    return comb(4, k) * p**k * (1 - p) ** (4 - k)


def exploitability_exact_ising(spec: EnvSpec, policy) -> float:
    """Exact sup over the deviator's two actions, 2^4 neighbor configurations.

    Neighbors hold iid spins from the policy's stationary marginal; the
    deviator observes them before acting, as does the policy it replaces.
    """
    if spec.name != "ising":
        raise ValueError("exact exploitability oracle is Ising-only")
    fn = _policy_fn(policy, spec)
    p = ising_stationary_up_prob(fn)
    lam = spec.coupling
    br_value, pol_value = 0.0, 0.0
    for cfg in iproduct([-1.0, 1.0], repeat=4):
        s = sum(cfg)
        prob = np.prod([p if c > 0 else 1 - p for c in cfg])
        br_value += prob * 0.5 * lam * abs(s)
        mean_a = 2.0 * fn(s / 4.0) - 1.0
        pol_value += prob * 0.5 * lam * mean_a * s
    return float(br_value - pol_value)


@dataclass
class ExploitEstimate:
    estimate: float        # clamped at 0 for reporting
    raw: float
    mc_std: float
    method: str
    br_value: float
    policy_value: float
    iterations: int


def exploitability_learned(spec: EnvSpec, policy, method: str, budget: int,
                           seed: int, n_eval: int = 4000) -> ExploitEstimate:
    """Lower-bound exploitability from a learned best response.

    Ising runs the mean-field rollout (iid neighbors at the stationary
    marginal). `greedy` fits a mean-field Q by Monte-Carlo regression and
    best-responds one step; `reinforce` runs tabular policy gradient with
    the <1%-change-over-50-iterations stop.
    """
    if budget <= 0:
        raise ValueError("budget must be positive")
    if spec.name != "ising":
        return _exploitability_learned_generic(spec, policy, method, budget, seed, n_eval)
    fn = _policy_fn(policy, spec)
    p = ising_stationary_up_prob(fn)
    rng = stream(seed, 0xB0)
    lam = spec.coupling

    def rollout_s(n):
        spins = np.where(rng.random((n, 4)) < p, 1.0, -1.0)
        return spins.sum(axis=1)

    iterations = 0
    if method == "greedy":
        s = rollout_s(budget)
        a = np.where(rng.random(budget) < 0.5, 1.0, -1.0)
        r = 0.5 * lam * a * s
        qhat = np.zeros((2, 5))
        for b in range(5):
            for ai, av in enumerate([-1.0, 1.0]):
                m = (s == NEIGHBOR_MEANS[b] * 4.0) & (a == av)
                if m.any():
                    qhat[ai, b] = r[m].mean()
        br = lambda sv: np.where(qhat[1, _mean_bucket(sv)] >= qhat[0, _mean_bucket(sv)], 1.0, -1.0)
        iterations = 1
    elif method == "reinforce":
        theta = np.zeros(5)
        hist = []
        lr = 0.2
        for it in range(budget):
            s = rollout_s(64)
            b = _mean_bucket(s)
            prob_up = 1.0 / (1.0 + np.exp(-theta[b]))
            a = np.where(rng.random(64) < prob_up, 1.0, -1.0)
            r = 0.5 * lam * a * s
            adv = r - r.mean()
            grad_logp = np.where(a > 0, 1.0 - prob_up, -prob_up)
            np.add.at(theta, b, lr * adv * grad_logp)
            hist.append(r.mean())
            iterations = it + 1
            if it >= 50:
                recent, past = np.mean(hist[-25:]), np.mean(hist[-50:-25])
                if abs(recent - past) < 0.01 * max(abs(past), 1e-9):
                    break
        br = lambda sv: np.where(theta[_mean_bucket(sv)] >= 0, 1.0, -1.0)
    else:
        raise ValueError(f"unknown method {method!r}")

    s_eval = rollout_s(n_eval)
    r_br = 0.5 * lam * br(s_eval) * s_eval
    s_eval2 = rollout_s(n_eval)
    pi_up = np.array([fn(v / 4.0) for v in s_eval2])
    a_pi = np.where(rng.random(n_eval) < pi_up, 1.0, -1.0)
    r_pi = 0.5 * lam * a_pi * s_eval2
    raw = float(r_br.mean() - r_pi.mean())
    mc_std = float(np.sqrt(r_br.var() / n_eval + r_pi.var() / n_eval))
    return ExploitEstimate(estimate=max(raw, 0.0), raw=raw, mc_std=mc_std,
                           method=method, br_value=float(r_br.mean()),
                           policy_value=float(r_pi.mean()), iterations=iterations)


def _mean_bucket(s_sum):
    return np.clip(((np.asarray(s_sum) + 4.0) / 2.0).astype(int), 0, 4)


def _exploitability_learned_generic(spec, policy, method, budget, seed, n_eval):
    """Deviator vs N-1 conformers in the real environment (tabular learner)."""
    rng = stream(seed, 0xB1)
    vals = np.linspace(-1.0, 1.0, offline.GS_ACTION_LEVELS)
    n_a = vals.shape[0]

    def episode_return_for(dev_choice_fn, n_episodes):
        rets = np.zeros(n_episodes)
        for e in range(n_episodes):
            state = envmod.reset(spec, int(rng.integers(1 << 31)))
            prev_mean = np.zeros(spec.d_a)
            ret = 0.0
            for h in range(spec.H):
                acts = policy.act(spec, state.states, prev_mean, rng)
                choice = dev_choice_fn(state.states[0], prev_mean, h)
                acts[0] = 0.0
                acts[0, 0] = vals[choice]
                state, rew = envmod.step(spec, state, acts, rng)
                prev_mean = perm_mean(acts, axis=0)
                ret += spec.gamma**h * rew[0]
            rets[e] = ret
        return rets

    theta = np.zeros(n_a)
    hist = []
    iterations = 0
    for it in range(budget):
        probs = np.exp(theta - theta.max())
        probs /= probs.sum()
        choices = []

        def act_fn(s, m, h, _c=choices):
            c = int(rng.choice(n_a, p=probs))
            _c.append(c)
            return c

        rets = episode_return_for(act_fn, 4)
        baseline = rets.mean()
        per_ep = len(choices) // 4
        for e in range(4):
            adv = rets[e] - baseline
            for c in choices[e * per_ep:(e + 1) * per_ep]:
                g = -probs.copy()
                g[c] += 1.0
                theta += 0.5 * adv * g / max(per_ep, 1)
        hist.append(rets.mean())
        iterations = it + 1
        if it >= 50:
            recent, past = np.mean(hist[-25:]), np.mean(hist[-50:-25])
            if abs(recent - past) < 0.01 * max(abs(past), 1e-9):
                break
    best = int(np.argmax(theta))
    r_br = episode_return_for(lambda s, m, h: best, n_eval)
    r_pi = np.zeros(n_eval)
    for e in range(n_eval):
        ep = offline.rollout_episode(spec, policy, seed=seed * 31 + e, warmup=0)
        r_pi[e] = envmod.episode_return(spec, ep.rewards)[0][0]
    raw = float(r_br.mean() - r_pi.mean())
    mc_std = float(np.sqrt(r_br.var() / n_eval + r_pi.var() / n_eval))
    return ExploitEstimate(estimate=max(raw, 0.0), raw=raw, mc_std=mc_std,
                           method=method, br_value=float(r_br.mean()),
                           policy_value=float(r_pi.mean()), iterations=iterations)


# ---------------------------------------------------------------------------
# Wasserstein estimators


def w2(a: np.ndarray, b: np.ndarray, method: str = "exact_assignment",
       n_projections: int = 128, sinkhorn_iters: int = 10,
       sinkhorn_reg_scale: float = 0.05, seed: int = 0) -> float:
    """Empirical 2-Wasserstein distance between equal-size samples."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim == 1:
        a = a[:, None]
    if b.ndim == 1:
        b = b[:, None]
    if a.shape[1] != b.shape[1]:
        raise ValueError("dimension mismatch")
    if a.shape[0] != b.shape[0]:
        raise ValueError("equal sample sizes required")
    if method == "exact_assignment":
        if max(a.shape[0], b.shape[0]) > 512:
            raise ValueError("exact assignment capped at 512 points per side")
        cost = ((a[:, None, :] - b[None, :, :]) ** 2).sum(-1)
        ri, ci = linear_sum_assignment(cost)
        return float(np.sqrt(cost[ri, ci].mean()))
    if method == "sliced":
        rng = stream(seed, 0x51)
        dirs = rng.standard_normal((n_projections, a.shape[1]))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        pa = np.sort(a @ dirs.T, axis=0)
        pb = np.sort(b @ dirs.T, axis=0)
        return float(np.sqrt(((pa - pb) ** 2).mean(axis=0).mean()))
    if method == "sinkhorn":
        return float(np.sqrt(max(sinkhorn_cost(a, b, sinkhorn_iters,
                                               sinkhorn_reg_scale), 0.0)))
    raise ValueError(f"unknown method {method!r}")


def sinkhorn_cost(a: np.ndarray, b: np.ndarray, iters: int = 10,
                  reg_scale: float = 0.05) -> float:
    """Entropic OT transport cost <P, C> after a fixed number of iterations."""
    cost = ((a[:, None, :] - b[None, :, :]) ** 2).sum(-1)
    reg = max(reg_scale * float(cost.mean()), 1e-12)
    log_k = -cost / reg
    m, n = cost.shape
    log_u = np.zeros(m)
    log_v = np.zeros(n)
    log_mu, log_nu = -np.log(m), -np.log(n)
    from scipy.special import logsumexp

    for _ in range(iters):
        log_u = log_mu - logsumexp(log_k + log_v[None, :], axis=1)
        log_v = log_nu - logsumexp(log_k + log_u[:, None], axis=0)
    plan = np.exp(log_u[:, None] + log_k + log_v[None, :])
    return float((plan * cost).sum())


# ---------------------------------------------------------------------------
# propagation-of-chaos measurement


def gs_tuple_sampler(steps: int = 5, act_noise: float = 1.0, gain: float = 1.5,
                     n_runs: int = 2):
    """M-tuple sampler over mean-field-coupled GS particle runs.

    Agents push the aggregate of first-action coordinates toward the target
    through shared feedback on the realized aggregate, so every agent
    carries an O(1/sqrt(N)) collective fluctuation. Tuples are M-subsets
    (distinct agents) of a small fixed number of independent N-agent runs:
    the run count is held constant across N, so the M-marginal is observed
    through N*n_runs distinct particles and its deviation from the product
    limit decays as Theta(1/N), the quantity the PoC slope is fit on.
    """

    def sample(n_agents: int, m: int, n_tuples: int, seed: int) -> np.ndarray:
        spec = envmod.gs_spec(max(n_agents, 2), H=steps)
        rng = stream(seed, 0xD0, n_agents)
        runs = [_gs_run_features(spec, steps, act_noise, gain, rng)
                for _ in range(n_runs)]
        out = np.empty((n_tuples, m))
        for i in range(n_tuples):
            feats = runs[int(rng.integers(n_runs))]
            idx = rng.choice(n_agents, size=m, replace=False)
            out[i] = feats[idx]
        return out

    return sample


def _gs_run_features(spec, steps, act_noise, gain, rng):
    state = envmod.reset(spec, int(rng.integers(1 << 31)))
    x_prev = 0.0
    for _ in range(steps):
        acts = np.zeros((spec.N, spec.d_a))
        acts[:, 0] = gain * (spec.mu_target - x_prev) / spec.N + \
            act_noise * rng.standard_normal(spec.N)
        state, _ = envmod.step(spec, state, acts, rng)
        x_prev = float(acts[:, 0].sum())
    return state.states[:, 0]


def iid_tuple_sampler(ref_sampler=None, steps: int = 5, act_noise: float = 0.6,
                      gain: float = 1.0, pool_n: int = 2048):
    """Product-measure tuples: coordinates drawn independently from the
    limiting one-particle marginal (approximated by a large-N pool). The
    M-marginal of non-interacting particles IS this product law, so the
    measured curve is flat in N."""

    pool_cache: dict = {}

    def sample(n_agents: int, m: int, n_tuples: int, seed: int) -> np.ndarray:
        rng = stream(seed, 0xD1, 7)
        if "pool" not in pool_cache:
            spec = envmod.gs_spec(pool_n, H=steps)
            rng_pool = stream(911, 0xD2)
            pool = np.concatenate([
                _gs_run_features(spec, steps, act_noise, gain, rng_pool)
                for _ in range(4)])
            pool_cache["pool"] = pool
        pool = pool_cache["pool"]
        idx = rng.integers(0, pool.shape[0], size=(n_tuples, m))
        return pool[idx]

    return sample


def poc_curve(tuple_sampler, ref_sampler, n_list, m: int, seeds,
              n_tuples: int = 2048, method: str = "sliced", seed_ref: int = 77,
              batches: int = 8):
    """Per-N W2^2 between M-marginal samples and product-reference tuples,
    plus the pooled log-log slope of W2^2 vs N. Needs >= 3 seeds.

    Each (N, seed) value averages `batches` independent measurements, which
    controls the chi-square-like spread of the finite-run estimates without
    diluting their 1/N mean.
    """
    seeds = list(seeds)
    if len(seeds) < 3:
        raise ValueError("need at least 3 seeds")
    if m > min(n_list):
        raise ValueError("M must be <= min N")
    rows = []
    for n in n_list:
        vals = []
        for sd in seeds:
            acc = 0.0
            for bi in range(batches):
                a = tuple_sampler(n, m, n_tuples, sd * 1013 + bi)
                b = ref_sampler(n, m, n_tuples, seed_ref * 1009 + sd * 31 + bi * 7 + n)
                acc += w2(a, b, method=method) ** 2
            vals.append(acc / batches)
        rows.append({"N": n, "w2sq_mean": float(np.mean(vals)),
                     "w2sq_std": float(np.std(vals)), "values": vals})
    xs = np.concatenate([[r["N"]] * len(seeds) for r in rows]).astype(float)
    ys = np.concatenate([r["values"] for r in rows])
    slope, intercept = loglog_slope(xs, ys)
    return {"rows": rows, "slope": slope, "intercept": intercept}


def loglog_slope(x, y):
    lx, ly = np.log(np.asarray(x, dtype=float)), np.log(np.asarray(y, dtype=float))
    coef = np.polyfit(lx, ly, 1)
    return float(coef[0]), float(coef[1])


# ---------------------------------------------------------------------------
# effective-Lipschitz probe


def make_reverse_drift_step(schedule, score_fn, dt: float,
                            include_forward_drift: bool = True):
    """Deterministic part of one reverse step: x - dt * (f_t(x) - g^2 * score)."""

    def step(t, x):
        g2 = float(schedule.beta(t))
        f = -0.5 * g2 * x if include_forward_drift else 0.0
        return x - dt * (f - g2 * np.asarray(score_fn(t, x)))

    return step


def effective_lipschitz(step_fn, probes: np.ndarray, times, horizon: int = 1,
                        fd_h: float = 1e-5, max_iters: int = 100,
                        tol: float = 1e-10):
    """sup over probes/times of the spectral norm of the linearized step map.

    The Jacobian is assembled from central-difference JVPs along the basis;
    its top singular value comes from power iteration on J^T J (at most
    `max_iters`; non-convergence is flagged in the result).
    """
    probes = np.atleast_2d(np.asarray(probes, dtype=np.float64))
    if probes.shape[0] == 0:
        raise ValueError("probe set must be nonempty")
    d = probes.shape[1]
    eye = np.eye(d)
    sup, table, all_converged = 0.0, [], True
    for t in np.atleast_1d(times):
        for x in probes:
            batch = np.concatenate([x[None, :] + fd_h * eye, x[None, :] - fd_h * eye])
            out = np.asarray(step_fn(float(t), batch))
            jac = (out[:d] - out[d:]).T / (2.0 * fd_h)
            sigma, converged = _power_top_sv(jac, max_iters, tol)
            all_converged &= converged
            table.append({"t": float(t), "sigma": sigma, "converged": converged})
            sup = max(sup, sigma)
    return {"L_eff": sup, "L_eff_H": sup * horizon, "table": table,
            "converged": all_converged}


def _power_top_sv(jac: np.ndarray, max_iters: int, tol: float):
    g = jac.T @ jac
    rng = np.random.default_rng(0)
    v = rng.standard_normal(g.shape[0])
    v /= np.linalg.norm(v)
    lam = 0.0
    for _ in range(max_iters):
        w = g @ v
        nw = np.linalg.norm(w)
        if nw == 0.0:
            return 0.0, True
        v = w / nw
        lam_new = float(v @ (g @ v))
        if abs(lam_new - lam) <= tol * max(abs(lam_new), 1e-30):
            return float(np.sqrt(max(lam_new, 0.0))), True
        lam = lam_new
    return float(np.sqrt(max(lam, 0.0))), False


# ---------------------------------------------------------------------------
# horizon-exponent fit


def horizon_fit(h_values, gaps_by_seed, window, n_boot: int = 10_000,
                seed: int = 0):
    """Fit log(gap) = a + b log(H) on the window, per seed and pooled,
    with a bootstrap CI over seed resamples."""
    h_values = np.asarray(h_values, dtype=float)
    gaps = np.atleast_2d(np.asarray(gaps_by_seed, dtype=float))
    if (gaps <= 0).any():
        raise ValueError("gaps must be positive for the log-log fit")
    mask = np.isin(h_values, np.asarray(window, dtype=float))
    if mask.sum() < 2:
        raise ValueError("need >= 2 window points per seed")
    lx = np.log(h_values[mask])
    ly = np.log(gaps[:, mask])

    def fit(ys):
        coef = np.polyfit(np.tile(lx, ys.shape[0]), ys.reshape(-1), 1)
        return float(coef[0]), float(coef[1])

    per_seed = [fit(ly[i:i + 1]) for i in range(ly.shape[0])]
    pooled_b, pooled_a = fit(ly)
    rng = np.random.default_rng(seed)
    boots = np.empty(n_boot)
    for i in range(n_boot):
        idx = rng.integers(0, ly.shape[0], size=ly.shape[0])
        boots[i] = fit(ly[idx])[0]
    lo, hi = np.percentile(boots, [2.5, 97.5])
    return {
        "exponent": pooled_b,
        "intercept": pooled_a,
        "per_seed": [b for b, _ in per_seed],
        "per_seed_mean": float(np.mean([b for b, _ in per_seed])),
        "per_seed_std": float(np.std([b for b, _ in per_seed])),
        "ci": (float(lo), float(hi)),
    }


def transition_error(record: dict, spec: EnvSpec) -> float:
    """Mean per-step dynamics residual of an execute() episode record."""
    if "transition_errors" not in record:
        raise ValueError("record is missing transition diagnostics")
    return float(np.mean(record["transition_errors"]))
