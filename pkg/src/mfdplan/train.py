"""MF-VSM loss and the hierarchical subdivision training loop.

The score target is the denoising identity -eps/std(t); the value term
aligns the score with the reward gradient at the noised input, weighted
lambda/alpha. Each episode contributes K+1 level losses (population N_k,
time uniform in the level window) combined with weights b^-k (practical)
or (b*sqrt(N_{k+1}))^-k (theoretical).
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import env as envmod
from .autodiff import Tensor
from .model import Normalizer, ScoreModel, adam_step
from .schedule import DiffusionSchedule, SubdivisionSchedule, level_weights
from .util import fmt_float, stream

__all__ = ["TrainConfig", "forward_noise", "mfvsm_loss", "train_epoch",
           "score_error", "Trainer"]


@dataclass
class TrainConfig:
    alpha: float = 1.0          # value temperature
    lamb: float = 0.1           # value weight (lambda is reserved)
    weighting: str = "practical_b_pow"
    epochs: int = 20
    batch_episodes: int = 1     # episodes per optimizer step
    lr: float = 1e-3
    grad_clip: float = 10.0     # global-norm clip; the low-noise window has
                                # heavy-tailed score targets
    seed: int = 0
    log_walltime: bool = False


def forward_noise(schedule: DiffusionSchedule, trajs: np.ndarray, t: float,
                  rng: np.random.Generator):
    """Closed-form VP marginal: alpha(t)*tau0 + std(t)*eps; returns (noised, eps)."""
    trajs = np.asarray(trajs, dtype=np.float64)
    eps = rng.standard_normal(trajs.shape)
    std = np.sqrt(max(schedule.marginal_var(t) - schedule.alpha(t) ** 2, 0.0))
    return schedule.alpha(t) * trajs + std * eps, eps


def mfvsm_loss(model, schedule: DiffusionSchedule, spec, noised: np.ndarray,
               t: float, eps: np.ndarray, alpha: float, lamb: float,
               train: bool = True):
    """Two-term MF-VSM: ||s - target||^2 + (lambda/alpha)||s - grad R||^2.

    Both terms are means over agents and coordinates; the reward gradient is
    evaluated at the noised batch with its own empirical mean field.
    """
    std = np.sqrt(max(schedule.marginal_var(t) - schedule.alpha(t) ** 2, 1e-12))
    target = -eps / std
    if target.shape != noised.shape:
        raise ValueError("eps/noised shape mismatch")
    s = model.score(t, noised, train=train)
    if train:
        resid = s - Tensor(target)
        loss = resid.square().mean()
        if lamb > 0:
            grad_r = envmod.reward_gradient(spec, noised)
            loss = loss + (lamb / alpha) * (s - Tensor(grad_r)).square().mean()
        return loss
    resid = s - target
    val = float((resid**2).mean())
    if lamb > 0:
        grad_r = envmod.reward_gradient(spec, noised)
        val += (lamb / alpha) * float(((s - grad_r) ** 2).mean())
    return val


class Trainer:
    """Owns the optimizer state across epochs (checkpoint-resumable)."""

    def __init__(self, model: ScoreModel, schedule: DiffusionSchedule,
                 subdivision: SubdivisionSchedule, spec, config: TrainConfig,
                 normalizer: Normalizer):
        self.model = model
        self.schedule = schedule
        self.subdivision = subdivision
        self.spec = spec
        self.config = config
        self.normalizer = normalizer
        self.opt_state: dict = {}
        self.epoch = 0

    def run_epoch(self, dataset, weight_override=None):
        report = train_epoch(self.model, dataset, self.spec, self.schedule,
                             self.subdivision, self.config, self.normalizer,
                             epoch=self.epoch, opt_state=self.opt_state,
                             weight_override=weight_override)
        self.epoch += 1
        return report


def train_epoch(model: ScoreModel, dataset, spec, schedule: DiffusionSchedule,
                subdivision: SubdivisionSchedule, config: TrainConfig,
                normalizer: Normalizer, epoch: int = 0, opt_state: dict | None = None,
                weight_override=None):
    """One pass over the dataset; returns per-level mean losses.

    Deterministic given (dataset, config, seed, epoch): episode order,
    subsampling, time draws and noise all come from one keyed stream.
    """
    rng = stream(config.seed, 0x7E, epoch)
    opt_state = opt_state if opt_state is not None else {}
    weights = (list(weight_override) if weight_override is not None
               else level_weights(subdivision, config.weighting))
    n_eps = len(dataset.episodes)
    order = rng.permutation(n_eps)
    level_losses = np.zeros(subdivision.K + 1)
    level_counts = np.zeros(subdivision.K + 1)

    pending = 0
    model.zero_grad()
    for pos, ep_i in enumerate(order):
        ep = dataset.episodes[ep_i]
        trajs = normalizer.normalize(ep.trajectories(spec))
        for k in range(subdivision.K + 1):
            n_k = subdivision.N_levels[k]
            if n_k > trajs.shape[0]:
                raise ValueError(f"level {k} needs {n_k} agents, episode has {trajs.shape[0]}")
            idx = rng.choice(trajs.shape[0], size=n_k, replace=False)
            t_hi, t_lo = subdivision.window(k)
            t = float(rng.uniform(t_lo, t_hi))
            noised, eps = forward_noise(schedule, trajs[idx], t, rng)
            loss = mfvsm_loss(model, schedule, spec, noised, t, eps,
                              config.alpha, config.lamb, train=True)
            (loss * float(weights[k])).backward()
            level_losses[k] += loss.item()
            level_counts[k] += 1
        pending += 1
        if pending >= config.batch_episodes or pos == n_eps - 1:
            _guard_grads(model)
            _clip_grads(model, config.grad_clip)
            adam_step(model.params, opt_state, config.lr)
            model.zero_grad()
            pending = 0
    return {"epoch": epoch, "level_loss": (level_losses / np.maximum(level_counts, 1)).tolist()}


def _guard_grads(model):
    for name, p in model.params.items():
        if p.grad is not None and not np.isfinite(p.grad).all():
            raise FloatingPointError(f"non-finite gradient in {name}")


def _clip_grads(model, max_norm):
    if not max_norm or max_norm <= 0:
        return
    total = np.sqrt(sum((p.grad**2).sum() for p in model.params.values()
                        if p.grad is not None))
    if total > max_norm:
        scale = max_norm / total
        for p in model.params.values():
            if p.grad is not None:
                p.grad *= scale


def score_error(model, heldout_trajs: np.ndarray, schedule: DiffusionSchedule,
                subdivision: SubdivisionSchedule | None = None, level: int | None = None,
                n_draws: int = 64, seed: int = 0, batch: int = 16,
                normalizer: Normalizer | None = None, target_fn=None) -> float:
    """RMS score-matching residual over a time window.

    Global uses [t_min, T]; with `level` k, times are drawn from that
    subdivision window. The default target is the denoising identity
    -eps/std(t); `target_fn(t, noised)` overrides it (e.g. the closed-form
    marginal score on Gaussian held-out data). Returns sqrt(mean over
    draws/agents/coords).
    """
    heldout_trajs = np.asarray(heldout_trajs, dtype=np.float64)
    if heldout_trajs.shape[0] == 0:
        raise ValueError("empty held-out set")
    if normalizer is not None:
        heldout_trajs = normalizer.normalize(heldout_trajs)
    rng = stream(seed, 0x5E, 0 if level is None else level + 1)
    if level is None:
        t_hi, t_lo = schedule.T, schedule.t_min
    else:
        t_hi, t_lo = subdivision.window(level)
    total, count = 0.0, 0
    for _ in range(n_draws):
        idx = rng.choice(heldout_trajs.shape[0], size=min(batch, heldout_trajs.shape[0]),
                         replace=False)
        t = float(rng.uniform(t_lo, t_hi))
        noised, eps = forward_noise(schedule, heldout_trajs[idx], t, rng)
        if target_fn is not None:
            target = target_fn(t, noised)
        else:
            std = np.sqrt(max(schedule.marginal_var(t) - schedule.alpha(t) ** 2, 1e-12))
            target = -eps / std
        s = model.score(t, noised, train=False)
        total += float(((s - target) ** 2).mean()) * idx.size
        count += idx.size
    return float(np.sqrt(total / count))


def write_training_log(path, rows, log_walltime: bool):
    """CSV log: epoch, level, loss, eps_level, walltime_s (blank when disabled)."""
    with open(path, "w", encoding="utf-8") as f:
        f.write("epoch,level,loss,eps_level,walltime_s\n")
        for r in rows:
            wt = fmt_float(r["walltime_s"]) if log_walltime else ""
            eps_s = fmt_float(r["eps_level"]) if r.get("eps_level") is not None else ""
            f.write(f"{r['epoch']},{r['level']},{fmt_float(r['loss'])},{eps_s},{wt}\n")


def now() -> float:
    return time.perf_counter()
