"""Run-config handling and the `mfd` command-line interface.

Subcommands: collect, train, plan, eval, verify, fit, plot. Configs are
versioned JSON; CSV artifacts print floats at 9 significant digits and are
byte-identical across reruns with the same config and seed (MFD_SEED
overrides the config seed).
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import env as envmod, evaluation as ev, offline
from .model import (ModelConfig, Normalizer, ScoreModel, ValueConfig, ValueModel,
                    analytic_score, load_checkpoint, save_checkpoint, train_value)
from .plan import PlanConfig, execute, sample_reverse
from .schedule import (make_subdivision, make_vp_schedule, work_ablation,
                       work_full)
from .train import TrainConfig, Trainer, score_error, write_training_log
from .util import crc32_of, fmt_float, stream

SCHEMA_VERSION = 1

DEFAULT_CONFIG = {
    "schema_version": SCHEMA_VERSION,
    "env": {"name": "gs", "N": 64, "H": 50, "gamma": 1.0, "coupling": 2.0},
    "schedule": {"beta_min": 0.1, "beta_max": 20.0, "T": 1.0, "t_min": 1e-3,
                 "n_steps": 200},
    "subdivision": {"b": 2, "K": 4, "c_psi": 0.1},
    "model": {"hidden": 256, "pair_hidden": 32, "kernel_proj": 8,
              "time_embed": 32, "knn": None},
    "mfq": {"iterations": 400, "warmup": 20},
    "collect": {"episodes": 1000,
                "splits": ["expert", "medium", "medium_replay", "mixed"],
                "ref_episodes": 50},
    "train": {"alpha": 1.0, "lambda": 0.1, "weighting": "practical_b_pow",
              "epochs": 20, "batch_episodes": 1, "lr": 1e-3,
              "log_walltime": False, "datasets": None, "eps_holdout": 16},
    "value": {"hidden": 64, "lr": 1e-3, "epochs": 3, "batch": 1024},
    "plan": {"eta": 0.05, "delta": 0.1, "rng_mode": "index"},
    "eval": {"metrics": ["sampler_oracle"], "n_list": [16, 64, 256],
             "episodes": 20, "poc_seeds": [0, 1, 2, 3, 4]},
    "seed": 0,
    "out_dir": "runs/default",
}


def load_config(path) -> dict:
    with open(path, encoding="utf-8") as f:
        cfg = json.load(f)
    if cfg.get("schema_version") != SCHEMA_VERSION:
        raise ValueError(f"config schema_version must be {SCHEMA_VERSION}")
    merged = _merge(DEFAULT_CONFIG, cfg)
    if "MFD_SEED" in os.environ:
        merged["seed"] = int(os.environ["MFD_SEED"])
    return merged


def save_config(cfg: dict, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(cfg, f, indent=2, sort_keys=True)
        f.write("\n")


def _merge(base, override):
    out = dict(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def build_spec(cfg: dict) -> envmod.EnvSpec:
    e = cfg["env"]
    if e["name"] == "ising":
        return envmod.ising_spec(e["N"], coupling=e.get("coupling", 2.0),
                                 gamma=e.get("gamma", 1.0))
    if e["name"] == "gs":
        return envmod.gs_spec(e["N"], H=e.get("H", 50), gamma=e.get("gamma", 1.0),
                              mu_target=e.get("mu_target"),
                              sigma_target=e.get("sigma_target"))
    raise ValueError(f"unknown env {e['name']!r}")


def build_schedule(cfg: dict):
    s = cfg["schedule"]
    return make_vp_schedule(s["beta_min"], s["beta_max"], s["T"], s["t_min"],
                            s["n_steps"])


def build_subdivision(cfg: dict, n: int):
    s, d = cfg["subdivision"], cfg["schedule"]
    return make_subdivision(n, s["b"], s["K"], d["n_steps"], s["c_psi"],
                            T=d["T"], t_min=d["t_min"])


def _model_config(cfg: dict, spec) -> ModelConfig:
    m = cfg["model"]
    return ModelConfig(d_s=spec.d_s, d_a=spec.d_a, H=spec.H, hidden=m["hidden"],
                       time_embed=m["time_embed"], pair_hidden=m["pair_hidden"],
                       kernel_proj=m["kernel_proj"], knn=m["knn"])


# ---------------------------------------------------------------------------
# subcommands


def cmd_collect(cfg: dict) -> dict:
    spec = build_spec(cfg)
    out_dir = Path(cfg["out_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    seed = cfg["seed"]
    res = offline.train_mfq(spec, cfg["mfq"]["iterations"], seed=seed)
    warmup = cfg["mfq"]["warmup"]
    manifest = {"env": spec.name, "N": spec.N, "seed": seed, "files": {}}
    for split in cfg["collect"]["splits"]:
        ds = offline.collect_split(spec, res, split, cfg["collect"]["episodes"],
                                   seed=seed, warmup=warmup)
        path = out_dir / f"{spec.name}_{split}.mfdd"
        offline.write_dataset(ds, path)
        manifest["files"][split] = {
            "path": path.name,
            "episodes": len(ds.episodes),
            "crc32": crc32_of(path.read_bytes()),
        }
    n_ref = cfg["collect"]["ref_episodes"]
    manifest["j_expert"] = offline.evaluate_policy(spec, res.expert, n_ref,
                                                   seed + 101, warmup=warmup)
    manifest["j_random"] = offline.evaluate_policy(
        spec, offline.RandomPolicy(spec.name), n_ref, seed + 202, warmup=warmup)
    with open(out_dir / "manifest.json", "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")
    return manifest


def _load_train_datasets(cfg: dict, spec):
    out_dir = Path(cfg["out_dir"])
    paths = cfg["train"]["datasets"]
    if paths is None:
        paths = [out_dir / f"{spec.name}_expert.mfdd"]
    datasets = [offline.read_dataset(p) for p in map(Path, paths)]
    merged = offline.OfflineDataset(
        env_name=spec.name, N=spec.N, H=spec.H, d_s=spec.d_s, d_a=spec.d_a,
        split="+".join(d.split for d in datasets))
    for d in datasets:
        merged.episodes.extend(d.episodes)
    return merged


def cmd_train(cfg: dict, resume: str | None = None) -> dict:
    spec = build_spec(cfg)
    out_dir = Path(cfg["out_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    schedule = build_schedule(cfg)
    subdivision = build_subdivision(cfg, spec.N)
    dataset = _load_train_datasets(cfg, spec)
    tcfg = TrainConfig(alpha=cfg["train"]["alpha"], lamb=cfg["train"]["lambda"],
                       weighting=cfg["train"]["weighting"],
                       epochs=cfg["train"]["epochs"],
                       batch_episodes=cfg["train"]["batch_episodes"],
                       lr=cfg["train"]["lr"], seed=cfg["seed"],
                       log_walltime=cfg["train"]["log_walltime"])

    model = ScoreModel(_model_config(cfg, spec), schedule=schedule,
                       seed=cfg["seed"])
    start_epoch = 0
    if resume:
        arrays, meta = load_checkpoint(resume)
        for k, p in model.params.items():
            p.data = arrays["score." + k].copy()
        norm = Normalizer(mean=arrays["norm.mean"], scale=arrays["norm.scale"])
        start_epoch = int(meta["epoch"])
    else:
        norm = Normalizer.fit(dataset.all_trajectories(spec))

    trainer = Trainer(model, schedule, subdivision, spec, tcfg, norm)
    trainer.epoch = start_epoch
    holdout = dataset.all_trajectories(spec)[:cfg["train"]["eps_holdout"]]

    from .train import now

    rows = []
    for _ in range(tcfg.epochs):
        t0 = now()
        rep = trainer.run_epoch(dataset)
        wt = now() - t0
        for k, loss in enumerate(rep["level_loss"]):
            eps_k = score_error(model, holdout, schedule, subdivision, level=k,
                                n_draws=8, seed=cfg["seed"], normalizer=norm)
            rows.append({"epoch": rep["epoch"], "level": k, "loss": loss,
                         "eps_level": eps_k, "walltime_s": wt})
    write_training_log(out_dir / "training_log.csv", rows, tcfg.log_walltime)

    vcfg = ValueConfig(d_s=spec.d_s, d_a=spec.d_a, hidden=cfg["value"]["hidden"],
                       gamma=spec.gamma, lr=cfg["value"]["lr"],
                       batch=cfg["value"]["batch"], epochs=cfg["value"]["epochs"],
                       seed=cfg["seed"])
    vm = train_value(dataset, spec, vcfg)

    arrays = {"score." + k: p.data for k, p in model.params.items()}
    arrays.update({"value." + k: p.data for k, p in vm.params.items()})
    arrays["norm.mean"] = norm.mean
    arrays["norm.scale"] = norm.scale
    meta = {"epoch": trainer.epoch, "env": spec.name, "N": spec.N,
            "model": cfg["model"], "value_hidden": cfg["value"]["hidden"],
            "gamma": spec.gamma, "seed": cfg["seed"]}
    ckpt = out_dir / "model.mfck"
    save_checkpoint(ckpt, arrays, meta)
    return {"checkpoint": str(ckpt), "epochs": trainer.epoch}


def load_planner(cfg: dict, ckpt_path):
    spec = build_spec(cfg)
    arrays, meta = load_checkpoint(ckpt_path)
    model = ScoreModel(_model_config(cfg, spec), schedule=build_schedule(cfg),
                       seed=0)
    for k, p in model.params.items():
        p.data = arrays["score." + k].copy()
    vcfg = ValueConfig(d_s=spec.d_s, d_a=spec.d_a, hidden=meta["value_hidden"],
                       gamma=meta["gamma"])
    vm = ValueModel(vcfg)
    for k, p in vm.params.items():
        p.data = arrays["value." + k].copy()
    norm = Normalizer(mean=arrays["norm.mean"], scale=arrays["norm.scale"])
    return spec, model, vm, norm


def cmd_plan(cfg: dict, ckpt_path=None) -> dict:
    spec, model, vm, norm = load_planner(cfg, ckpt_path or
                                         Path(cfg["out_dir"]) / "model.mfck")
    schedule = build_schedule(cfg)
    subdivision = build_subdivision(cfg, spec.N)
    pcfg = PlanConfig(eta=cfg["plan"]["eta"], delta=cfg["plan"]["delta"],
                      rng_mode=cfg["plan"]["rng_mode"])
    record = execute(spec, model, schedule, subdivision, pcfg, cfg["seed"],
                     value_model=vm, normalizer=norm)
    _, j = envmod.episode_return(spec, record["rewards"])
    out_dir = Path(cfg["out_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "plan_diagnostics.csv", "w", encoding="utf-8") as f:
        f.write("step,work,transition_error\n")
        for i, (w, te) in enumerate(zip(record["work"], record["transition_errors"])):
            f.write(f"{i},{fmt_float(w)},{fmt_float(te)}\n")
    return {"J": j, "work_total": float(record["work"].sum())}


def _metric_rows_to_csv(path, rows):
    cols = ["name", "env", "N", "H", "seed", "split", "value", "std",
            "slope", "ci_lo", "ci_hi"]
    with open(path, "w", encoding="utf-8") as f:
        f.write(",".join(cols) + "\n")
        for r in rows:
            f.write(",".join([
                r.name, r.env, str(r.N), str(r.H), str(r.seed), r.split,
                fmt_float(r.value), fmt_float(r.std),
                fmt_float(r.slope) if np.isfinite(r.slope) else "",
                fmt_float(r.ci_lo) if np.isfinite(r.ci_lo) else "",
                fmt_float(r.ci_hi) if np.isfinite(r.ci_hi) else "",
            ]) + "\n")


def cmd_eval(cfg: dict) -> list:
    spec = build_spec(cfg)
    schedule = build_schedule(cfg)
    seed = cfg["seed"]
    rows = []
    metrics = cfg["eval"]["metrics"]

    if "sampler_oracle" in metrics:
        x = sample_reverse(lambda t, z: analytic_score(schedule, t, z),
                           schedule, 4000, 2, seed=seed)
        from scipy import stats as sstats

        for c in range(x.shape[1]):
            ks_p = sstats.kstest(x[:, c], "norm").pvalue
            rows.append(ev.MetricRecord("oracle_mean", spec.name, spec.N, spec.H,
                                        seed, "none", float(x[:, c].mean())))
            rows.append(ev.MetricRecord("oracle_var", spec.name, spec.N, spec.H,
                                        seed, "none", float(x[:, c].var())))
            rows.append(ev.MetricRecord("oracle_ks_p", spec.name, spec.N, spec.H,
                                        seed, "none", float(ks_p)))

    if "work_identity" in metrics:
        rng = stream(seed, 0x77)
        worst = 0.0
        for _ in range(100):
            sub, n = _random_schedule(rng, cfg["schedule"]["n_steps"])
            diff = max(abs(work_ablation(sub, n, "no_branching") - sub.n_steps * n),
                       abs(work_ablation(sub, n, "no_subdivision") - sub.n_steps * n))
            worst = max(worst, diff)
        rows.append(ev.MetricRecord("work_identity_worst_abs", spec.name, spec.N,
                                    spec.H, seed, "none", worst))

    if "exploitability" in metrics and spec.name == "ising":
        for pname, pol in (("uniform", lambda ab: 0.5), ("aligned", lambda ab: 1.0)):
            exact = ev.exploitability_exact_ising(spec, pol)
            est = ev.exploitability_learned(spec, pol, "greedy", budget=4000,
                                            seed=seed)
            rows.append(ev.MetricRecord(f"exploit_exact_{pname}", spec.name, spec.N,
                                        spec.H, seed, "none", exact))
            rows.append(ev.MetricRecord(f"exploit_learned_{pname}", spec.name,
                                        spec.N, spec.H, seed, "none",
                                        est.estimate, std=est.mc_std))

    if "poc" in metrics:
        samp = ev.gs_tuple_sampler()
        ref = ev.iid_tuple_sampler()
        out = ev.poc_curve(samp, ref, cfg["eval"]["n_list"], m=8,
                           seeds=cfg["eval"]["poc_seeds"])
        for r in out["rows"]:
            rows.append(ev.MetricRecord("poc_w2sq", "gs", r["N"], spec.H, seed,
                                        "none", r["w2sq_mean"], std=r["w2sq_std"],
                                        slope=out["slope"]))

    if "leff" in metrics:
        step = ev.make_reverse_drift_step(
            schedule, lambda t, z: analytic_score(schedule, t, z), schedule.dt)
        probes = stream(seed, 0xDA).standard_normal((4, 8))
        res = ev.effective_lipschitz(step, probes, [0.1, 0.5, 0.9],
                                     horizon=spec.H)
        rows.append(ev.MetricRecord("L_eff", spec.name, spec.N, spec.H, seed,
                                    "none", res["L_eff"]))
        rows.append(ev.MetricRecord("L_eff_H", spec.name, spec.N, spec.H, seed,
                                    "none", res["L_eff_H"]))

    if "planner_return" in metrics:
        rows.extend(_planner_return_rows(cfg, spec, schedule))

    out_dir = Path(cfg["out_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    _metric_rows_to_csv(out_dir / "metrics.csv", rows)
    return rows


def _planner_return_rows(cfg, spec, schedule):
    out_dir = Path(cfg["out_dir"])
    manifest = json.loads((out_dir / "manifest.json").read_text())
    spec_, model, vm, norm = load_planner(cfg, out_dir / "model.mfck")
    subdivision = build_subdivision(cfg, spec.N)
    pcfg = PlanConfig(eta=cfg["plan"]["eta"], delta=cfg["plan"]["delta"],
                      rng_mode=cfg["plan"]["rng_mode"])
    js = []
    for e in range(cfg["eval"]["episodes"]):
        rec = execute(spec, model, schedule, subdivision, pcfg,
                      cfg["seed"] * 55_001 + e, value_model=vm, normalizer=norm)
        js.append(envmod.episode_return(spec, rec["rewards"])[1])
    nr = ev.normalized_return(float(np.mean(js)), manifest["j_random"],
                              manifest["j_expert"])
    return [ev.MetricRecord("planner_return_normalized", spec.name, spec.N,
                            spec.H, cfg["seed"], "eval", nr,
                            std=float(np.std(js)))]


def _random_schedule(rng, n_steps):
    divisors = [d for d in range(1, 11) if n_steps % d == 0]
    kp1 = int(rng.choice(divisors))
    k = kp1 - 1
    b = int(rng.integers(1, 4))
    n0 = int(rng.integers(1, 5))
    n = n0 * b**k
    sub = make_subdivision(n, b, k, n_steps, float(rng.uniform(0.01, 1.0)))
    return sub, n


def cmd_verify(cfg: dict, dataset_paths=()) -> int:
    """Fast pass/fail property report; exit code 0 iff all checks pass."""
    checks = []
    seed = cfg["seed"]

    rng = stream(seed, 0x99)
    ok = True
    for _ in range(100):
        sub, n = _random_schedule(rng, 200)
        ok &= work_ablation(sub, n, "no_branching") == 200 * n
        ok &= work_ablation(sub, n, "no_subdivision") == 200 * n
    sub = make_subdivision(16, 2, 4, 200, 0.10)
    ok &= abs(work_full(sub, 16) - 77.59375 * 16) < 1e-9
    checks.append(("work_identities", ok))

    sch = build_schedule(cfg)
    ts = np.linspace(0.0, sch.T, 101)
    mv = sch.marginal_var(ts)
    checks.append(("schedule_invariants",
                   bool(abs(sch.alpha(0.0) - 1.0) < 1e-12
                        and abs(sch.sigma(0.0)) < 1e-12
                        and (np.diff(mv) > -1e-9).all())))

    x = sample_reverse(lambda t, z: analytic_score(sch, t, z), sch, 2000, 2,
                       seed=seed)
    checks.append(("sampler_oracle_moments",
                   bool(np.abs(x.mean(axis=0)).max() < 0.1
                        and 0.85 < x.var(axis=0).min()
                        and x.var(axis=0).max() < 1.15)))

    from .autodiff import Tensor, gradcheck

    rngg = np.random.default_rng(seed)
    w = Tensor(rngg.standard_normal((6, 4)), requires_grad=True)
    b = Tensor(np.zeros(4), requires_grad=True)
    xd = rngg.standard_normal((5, 6))
    err = gradcheck(lambda ps: ((Tensor(xd) @ ps[0] + ps[1]).tanh().square()).mean(),
                    [w, b], n_directions=20)
    checks.append(("autodiff_gradcheck", bool(err < 1e-5)))

    import tempfile

    spec_small = envmod.gs_spec(4, H=3)
    pol = offline.RandomPolicy("gs")
    eps = [offline.rollout_episode(spec_small, pol, seed=s) for s in range(2)]
    ds = offline.OfflineDataset("gs", 4, 3, 4, 4, "expert", episodes=eps)
    with tempfile.TemporaryDirectory() as td:
        p1 = Path(td) / "a.mfdd"
        offline.write_dataset(ds, p1)
        ds2 = offline.read_dataset(p1)
        p2 = Path(td) / "b.mfdd"
        offline.write_dataset(ds2, p2)
        checks.append(("dataset_roundtrip", p1.read_bytes() == p2.read_bytes()))
        cfg_path = Path(td) / "cfg.json"
        save_config(cfg, cfg_path)
        cfg2 = load_config(cfg_path)
        cfg_path2 = Path(td) / "cfg2.json"
        save_config(cfg2, cfg_path2)
        cfg3 = load_config(cfg_path2)
        checks.append(("config_roundtrip", cfg2 == cfg3))

    for p in dataset_paths:
        name = f"dataset_checksum[{Path(p).name}]"
        try:
            offline.read_dataset(p)
            checks.append((name, True))
        except Exception:
            checks.append((name, False))

    failed = 0
    for name, passed in checks:
        print(f"{'PASS' if passed else 'FAIL'} {name}")
        failed += 0 if passed else 1
    return 1 if failed else 0


def cmd_fit(csv_path, window, n_boot: int = 10_000, seed: int = 0) -> dict:
    """Horizon-exponent fit from a CSV with columns env,H,seed,gap."""
    import csv as csvmod

    data: dict = {}
    with open(csv_path, encoding="utf-8") as f:
        for row in csvmod.DictReader(f):
            key = row["env"]
            data.setdefault(key, {}).setdefault(int(row["seed"]), {})[
                float(row["H"])] = float(row["gap"])
    out = {}
    for envname, by_seed in sorted(data.items()):
        hs = sorted({h for d in by_seed.values() for h in d})
        gaps = [[by_seed[s][h] for h in hs] for s in sorted(by_seed)]
        fit = ev.horizon_fit(hs, gaps, window=window, n_boot=n_boot, seed=seed)
        out[envname] = fit
        print(f"{envname}: b={fmt_float(fit['exponent'])} "
              f"CI=[{fmt_float(fit['ci'][0])},{fmt_float(fit['ci'][1])}] "
              f"per-seed={[round(b, 3) for b in fit['per_seed']]}")
    return out


def cmd_plot(csv_path, out_path, name_filter=None):
    """Minimal deterministic SVG line chart of value vs N, grouped by metric."""
    import csv as csvmod
    from collections import defaultdict

    series = defaultdict(list)
    with open(csv_path, encoding="utf-8") as f:
        for row in csvmod.DictReader(f):
            if name_filter and row["name"] != name_filter:
                continue
            try:
                series[row["name"]].append((float(row["N"]), float(row["value"])))
            except ValueError:
                continue
    w, h, pad = 640, 400, 50
    pts_all = [p for pts in series.values() for p in pts]
    if not pts_all:
        raise ValueError("nothing to plot")
    xs, ys = zip(*pts_all)
    x0, x1 = min(xs), max(xs) or 1
    y0, y1 = min(ys), max(ys)
    if x1 == x0:
        x1 = x0 + 1
    if y1 == y0:
        y1 = y0 + 1

    def sx(x):
        return pad + (x - x0) / (x1 - x0) * (w - 2 * pad)

    def sy(y):
        return h - pad - (y - y0) / (y1 - y0) * (h - 2 * pad)

    colors = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"]
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}">',
             f'<rect width="{w}" height="{h}" fill="white"/>']
    for i, (nm, pts) in enumerate(sorted(series.items())):
        pts = sorted(pts)
        path = " ".join(f"{sx(x):.2f},{sy(y):.2f}" for x, y in pts)
        col = colors[i % len(colors)]
        parts.append(f'<polyline fill="none" stroke="{col}" stroke-width="2" '
                     f'points="{path}"/>')
        parts.append(f'<text x="{pad}" y="{20 + 16 * i}" fill="{col}" '
                     f'font-size="13">{nm}</text>')
    parts.append(f'<line x1="{pad}" y1="{h - pad}" x2="{w - pad}" y2="{h - pad}" '
                 'stroke="black"/>')
    parts.append(f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{h - pad}" '
                 'stroke="black"/>')
    parts.append("</svg>")
    Path(out_path).write_text("\n".join(parts), encoding="utf-8")
    return out_path


# ---------------------------------------------------------------------------


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="mfd", description=__doc__)
    sub = ap.add_subparsers(dest="cmd", required=True)

    for name in ("collect", "train", "plan", "eval", "verify"):
        p = sub.add_parser(name)
        p.add_argument("--config", required=True)
        if name == "train":
            p.add_argument("--resume", default=None)
        if name == "collect":
            p.add_argument("--episodes", type=int, default=None)
        if name == "verify":
            p.add_argument("--dataset", action="append", default=[])

    p = sub.add_parser("fit")
    p.add_argument("--kind", default="horizon", choices=["horizon"])
    p.add_argument("--csv", required=True)
    p.add_argument("--window", default="25,50,100")
    p.add_argument("--boot", type=int, default=10_000)

    p = sub.add_parser("plot")
    p.add_argument("--csv", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--name", default=None)

    args = ap.parse_args(argv)
    try:
        if args.cmd == "collect":
            cfg = load_config(args.config)
            if args.episodes is not None:
                cfg["collect"]["episodes"] = args.episodes
            manifest = cmd_collect(cfg)
            print(json.dumps(manifest, indent=2, sort_keys=True))
        elif args.cmd == "train":
            cfg = load_config(args.config)
            out = cmd_train(cfg, resume=args.resume)
            print(json.dumps(out, indent=2, sort_keys=True))
        elif args.cmd == "plan":
            cfg = load_config(args.config)
            print(json.dumps(cmd_plan(cfg), indent=2, sort_keys=True))
        elif args.cmd == "eval":
            cfg = load_config(args.config)
            rows = cmd_eval(cfg)
            print(f"wrote {len(rows)} metric rows to {cfg['out_dir']}/metrics.csv")
        elif args.cmd == "verify":
            cfg = load_config(args.config)
            return cmd_verify(cfg, dataset_paths=args.dataset)
        elif args.cmd == "fit":
            window = [float(x) for x in args.window.split(",")]
            cmd_fit(args.csv, window, n_boot=args.boot)
        elif args.cmd == "plot":
            cmd_plot(args.csv, args.out, name_filter=args.name)
    except Exception as exc:  # surfaced with context, nonzero exit
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
