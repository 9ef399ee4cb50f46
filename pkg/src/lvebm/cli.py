"""``lvebm`` command line: gen-data, train, eval, reconstruct, verify, export-plots.

Each command reads one JSON config (``--config``), applies flag overrides
(``--seed``, ``--set section.key=value``; flags win), writes its artifacts
under ``--out`` and echoes the resolved config next to them.

Exit codes: 0 success, 2 configuration or missing-artifact error, 3 numerical
abort, 4 verification failure.
"""

from __future__ import annotations

import argparse
import copy
import json
import logging
import os
import sys
import time
from pathlib import Path

log = logging.getLogger("lvebm")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_VERIFY = 0, 2, 3, 4

DEFAULT_CONFIG = {
    "seed": 0,
    "data": {
        "family": "lcr2d",
        "params": {},
        "test_fraction": 0.2,
        "uci_root": None,
        "n_train": 20000,
        "n_test": 2000,
    },
    "model": {"latent_dim": None, "hidden": [64, 64], "lambda_x": 0.05, "lambda_z": 0.05},
    "train": {
        "eta_z": 1e-2,
        "eta_xz": 1e-2,
        "alpha": 2e-3,
        "optimizer": "adam",
        "alpha_final": 1e-4,
        "T": 5000,
        "M": 10,
        "D": 512,
        "minibatch": 128,
        "latent_steps": 5,
        "joint_steps": 10,
        "rho_refresh": 0.05,
        "refresh_fraction": 0.1,
        "clip_norm": 100.0,
        "entropy_k": 3,
        "snapshot_every": 0,
        "log_every": 500,
    },
    "eval": {
        "n_samples": None,
        "sample_steps": 8000,
        "sample_eta": 2.5e-3,
        "probe_M": 8,
        "probe_steps": 100,
        "probe_eta": 0.01,
        "decoder_hidden": [128, 128],
        "decoder_epochs": 30,
        "decoder_lr": 1e-3,
        "elbo_M": 10,
        "elbo_steps": 200,
        "elbo_eta": 1e-2,
        "elbo_D": 1000,
        "sinkhorn_epsilon": 0.05,
        "sinkhorn_iters": 200,
        "entropy_k": 3,
    },
    "reconstruct": {"bins": 40, "r_max": None, "decoder_epochs": 10},
    "verify": {"ou_particles": 20000, "m2_particles": 10000, "m2_steps": 5000},
    "export": {"runs": [], "moving_average": 200, "n_samples": 2000},
}


class ConfigError(ValueError):
    pass


# -- configuration ------------------------------------------------------------------


def _merge(base: dict, over: dict, where: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, val in over.items():
        if key not in out:
            raise ConfigError(f"unknown config key {where}{key!r}")
        if isinstance(out[key], dict) and key != "params":
            if not isinstance(val, dict):
                raise ConfigError(f"config section {where}{key!r} must be an object")
            out[key] = _merge(out[key], val, f"{where}{key}.")
        else:
            out[key] = val
    return out


def _parse_set(item: str):
    if "=" not in item:
        raise ConfigError(f"--set expects section.key=value, got {item!r}")
    path, raw = item.split("=", 1)
    try:
        val = json.loads(raw)
    except json.JSONDecodeError:
        val = raw
    keys = path.split(".")
    over = val
    for k in reversed(keys):
        over = {k: over}
    return over


def resolve_config(path=None, seed=None, sets=()) -> dict:
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    if path is not None:
        try:
            doc = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        cfg = _merge(cfg, doc)
    for item in sets:
        cfg = _merge(cfg, _parse_set(item))
    if seed is not None:
        cfg["seed"] = int(seed)
    return cfg


def _echo(cfg: dict, out: Path, command: str):
    out.mkdir(parents=True, exist_ok=True)
    (out / f"{command}_config.json").write_text(json.dumps(cfg, indent=2, sort_keys=True))


def _need(path: Path, what: str) -> Path:
    if not path.exists():
        raise ConfigError(f"missing {what}: {path}")
    return path


# -- shared pieces ------------------------------------------------------------------


def _train_config(cfg: dict):
    from .dynamics import TrainConfig
    from .rng import sub_seed

    t = {k: v for k, v in cfg["train"].items() if k != "snapshot_every"}
    return TrainConfig(**t, seed=sub_seed(cfg["seed"], "dynamics"))


def _load_split(out: Path, split: str):
    from .datasets import load_dataset

    return load_dataset(_need(out / f"{split}.csv", f"{split} split"))


def initial_model(cfg: dict, d: int):
    from .energy import init_model
    from .rng import sub_seed

    m = cfg["model"]
    ell = int(m["latent_dim"] or d)
    return init_model(d, ell, tuple(m["hidden"]), m["lambda_x"], m["lambda_z"], sub_seed(cfg["seed"], "energy"))


def heldout_latent_pools(model, x, e: dict, seed: int):
    """Latent particles for held-out points: Langevin in z from N(0, I), x clamped."""
    import numpy as np

    from .dynamics import ParticleState, TrainConfig, latent_step
    from .rng import stream

    n = len(x)
    lat = stream(seed, "eval-latent-init").standard_normal((n, e["elbo_M"], model.z_dim))
    state = ParticleState(lat, np.zeros((1, model.x_dim)), np.zeros((1, model.z_dim)), seed)
    tc = TrainConfig(eta_z=e["elbo_eta"], M=e["elbo_M"], D=1)
    rows = np.arange(n)
    for k in range(e["elbo_steps"]):
        state.step = k
        latent_step(state, model, x, rows, tc)
    return state.latent


def evaluate(model, train_x, test_x, cfg: dict, decoder=None):
    """All four metrics on ``test_x``; returns (MetricsReport, decoder, samples)."""
    from . import metrics
    from .dynamics import sample_joint
    from .generation import GenConfig, posterior_probe, train_decoder
    from .rng import sub_seed

    e = cfg["eval"]
    seed = sub_seed(cfg["seed"], "metrics")
    n = int(e["n_samples"] or len(test_x))
    xs, _ = sample_joint(model, n, e["sample_steps"], e["sample_eta"], seed, cfg["train"]["clip_norm"])
    mmd2 = metrics.mmd2_rbf(xs, test_x)
    w2 = metrics.sinkhorn_w2sq(xs, test_x, e["sinkhorn_epsilon"], e["sinkhorn_iters"])
    gc = GenConfig(eta=e["probe_eta"], steps=e["probe_steps"], seed=sub_seed(cfg["seed"], "generation"))
    if decoder is None:
        z_train = posterior_probe(model, train_x, e["probe_M"], gc)
        decoder = train_decoder(
            z_train, train_x, tuple(e["decoder_hidden"]), e["decoder_epochs"], e["decoder_lr"],
            sub_seed(cfg["seed"], "decoder"),
        )
    z_test = posterior_probe(model, test_x, e["probe_M"], gc)
    rmse = metrics.rmse(decoder(z_test), test_x)
    latent = heldout_latent_pools(model, test_x, e, seed)
    nx, nz = sample_joint(model, e["elbo_D"], e["sample_steps"], e["sample_eta"], seed + 1, cfg["train"]["clip_norm"])
    elbo = metrics.elbo(model, test_x, latent, nx, nz, e["entropy_k"])
    settings = {
        "mmd_bandwidth": "median",
        "mmd_estimator": "unbiased",
        "sinkhorn_epsilon": e["sinkhorn_epsilon"],
        "sinkhorn_iters": e["sinkhorn_iters"],
        "n_samples": n,
        "n_test": len(test_x),
        "entropy_k": e["entropy_k"],
    }
    return metrics.MetricsReport(elbo, rmse, mmd2, w2, settings), decoder, xs


# -- commands ---------------------------------------------------------------------------


def cmd_gen_data(cfg: dict, out: Path) -> int:
    from dataclasses import asdict

    from .datasets import DEFAULTS, SyntheticParams, generate, load_uci, save_dataset, train_test_split
    from .rng import sub_seed

    data = cfg["data"]
    family = data["family"]
    if family in ("power", "miniboone"):
        if not data["uci_root"]:
            raise ConfigError("data.uci_root is required for UCI families")
        tr, te = load_uci(data["uci_root"], family, data["n_train"], data["n_test"], sub_seed(cfg["seed"], "datasets"))
    else:
        if family not in DEFAULTS:
            raise ConfigError(f"unknown data family {family!r}")
        base = {**asdict(DEFAULTS[family]), "seed": sub_seed(cfg["seed"], "datasets")}
        try:
            params = SyntheticParams(**{**base, **data["params"]})
        except TypeError as exc:
            raise ConfigError(f"bad data.params: {exc}") from exc
        ds = generate(family, params)
        tr, te = train_test_split(ds, data["test_fraction"], sub_seed(cfg["seed"], "split"))
    out.mkdir(parents=True, exist_ok=True)
    save_dataset(tr, out / "train.csv")
    save_dataset(te, out / "test.csv")
    _echo(cfg, out, "gen-data")
    print(f"wrote {len(tr)} train / {len(te)} test rows (d={tr.d}) to {out}")
    return EXIT_OK


def cmd_train(cfg: dict, out: Path) -> int:
    from .dynamics import save_particles, train
    from .energy import save_model

    tr = _load_split(out, "train")
    tc = _train_config(cfg)
    model0 = initial_model(cfg, tr.d)
    every = int(cfg["train"]["snapshot_every"])
    snaps = out / "snapshots"

    def snapshot(t, model, state):
        if every and (t + 1) % every == 0:
            snaps.mkdir(exist_ok=True)
            save_model(model, snaps / f"energy_{t + 1:06d}.json")

    _echo(cfg, out, "train")
    t0 = time.time()
    model, state, history = train(tr.x, tc, model0, callback=snapshot)
    save_model(model, out / "energy.json")
    save_particles(state, out / "particles.bin")
    history.to_csv(out / "history.csv")
    print(f"trained {tc.T} steps in {time.time() - t0:.0f}s; final loss {history.loss[-1] if len(history) else float('nan'):.4f}")
    return EXIT_OK


def cmd_eval(cfg: dict, out: Path) -> int:
    from .energy import load_model

    model = load_model(_need(out / "energy.json", "checkpoint"))
    tr, te = _load_split(out, "train"), _load_split(out, "test")
    report, decoder, _ = evaluate(model, tr.x, te.x, cfg)
    decoder.save(out / "decoder.json")
    report.settings["config"] = cfg
    (out / "metrics.json").write_text(report.to_json())
    _echo(cfg, out, "eval")
    print(report.table("metrics (test split)"))
    return EXIT_OK


def _heatmap_rows(radii, step, edges):
    import numpy as np

    counts, _ = np.histogram(radii, bins=edges)
    dens = counts / max(len(radii), 1)
    return [[step, repr(float(lo)), repr(float(hi)), int(c), repr(float(p))] for lo, hi, c, p in zip(edges[:-1], edges[1:], counts, dens)]


def cmd_reconstruct(cfg: dict, out: Path) -> int:
    import csv

    import numpy as np

    from .energy import load_model
    from .generation import DecoderModel, GenConfig, posterior_probe, reconstruct, train_decoder
    from .rng import sub_seed

    model = load_model(_need(out / "energy.json", "checkpoint"))
    decoder = DecoderModel.load(_need(out / "decoder.json", "decoder (run eval first)"))
    tr, te = _load_split(out, "train"), _load_split(out, "test")
    e, r = cfg["eval"], cfg["reconstruct"]
    gc = GenConfig(eta=e["probe_eta"], steps=e["probe_steps"], seed=sub_seed(cfg["seed"], "generation"))
    z_hat, x_rec = reconstruct(model, decoder, te.x, gc, e["probe_M"])
    d, ell = te.d, model.z_dim
    with open(out / "reconstruction.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([f"x{i}" for i in range(d)] + [f"xrec{i}" for i in range(d)] + [f"zhat{i}" for i in range(ell)] + ["radius_rec"])
        for xi, xr, zi in zip(te.x, x_rec, z_hat):
            w.writerow([repr(float(v)) for v in (*xi, *xr, *zi)] + [repr(float(np.linalg.norm(xr)))])
    r_max = r["r_max"] or float(1.25 * np.max(np.linalg.norm(te.x, axis=1)))
    edges = np.linspace(0.0, r_max, int(r["bins"]) + 1)
    snaps = sorted((out / "snapshots").glob("energy_*.json")) if (out / "snapshots").exists() else []
    rows = []
    for path in snaps:
        step = int(path.stem.split("_")[1])
        m = load_model(path)
        dec = train_decoder(
            posterior_probe(m, tr.x, e["probe_M"], gc), tr.x, tuple(e["decoder_hidden"]),
            r["decoder_epochs"], e["decoder_lr"], sub_seed(cfg["seed"], "decoder"),
        )
        rows += _heatmap_rows(np.linalg.norm(reconstruct(m, dec, te.x, gc, e["probe_M"])[1], axis=1), step, edges)
    final_step = int(cfg["train"]["T"])
    if not any(row[0] == final_step for row in rows):
        rows += _heatmap_rows(np.linalg.norm(x_rec, axis=1), final_step, edges)
    with open(out / "radius_heatmap.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "radius_lo", "radius_hi", "count", "fraction"])
        w.writerows(rows)
    _echo(cfg, out, "reconstruct")
    print(f"reconstructed {len(te)} test points; heatmap over {len(rows) // len(edges[:-1])} snapshot(s)")
    return EXIT_OK


def run_verification(cfg: dict) -> dict:
    """Every oracle check; each entry records pass/fail and the measured gaps."""
    import math

    import numpy as np

    from . import oracle
    from .rng import stream

    v = cfg["verify"]
    seed = cfg["seed"]
    checks = {}

    two = oracle.dv_identity_check([0.0, math.log(3.0)], oracle.GridMeasure([0, 1], [0.5, 0.5]))
    checks["dv_two_point"] = {"pass": abs(two[2]) < 1e-12 and abs(two[0] - math.log(4.0)) < 1e-12, "gap": two[2]}
    rng = stream(seed, "verify-grids")
    dv_gaps, gibbs_gaps = [], []
    for _ in range(100):
        n = int(rng.integers(1, 200))
        base = oracle.GridMeasure(np.arange(n), np.full(n, 1.0 / n), base=rng.uniform(0.1, 3.0, n))
        dv_gaps.append(abs(oracle.dv_identity_check(rng.normal(scale=5.0, size=n), base)[2]))
        q = oracle.GridMeasure(np.arange(50), rng.dirichlet(np.ones(50)))
        gibbs_gaps.append(oracle.gibbs_identity_check(rng.normal(scale=3.0, size=50), q))
    checks["dv_random_grids"] = {"pass": max(dv_gaps) < 1e-12, "max_gap": max(dv_gaps)}
    g2 = oracle.gibbs_identity_check([0.0, math.log(2.0)], oracle.GridMeasure([0, 1], [0.5, 0.5]))
    checks["gibbs_two_point"] = {"pass": g2 < 1e-12, "gap": g2}
    checks["gibbs_random_grids"] = {"pass": max(gibbs_gaps) < 1e-10, "max_gap": max(gibbs_gaps)}

    exact = oracle.GaussianOracle([[0.4, 0.0], [0.0, -0.3]], 1.0, 1.5)
    x, _ = exact.sample(50, seed)
    gap0 = oracle.restricted_elbo_gap(exact, x)[2]
    checks["restricted_gap_exact_family"] = {"pass": abs(gap0) < 1e-10, "gap": gap0}
    mis = oracle.GaussianOracle([[0.3, 0.2]], 1.0, [[1.0, 0.6], [0.6, 1.0]])
    x, _ = mis.sample(50, seed)
    gap1 = oracle.restricted_elbo_gap(mis, x)[2]
    want = oracle.isotropic_projection_gap(mis.lam_z)
    checks["restricted_gap_misspecified"] = {"pass": gap1 > 1e-3 and abs(gap1 - want) < 1e-10, "gap": gap1, "expected": want}
    quad = oracle.GaussianOracle([[0.3, 0.1]], 1.0, [[1.0, 0.4], [0.4, 2.0]])
    xq = stream(seed, "verify-quad").normal(size=(3, 1))
    qerr = float(np.max(np.abs(oracle.quadrature_log_px(quad, xq) - quad.log_px(xq))))
    checks["quadrature_log_px"] = {"pass": qerr < 1e-6, "max_error": qerr}

    traj = oracle.ou_contraction_test(n_particles=v["ou_particles"], seed=seed)
    rel = traj.kl[1:] / traj.kl[0] / np.exp(-2.0 * traj.t[1:])
    checks["ou_contraction"] = {
        "pass": bool(np.all((rel > 1 / 1.3) & (rel < 1.3))),
        "t": traj.t.tolist(),
        "kl": traj.kl.tolist(),
        "kl_exact": traj.kl_exact.tolist(),
        "rate_ratio": rel.tolist(),
    }
    checks["talagrand"] = {
        "pass": oracle.talagrand_check(traj, tol=0.01),
        "w2sq": traj.w2sq.tolist(),
        "bound": (2.0 * traj.kl).tolist(),
    }
    tr = oracle.second_moment_trace(T=v["m2_steps"], n_particles=v["m2_particles"], start_scale=2.0, seed=seed)
    checks["second_moment_bound"] = {
        "pass": oracle.second_moment_bound_check(tr),
        "max_ratio": float(np.max(tr.ratio)),
    }
    for c in checks.values():
        c["pass"] = bool(c["pass"])
    return {"pass": all(c["pass"] for c in checks.values()), "checks": checks}


def cmd_verify(cfg: dict, out: Path, mutate_drift: bool = False) -> int:
    from . import dynamics

    if mutate_drift:
        with dynamics.mutated_drift():
            report = run_verification(cfg)
        report["mutated_drift"] = True
    else:
        report = run_verification(cfg)
    out.mkdir(parents=True, exist_ok=True)
    (out / "verify.json").write_text(json.dumps(report, indent=2, sort_keys=True, default=lambda o: o.item()))
    _echo(cfg, out, "verify")
    for name, c in report["checks"].items():
        print(f"{'PASS' if c['pass'] else 'FAIL'}  {name}")
    return EXIT_OK if report["pass"] else EXIT_VERIFY


def cmd_export_plots(cfg: dict, out: Path) -> int:
    import csv

    import numpy as np

    from .dynamics import TrainHistory, moving_average, sample_joint
    from .energy import load_model
    from .rng import sub_seed

    ex = cfg["export"]
    runs = [Path(p) for p in ex["runs"]] or [out]
    losses = [TrainHistory.from_csv(_need(r / "history.csv", "training history")).loss for r in runs]
    t = min(len(l) for l in losses)
    stack = np.vstack([l[:t] for l in losses])
    ma = np.vstack([moving_average(l, int(ex["moving_average"])) for l in stack])
    plots = out / "plots"
    plots.mkdir(parents=True, exist_ok=True)
    with open(plots / "loss_curve.csv", "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["step", "loss_mean", "loss_std", "loss_ma_mean", "loss_ma_std", "n_runs"])
        for s in range(t):
            wr.writerow([s, repr(float(stack[:, s].mean())), repr(float(stack[:, s].std())),
                         repr(float(ma[:, s].mean())), repr(float(ma[:, s].std())), len(runs)])
    ckpt = runs[0] / "energy.json"
    if ckpt.exists():
        model = load_model(ckpt)
        e = cfg["eval"]
        xs, zs = sample_joint(model, int(ex["n_samples"]), e["sample_steps"], e["sample_eta"],
                              sub_seed(cfg["seed"], "export"), cfg["train"]["clip_norm"])
        with open(plots / "samples.csv", "w", newline="") as fh:
            wr = csv.writer(fh, lineterminator="\n")
            wr.writerow([f"x{i}" for i in range(xs.shape[1])] + [f"z{i}" for i in range(zs.shape[1])])
            wr.writerows([[repr(float(v)) for v in (*a, *b)] for a, b in zip(xs, zs)])
    _echo(cfg, out, "export-plots")
    print(f"exported loss curve over {len(runs)} run(s) to {plots}")
    return EXIT_OK


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "reconstruct": cmd_reconstruct,
    "verify": cmd_verify,
    "export-plots": cmd_export_plots,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="lvebm", description="Particle-dynamics training for latent-variable EBMs.")
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--seed", type=int, help="global seed (overrides config)")
    p.add_argument("--threads", type=int, help="cap on BLAS/numba worker threads; results do not depend on it")
    p.add_argument("--out", default="run", help="run directory (default: ./run)")
    p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE", help="config override, JSON value")
    p.add_argument("--mutate-drift", action="store_true", help="verify only: flip the Langevin drift sign (mutation test)")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def _cap_threads(n: int):
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS", "NUMBA_NUM_THREADS"):
        os.environ[var] = str(n)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.threads:
        _cap_threads(args.threads)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    from .dynamics import NumericalAbort

    out = Path(args.out)
    try:
        cfg = resolve_config(args.config, args.seed, args.set)
        if args.command == "verify":
            return cmd_verify(cfg, out, args.mutate_drift)
        if args.verbose:
            logging.getLogger("lvebm").setLevel(logging.INFO)
        return COMMANDS[args.command](cfg, out)
    except NumericalAbort as exc:
        print(f"numerical abort at iteration {exc.iteration}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, ValueError, TypeError, IndexError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
