"""Experiment configs and the two shipped studies (Dirichlet ground truth and
synthetic risk-neutral densities), including report emission."""

from __future__ import annotations

import csv
import io
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml
from scipy.optimize import minimize
from scipy.special import digamma as sp_digamma, gammaln

from .constraints import DirichletConstraints, OptionChain, OptionConstraints, kappa_from_alpha
from .flow import FlowStack, PositiveAffineMap, SimplexMap, base_log_density, dump_params, invert_scalar
from .objectives import draw_batch, entropy_estimate, entropy_standard_error, moment_residual
from .oracles import (
    DirichletParams,
    GibbsOptionModel,
    dirichlet_entropy,
    dirichlet_kl,
    dirichlet_log_pdf,
    dirichlet_sample,
    gibbs_option_fit,
)
from .trainer import TrainConfig, TrainingError, train
from .validation import diversity_metrics, mmd_permutation_test, qq_points, qq_slope

log = logging.getLogger(__name__)

QQ_PROBS = np.round(np.arange(1, 20) * 0.05, 2)

# default synthetic chain: slopes of a piecewise-linear log density between strikes
DEFAULT_SYNTHETIC = {
    "discount": 0.98,
    "strikes": [80.0, 90.0, 95.0, 100.0, 105.0, 110.0, 120.0, 130.0],
    "slopes": [0.09, 0.06, 0.03, 0.01, -0.01, -0.03, -0.05, -0.07, -0.09],
    "train": [2, 3, 4, 5],
}


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    experiment: str
    train: TrainConfig
    out_dir: Path
    seed: int = 0
    layers: int = 10
    init_scale: float = 0.01
    alpha: tuple = (1.0, 2.0, 3.0)
    chain_path: Path = None
    synthetic: dict = None
    train_strikes: list = None
    eval_sample_size: int = 10000
    mmd_sample_size: int = 300
    mmd_permutations: int = 1000
    price_sample_size: int = 100000
    ablation: bool = False
    base_dir: Path = field(default=Path("."), repr=False)


_TRAIN_KEYS = {"k_max", "i_max", "n", "n_tilde", "beta", "gamma", "c0", "lambda0", "optimizer",
               "entropy_enabled", "residual_batches", "residual_batch_size", "residual_statistic"}


def load_config(path, seed=None, out_dir=None, ablation=None):
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        raw = yaml.safe_load(path.read_text()) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"{path} must hold a mapping of settings")
    return config_from_dict(raw, base_dir=path.parent, seed=seed, out_dir=out_dir, ablation=ablation)


def config_from_dict(raw, base_dir=".", seed=None, out_dir=None, ablation=None):
    raw = dict(raw)
    base_dir = Path(base_dir)
    experiment = raw.get("experiment")
    if experiment not in ("dirichlet", "options"):
        raise ConfigError("experiment must be 'dirichlet' or 'options'")
    seed = int(seed if seed is not None else raw.get("seed", 0))
    tr = dict(raw.get("train") or {})
    unknown = set(tr) - _TRAIN_KEYS
    if unknown:
        raise ConfigError(f"unknown train keys: {sorted(unknown)}")
    n = int(tr.get("n", 300))
    tr["n"] = n + (n % 2)  # the split-batch gradient needs an even batch
    try:
        train_cfg = TrainConfig(seed=seed, **tr)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid train block: {exc}") from exc
    flow = raw.get("flow") or {}
    out = Path(out_dir if out_dir is not None else raw.get("out_dir", f"runs/{experiment}"))
    cfg = ExperimentConfig(
        experiment=experiment,
        train=train_cfg,
        out_dir=out,
        seed=seed,
        layers=int(flow.get("layers", 10)),
        init_scale=float(flow.get("init_scale", 0.01)),
        eval_sample_size=int(raw.get("eval_sample_size", 10000)),
        mmd_sample_size=int(raw.get("mmd_sample_size", 300)),
        mmd_permutations=int(raw.get("mmd_permutations", 1000)),
        price_sample_size=int(raw.get("price_sample_size", 100000)),
        ablation=bool(ablation if ablation is not None else raw.get("ablation", False)),
        base_dir=base_dir,
    )
    if experiment == "dirichlet":
        alpha = tuple(float(a) for a in (raw.get("dirichlet") or {}).get("alpha", (1, 2, 3)))
        if len(alpha) < 2 or any(a <= 0 for a in alpha):
            raise ConfigError("alpha must hold at least two positive values")
        cfg.alpha = alpha
    else:
        opts = raw.get("options") or {}
        if "chain" in opts:
            p = Path(opts["chain"])
            cfg.chain_path = p if p.is_absolute() else base_dir / p
            if not cfg.chain_path.exists():
                raise ConfigError(f"option chain file not found: {cfg.chain_path}")
        else:
            cfg.synthetic = {**DEFAULT_SYNTHETIC, **(opts.get("synthetic") or {})}
        cfg.train_strikes = opts.get("train_strikes")
    if cfg.layers < 0 or cfg.eval_sample_size < 2 or cfg.mmd_sample_size < 2:
        raise ConfigError("layers, eval_sample_size and mmd_sample_size must be positive")
    return cfg


# ---------------------------------------------------------------------------
# output helpers


def _rows_csv(header, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])
    return buf.getvalue()


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_jsonable(v) for v in obj.tolist()]
    if isinstance(obj, (np.floating, float)):
        return float(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, Path):
        return str(obj)
    return obj


def _flatten(prefix, obj, out):
    if isinstance(obj, dict):
        for k, v in obj.items():
            _flatten(f"{prefix}.{k}" if prefix else k, v, out)
    elif isinstance(obj, list) and obj and not isinstance(obj[0], (dict, list)):
        for i, v in enumerate(obj):
            out.append((f"{prefix}[{i}]", v))
    elif isinstance(obj, list):
        for i, v in enumerate(obj):
            _flatten(f"{prefix}[{i}]", v, out)
    else:
        out.append((prefix, obj))


@dataclass
class ExperimentReport:
    summary: dict
    train_report: object
    files: dict

    def text(self):
        rows = []
        _flatten("", self.summary, rows)
        width = max(len(k) for k, _ in rows)
        return "\n".join(f"{k.ljust(width)}  {v!r}" for k, v in rows) + "\n"


def _write_outputs(out_dir, summary, train_report, extra):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    files = {
        "trace.csv": train_report.trace_csv(),
        "outer.csv": train_report.outer_csv(),
        "params.txt": dump_params(train_report.stack),
        **extra,
    }
    report = ExperimentReport(_jsonable(summary), train_report, {})
    files["report.json"] = json.dumps(report.summary, indent=2, sort_keys=True) + "\n"
    files["report.txt"] = report.text()
    for name, text in files.items():
        (out_dir / name).write_text(text)
        report.files[name] = out_dir / name
    return report


def _eval_stats(stack, cs, size, rng):
    batch = draw_batch(stack, cs, size, rng)
    R = moment_residual(batch)
    return batch, {
        "entropy": entropy_estimate(batch),
        "entropy_se": entropy_standard_error(batch),
        "residual": [float(v) for v in R],
        "residual_norm": float(np.linalg.norm(R)),
    }


def _train_with_partial(cfg, train_cfg, stack, cs, tag):
    try:
        return train(train_cfg, stack, cs)
    except TrainingError as exc:
        if exc.report is not None:
            cfg.out_dir.mkdir(parents=True, exist_ok=True)
            (cfg.out_dir / f"trace{tag}.partial.csv").write_text(exc.report.trace_csv())
        raise


def _train_summary(rep):
    return {
        "c_final": rep.cs[-1],
        "lambda_final": [float(v) for v in rep.lambdas[-1]],
        "p_values": list(rep.p_values),
        "c_updates": [int(u) for u in rep.c_updated],
    }


def fit_dirichlet_mle(samples):
    """Dirichlet MLE on S from the mean log coordinates (used for the KL proxy)."""
    s = np.asarray(samples, dtype=float)
    full = np.column_stack([s, 1.0 - s.sum(axis=1)])
    mlog = np.mean(np.log(full), axis=0)

    def nll(theta):
        a = np.exp(theta)
        val = gammaln(a).sum() - gammaln(a.sum()) - (a - 1.0) @ mlog
        grad = a * (sp_digamma(a) - sp_digamma(a.sum()) - mlog)
        return val, grad

    res = minimize(nll, np.zeros(full.shape[1]), jac=True, method="L-BFGS-B")
    return np.exp(res.x)


# ---------------------------------------------------------------------------


def run_dirichlet(cfg):
    t0 = time.perf_counter()
    alpha = DirichletParams(cfg.alpha)
    cs = DirichletConstraints(kappa_from_alpha(alpha.alpha))
    init_rng = np.random.default_rng([cfg.seed, 1])
    stack0 = FlowStack.planar(alpha.d - 1, cfg.layers, init_rng, SimplexMap(), cfg.init_scale)
    rep = _train_with_partial(cfg, cfg.train, stack0, cs, "")
    eval_rng = np.random.default_rng([cfg.seed, 2])
    batch, stats = _eval_stats(rep.stack, cs, cfg.eval_sample_size, eval_rng)
    true_h = dirichlet_entropy(alpha)

    k = cfg.mmd_sample_size
    mefn_pts = draw_batch(rep.stack, cs, k, eval_rng).transformed
    truth_pts = dirichlet_sample(alpha, eval_rng, k)
    mmd = mmd_permutation_test(mefn_pts, truth_pts, cfg.mmd_permutations, eval_rng)
    fit_alpha = fit_dirichlet_mle(batch.transformed)
    div = diversity_metrics(mefn_pts)
    summary = {
        "experiment": "dirichlet",
        "seed": cfg.seed,
        "alpha": list(alpha.alpha),
        "kappa": [float(v) for v in cs.kappa],
        "true_entropy": true_h,
        **stats,
        "entropy_gap": stats["entropy"] - true_h,
        "mmd": {"statistic": mmd.statistic, "p_value": mmd.p_value, "sigma": mmd.sigma,
                "sample_size": k, "permutations": cfg.mmd_permutations},
        "fitted_alpha": [float(v) for v in fit_alpha],
        "kl_fit_to_true": dirichlet_kl(DirichletParams(fit_alpha), alpha),
        "diversity": vars(div),
        "train": _train_summary(rep),
    }
    dim = alpha.d - 1
    coords = [f"s{j + 1}" for j in range(dim)]
    sample_rows = [list(p) + [lp, dirichlet_log_pdf(alpha, p)]
                   for p, lp in zip(batch.transformed[:1000], batch.log_densities[:1000])]
    extra = {"samples.csv": _rows_csv(coords + ["log_p_mefn", "log_p_true"], sample_rows)}
    if dim == 2:
        g = (np.arange(60) + 0.5) / 60
        grid = [(a, b) for a in g for b in g if a + b < 1]
        extra["density_grid.csv"] = _rows_csv(["s1", "s2", "log_p_true"],
                                              [(a, b, dirichlet_log_pdf(alpha, [a, b])) for a, b in grid])
    if cfg.ablation:
        abl_cfg = TrainConfig(**{**vars(cfg.train), "entropy_enabled": False})
        abl = _train_with_partial(cfg, abl_cfg, stack0, cs, "_ablation")
        abl_rng = np.random.default_rng([cfg.seed, 3])
        _, abl_stats = _eval_stats(abl.stack, cs, cfg.eval_sample_size, abl_rng)
        abl_pts = draw_batch(abl.stack, cs, k, abl_rng).transformed
        summary["ablation"] = {**abl_stats, "entropy_gap": abl_stats["entropy"] - true_h,
                               "diversity": vars(diversity_metrics(abl_pts)),
                               "train": _train_summary(abl)}
        extra["trace_ablation.csv"] = abl.trace_csv()
        extra["samples_ablation.csv"] = _rows_csv(coords, abl_pts)
    report = _write_outputs(cfg.out_dir, summary, rep, extra)
    _sidecar(cfg, t0)
    return report


def synthetic_chain(params):
    """Price every strike under a known piecewise-exponential density."""
    strikes = np.asarray(params["strikes"], dtype=float)
    if "eta" in params:
        eta = np.asarray(params["eta"], dtype=float)
    else:
        slopes = np.asarray(params["slopes"], dtype=float)
        eta = np.concatenate([[slopes[0]], np.diff(slopes)])
    D = float(params.get("discount", 1.0))
    truth = GibbsOptionModel(eta, strikes, D)
    spot = D * truth.mean()
    truth.spot = spot
    chain = OptionChain(spot, D, strikes, truth.price(strikes))
    return chain, truth


def _flow_density_grid(stack, grid):
    z0 = invert_scalar(stack, grid)
    _, ld, _ = stack.forward(z0[:, None])
    return base_log_density(z0[:, None]) - ld


def run_options(cfg):
    t0 = time.perf_counter()
    truth = None
    if cfg.chain_path is not None:
        chain = OptionChain.from_csv(cfg.chain_path)
    else:
        chain, truth = synthetic_chain(cfg.synthetic)
    train_idx = cfg.train_strikes if cfg.train_strikes is not None else (cfg.synthetic or {}).get("train")
    if train_idx is None:
        train_idx = list(range(chain.m))
    train_idx = sorted(int(i) for i in train_idx)
    test_idx = [i for i in range(chain.m) if i not in train_idx]
    train_chain = chain.subset(train_idx)
    gibbs = gibbs_option_fit(train_chain)

    cs = OptionConstraints(train_chain)
    init_rng = np.random.default_rng([cfg.seed, 1])
    mean0 = chain.spot / chain.discount
    omap = PositiveAffineMap(1.0, float(np.log(mean0) - 0.5))
    stack0 = FlowStack.planar(1, cfg.layers, init_rng, omap, cfg.init_scale)
    rep = _train_with_partial(cfg, cfg.train, stack0, cs, "")

    eval_rng = np.random.default_rng([cfg.seed, 2])
    _, stats = _eval_stats(rep.stack, cs, cfg.eval_sample_size, eval_rng)
    n_mc = cfg.price_sample_size
    s_mefn = draw_batch(rep.stack, cs, n_mc, eval_rng).transformed[:, 0]
    payoff = np.maximum(s_mefn[:, None] - chain.strikes[None, :], 0.0) * chain.discount
    mefn_price = payoff.mean(axis=0)
    mefn_se = payoff.std(axis=0, ddof=1) / np.sqrt(n_mc)
    gibbs_price = gibbs.price(chain.strikes)

    def rmse(pred, idx):
        return float(np.sqrt(np.mean((pred[idx] - chain.prices[idx]) ** 2))) if idx else float("nan")

    s_gibbs = gibbs.sample(eval_rng, n_mc)
    qq = qq_points(s_gibbs, s_mefn, QQ_PROBS)
    lo, hi = np.quantile(np.concatenate([s_gibbs, s_mefn]), [0.001, 0.999])
    grid = np.linspace(max(lo, 1e-9), hi, 201)
    mefn_logp = _flow_density_grid(rep.stack, grid)
    summary = {
        "experiment": "options",
        "seed": cfg.seed,
        "spot": chain.spot,
        "discount": chain.discount,
        "train_strikes": [float(k) for k in train_chain.strikes],
        "test_strikes": [float(chain.strikes[i]) for i in test_idx],
        **stats,
        "gibbs": {**gibbs.to_dict(), "entropy": gibbs.entropy()},
        "rmse": {
            "gibbs_train": rmse(gibbs_price, train_idx),
            "gibbs_test": rmse(gibbs_price, test_idx),
            "mefn_train": rmse(mefn_price, train_idx),
            "mefn_test": rmse(mefn_price, test_idx),
        },
        "mefn_price_se_max": float(np.max(mefn_se[train_idx])),
        "mefn_price_se_rms": float(np.sqrt(np.mean(mefn_se[train_idx] ** 2))),
        "qq_slope": qq_slope(qq),
        "train": _train_summary(rep),
    }
    if truth is not None:
        summary["truth_eta"] = [float(v) for v in truth.eta]
    price_rows = [(chain.strikes[i], chain.prices[i], gibbs_price[i], mefn_price[i], mefn_se[i],
                   "train" if i in train_idx else "test") for i in range(chain.m)]
    extra = {
        "prices.csv": _rows_csv(["strike", "observed", "gibbs", "mefn", "mefn_se", "split"], price_rows),
        "qq.csv": _rows_csv(["prob", "gibbs_quantile", "mefn_quantile"],
                            [(p, a, b) for p, (a, b) in zip(QQ_PROBS, qq)]),
        "density_grid.csv": _rows_csv(["s", "gibbs_pdf", "mefn_pdf"],
                                      [(s, g, m) for s, g, m in zip(grid, gibbs.pdf(grid), np.exp(mefn_logp))]),
        "samples.csv": _rows_csv(["s_mefn", "s_gibbs"], list(zip(s_mefn[:2000], s_gibbs[:2000]))),
        "gibbs.json": gibbs.to_text(),
    }
    report = _write_outputs(cfg.out_dir, summary, rep, extra)
    _sidecar(cfg, t0)
    return report


def _sidecar(cfg, t0):
    """Wall-clock information lives outside the deterministic outputs."""
    stamp = time.strftime("%Y-%m-%dT%H:%M:%S")
    line = f"{stamp} experiment={cfg.experiment} seed={cfg.seed} seconds={time.perf_counter() - t0:.2f}\n"
    with open(Path(cfg.out_dir) / "run.log", "a") as fh:
        fh.write(line)


def run_experiment(cfg):
    if cfg.experiment == "dirichlet":
        return run_dirichlet(cfg)
    return run_options(cfg)
