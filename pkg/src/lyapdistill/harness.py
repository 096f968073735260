"""Experiment orchestration: config, training loops, evaluation, reports.

A pipeline run is train dense teacher -> prune -> finetune each variant ->
evaluate, repeated per seed. Every random draw descends from a named
SeedSequence child of (dataset seed, run seed), so an identical config
reproduces report.json bit for bit. Wall-clock numbers are written to a
separate timings file to keep the report inside the determinism contract.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import data_metrics as dm
from . import diffusion as df
from . import ftle as fl
from . import losses as ls
from . import pruning as pr
from . import scorenet as sn


class TrainingDiverged(RuntimeError):
    def __init__(self, step, message):
        super().__init__(f"training diverged at step {step}: {message}")
        self.step = step


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

def _pbool(s):
    v = s.strip().lower()
    if v in ("true", "yes", "1"):
        return True
    if v in ("false", "no", "0"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _pints(s):
    return [int(p) for p in str(s).split(",") if p.strip()]


def _pstrs(s):
    return [p.strip() for p in str(s).split(",") if p.strip()]


@dataclass
class ExperimentConfig:
    dataset_kind: str = "gmm_ring8"
    dataset_size: int = 20000
    dataset_seed: int = 0
    input_dim: int = 2
    hidden_widths: list = field(default_factory=lambda: [128, 128, 128])
    time_embed_dim: int = 32
    activation: str = "silu"
    schedule_kind: str = "linear"
    T: int = 100
    beta_min: float = 1e-4
    beta_max: float = 0.02
    train_steps: int = 5000
    train_lr: float = 1e-3
    train_batch: int = 256
    log_every: int = 100
    prune_methods: list = field(default_factory=lambda: ["magnitude"])
    prune_ratio: float = 0.5
    calib_size: int = 256
    ft_steps: int = 2000
    ft_lr: float = 3e-4
    ft_batch: int = 256
    variants: list = field(default_factory=lambda: ["np", "np_kd", "np_kd_2nd"])
    variant_overrides: dict = field(default_factory=dict)
    eval_samples: int = 10000
    eval_reference: int = 10000
    sw_projections: int = 128
    sme_count: int = 4096
    sme_t: int = -1
    ftle_points: int = 16
    ftle_t_start: int = -1
    ftle_k: int = 10
    # near-isotropic Jacobians make the Rayleigh quotient drift slowly, so
    # evaluation allows more iterations than the estimator's own default
    ftle_max_iters: int = 400
    ftle_tol: float = 1e-6
    seeds: list = field(default_factory=lambda: [0])
    out: str = "runs/default"


# config key -> (attribute, parser). The README documents this list.
_KEYS = {
    "dataset.kind": ("dataset_kind", str),
    "dataset.size": ("dataset_size", int),
    "dataset.seed": ("dataset_seed", int),
    "model.input_dim": ("input_dim", int),
    "model.hidden_widths": ("hidden_widths", _pints),
    "model.time_embed_dim": ("time_embed_dim", int),
    "model.activation": ("activation", str),
    "schedule.kind": ("schedule_kind", str),
    "schedule.T": ("T", int),
    "schedule.beta_min": ("beta_min", float),
    "schedule.beta_max": ("beta_max", float),
    "train.steps": ("train_steps", int),
    "train.lr": ("train_lr", float),
    "train.batch_size": ("train_batch", int),
    "train.log_every": ("log_every", int),
    "prune.method": ("prune_methods", _pstrs),
    "prune.ratio": ("prune_ratio", float),
    "prune.calib_size": ("calib_size", int),
    "finetune.steps": ("ft_steps", int),
    "finetune.lr": ("ft_lr", float),
    "finetune.batch_size": ("ft_batch", int),
    "finetune.variants": ("variants", _pstrs),
    "eval.sample_count": ("eval_samples", int),
    "eval.reference_count": ("eval_reference", int),
    "eval.sw_projections": ("sw_projections", int),
    "eval.sme_count": ("sme_count", int),
    "eval.sme_t": ("sme_t", int),
    "eval.ftle_points": ("ftle_points", int),
    "eval.ftle_t_start": ("ftle_t_start", int),
    "eval.ftle_k": ("ftle_k", int),
    "eval.ftle_max_iters": ("ftle_max_iters", int),
    "eval.ftle_tol": ("ftle_tol", float),
    "run.seeds": ("seeds", _pints),
    "run.out": ("out", str),
}

_VARIANT_FIELDS = {
    "lambda_np": float, "lambda_kd": float, "lambda_jac": float,
    "n_probes": int, "first_jac": _pbool, "steps": int, "lr": float,
}

# (lambda_np, lambda_kd, lambda_jac, first_jac)
_VARIANT_PRESETS = {
    "np": (1.0, 0.0, 0.0, False),
    "np_kd": (1.0, 1.0, 0.0, False),
    "np_kd_1st": (1.0, 1.0, 0.1, True),
    "np_kd_2nd": (1.0, 1.0, 0.1, False),
}


def parse_config(text):
    """Parse flat 'section.key = value' lines; unknown keys are errors."""
    cfg = ExperimentConfig()
    for ln, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {ln}: expected 'key = value', got {raw!r}")
        key, value = (p.strip() for p in line.split("=", 1))
        if key.startswith("variant."):
            parts = key.split(".")
            if len(parts) != 3 or parts[2] not in _VARIANT_FIELDS:
                raise ValueError(f"line {ln}: unknown variant key {key!r}")
            _, name, fld = parts
            cfg.variant_overrides.setdefault(name, {})[fld] = \
                _VARIANT_FIELDS[fld](value)
        elif key in _KEYS:
            attr, conv = _KEYS[key]
            setattr(cfg, attr, conv(value))
        else:
            raise ValueError(f"line {ln}: unknown config key {key!r}")
    validate_config(cfg)
    return cfg


def load_config(path):
    return parse_config(Path(path).read_text())


def validate_config(cfg):
    if cfg.dataset_kind not in ("gmm_ring8", "two_moons", "checkerboard"):
        raise ValueError(f"unknown dataset kind {cfg.dataset_kind!r}")
    if cfg.activation not in ("tanh", "silu"):
        raise ValueError(f"unknown activation {cfg.activation!r}")
    if cfg.schedule_kind not in ("linear", "cosine"):
        raise ValueError(f"unknown schedule kind {cfg.schedule_kind!r}")
    for m in cfg.prune_methods:
        if m not in pr.METHODS:
            raise ValueError(f"unknown pruning method {m!r}")
    if not 0.0 < cfg.prune_ratio < 1.0:
        raise ValueError("prune.ratio must lie in (0, 1)")
    if not cfg.seeds:
        raise ValueError("run.seeds must be nonempty")
    if not cfg.variants:
        raise ValueError("finetune.variants must be nonempty")
    for name in cfg.variants:
        if name not in _VARIANT_PRESETS and name not in cfg.variant_overrides:
            raise ValueError(f"variant {name!r} is neither a preset nor defined "
                             f"by variant.{name}.* keys")
    resolve_variants(cfg)  # surfaces invalid weight combinations early


def config_echo(cfg):
    """The config as a flat canonical-key dict, for the report."""
    echo = {}
    for key, (attr, _) in _KEYS.items():
        echo[key] = getattr(cfg, attr)
    for name, fields in sorted(cfg.variant_overrides.items()):
        for fld, val in sorted(fields.items()):
            echo[f"variant.{name}.{fld}"] = val
    return echo


@dataclass
class VariantSpec:
    name: str
    weights: ls.LossWeights
    steps: int
    lr: float


def resolve_variants(cfg):
    """Named finetune variants with overrides applied."""
    specs = []
    for name in cfg.variants:
        lnp, lkd, ljac, first = _VARIANT_PRESETS.get(name, (1.0, 0.0, 0.0, False))
        ov = cfg.variant_overrides.get(name, {})
        weights = ls.LossWeights(
            lambda_np=ov.get("lambda_np", lnp),
            lambda_kd=ov.get("lambda_kd", lkd),
            lambda_jac=ov.get("lambda_jac", ljac),
            n_probes=ov.get("n_probes", 1),
            enable_first_jac=ov.get("first_jac", first))
        specs.append(VariantSpec(name, weights,
                                 ov.get("steps", cfg.ft_steps),
                                 ov.get("lr", cfg.ft_lr)))
    return specs


def derive_seeds(base, run_seed):
    """Named independent integer seeds for one (config, run seed) pair."""
    names = ("data", "reference", "init", "train", "calib", "prune",
             "finetune", "probes", "eval", "evalkd", "ftle", "sme")
    root = np.random.SeedSequence([int(base), int(run_seed)])
    return {n: int(c.generate_state(1, np.uint64)[0])
            for n, c in zip(names, root.spawn(len(names)))}


# ---------------------------------------------------------------------------
# optimization
# ---------------------------------------------------------------------------

class Adam:
    """Standard bias-corrected adaptive moment estimation."""

    def __init__(self, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = None
        self.v = None
        self.t = 0

    def update(self, params, grad):
        if self.m is None:
            self.m = np.zeros_like(params)
            self.v = np.zeros_like(params)
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad * grad
        mh = self.m / (1 - self.beta1 ** self.t)
        vh = self.v / (1 - self.beta2 ** self.t)
        return params - self.lr * mh / (np.sqrt(vh) + self.eps)


def _write_csv(path, header, rows):
    if path is None:
        return
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        f.write(",".join(header) + "\n")
        for row in rows:
            f.write(",".join(repr(c) if isinstance(c, float) else str(c)
                             for c in row) + "\n")


def train_dense(cfg, seeds, ckpt_path=None, log_path=None, resume=False):
    """Train the dense teacher with the noise-prediction loss alone."""
    schedule = df.make_schedule(cfg.schedule_kind, cfg.T,
                                cfg.beta_min, cfg.beta_max)
    if resume and ckpt_path is not None and Path(ckpt_path).exists():
        net, _ = sn.load_checkpoint(ckpt_path)
        return net, schedule
    data = dm.sample_dataset(cfg.dataset_kind, cfg.dataset_size,
                             seeds["data"]).points
    net = sn.init_network(cfg.input_dim, cfg.hidden_widths,
                          cfg.time_embed_dim, cfg.activation, seeds["init"])
    rng = np.random.default_rng(seeds["train"])
    opt = Adam(cfg.train_lr)
    params = net.params.copy()
    rows = []
    for step in range(cfg.train_steps):
        idx = rng.integers(0, data.shape[0], cfg.train_batch)
        t = rng.integers(0, schedule.T, cfg.train_batch)
        eps = rng.standard_normal((cfg.train_batch, cfg.input_dim))
        batch = (data[idx], t, eps)

        def step_loss(p):
            model = lambda x, tt: sn.forward(net, x, tt, params=p)
            return ls.loss_np(model, batch, schedule)

        try:
            val, g = ad.value_and_grad(step_loss, params)
        except ad.NonFiniteError as e:
            _write_csv(log_path, ("step", "loss_np"), rows)
            raise TrainingDiverged(step, str(e))
        params = opt.update(params, g)
        if step % cfg.log_every == 0 or step == cfg.train_steps - 1:
            rows.append((step, val))
    net = net.with_params(params)
    _write_csv(log_path, ("step", "loss_np"), rows)
    if ckpt_path is not None:
        Path(ckpt_path).parent.mkdir(parents=True, exist_ok=True)
        sn.save_checkpoint(ckpt_path, net, schedule.meta())
    return net, schedule


def _final_losses_from_csv(log_path):
    """Loss breakdown of the last logged step, or None without a log."""
    if log_path is None or not Path(log_path).exists():
        return None
    lines = Path(log_path).read_text().strip().splitlines()
    if len(lines) < 2:
        return None
    last = lines[-1].split(",")
    return {"total": float(last[1]), "loss_np": float(last[2]),
            "loss_kd": float(last[3]), "loss_jac": float(last[4])}


def run_finetune_variant(teacher, student, spec, cfg, schedule, data, seeds,
                         ckpt_path=None, log_path=None, resume=False):
    """Finetune one pruned student with the combined objective."""
    if sn.param_count(student) >= sn.param_count(teacher):
        raise ValueError("student must be strictly smaller than the teacher")
    if resume and ckpt_path is not None and Path(ckpt_path).exists():
        net, _ = sn.load_checkpoint(ckpt_path)
        return net, _final_losses_from_csv(log_path)
    teacher_model = sn.predictor(teacher)
    rng = np.random.default_rng(seeds["finetune"])
    probe_rng = np.random.default_rng(seeds["probes"])
    opt = Adam(spec.lr)
    params = student.params.copy()
    rows = []
    last_parts = None
    for step in range(spec.steps):
        idx = rng.integers(0, data.shape[0], cfg.ft_batch)
        t = rng.integers(0, schedule.T, cfg.ft_batch)
        eps = rng.standard_normal((cfg.ft_batch, cfg.input_dim))
        probe_seed = int(probe_rng.integers(0, 2 ** 63))
        batch = (data[idx], t, eps)
        box = {}

        def step_loss(p):
            model = lambda x, tt: sn.forward(student, x, tt, params=p)
            total, parts = ls.total_loss(spec.weights, model, teacher_model,
                                         batch, schedule, probe_seed)
            box.update(parts)
            return total

        try:
            _, g = ad.value_and_grad(step_loss, params)
        except ad.NonFiniteError as e:
            _write_csv(log_path, ("step", "loss_total", "loss_np", "loss_kd",
                                  "loss_jac", "probe_seed"), rows)
            raise TrainingDiverged(step, str(e))
        params = opt.update(params, g)
        last_parts = dict(box)
        if step % cfg.log_every == 0 or step == spec.steps - 1:
            rows.append((step, box["total"], box["loss_np"], box["loss_kd"],
                         box["loss_jac"], probe_seed))
    net = student.with_params(params)
    _write_csv(log_path, ("step", "loss_total", "loss_np", "loss_kd",
                          "loss_jac", "probe_seed"), rows)
    if ckpt_path is not None:
        Path(ckpt_path).parent.mkdir(parents=True, exist_ok=True)
        sn.save_checkpoint(ckpt_path, net, schedule.meta())
    return net, last_parts


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

def evaluate(model_net, teacher_net, cfg, schedule, reference, bandwidth,
             seeds, gmm=None):
    """Sample-quality and sensitivity metrics for one checkpoint.

    All variants within a run seed share reference points, kernel bandwidth,
    projection seed, and FTLE start points, so differences between rows come
    from the models alone.
    """
    model = sn.predictor(model_net)
    teacher = sn.predictor(teacher_net)
    dim = model_net.input_dim
    samples = df.sample_ddim(model, schedule, cfg.eval_samples, dim,
                             seeds["eval"])
    mmd = dm.mmd_rbf(samples, reference, bandwidth)
    sw = dm.sliced_wasserstein(samples, reference, cfg.sw_projections,
                               seed=seeds["eval"])
    record = {"mmd": float(mmd), "sliced_wasserstein": float(sw),
              "bandwidth": float(bandwidth)}

    if gmm is not None:
        t_sme = cfg.T // 2 if cfg.sme_t < 0 else cfg.sme_t
        est, se = dm.score_matching_error(model, gmm, schedule, t_sme,
                                          cfg.sme_count, seeds["sme"])
        record["sme"] = est
        record["sme_stderr"] = se
    else:
        record["sme"] = None
        record["sme_stderr"] = None

    t_start = schedule.T - 1 if cfg.ftle_t_start < 0 else cfg.ftle_t_start
    rng = np.random.default_rng(seeds["ftle"])
    pts = rng.standard_normal((cfg.ftle_points, dim))
    for t in range(schedule.T - 1, t_start, -1):
        pts = ad.value_of(df.ddim_step(model, pts, t, t - 1, schedule))
    try:
        avg = fl.ftle_model_average(model, schedule, pts, t_start, cfg.ftle_k,
                                    max_iters=cfg.ftle_max_iters,
                                    tol=cfg.ftle_tol, seed=seeds["ftle"])
        record["ftle"] = avg.mean
        record["ftle_stderr"] = avg.stderr
        record["ftle_skipped"] = avg.n_skipped
    except ValueError:
        # every start point failed to converge: report the miss, don't abort
        record["ftle"] = None
        record["ftle_stderr"] = None
        record["ftle_skipped"] = cfg.ftle_points

    # distillation gap on a held-out perturbed batch; zero for the teacher
    krng = np.random.default_rng(seeds["evalkd"])
    n_kd = min(2048, reference.shape[0])
    idx = krng.integers(0, reference.shape[0], n_kd)
    t = krng.integers(0, schedule.T, n_kd)
    eps = krng.standard_normal((n_kd, dim))
    xt = ad.value_of(df.forward_perturb(reference[idx], t, eps, schedule))
    record["kd_eval"] = float(ad.value_of(
        ls.loss_kd(model, teacher, (xt, t))))
    return record


# ---------------------------------------------------------------------------
# pipeline
# ---------------------------------------------------------------------------

def _calibration_batch(data, schedule, size, seed):
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, data.shape[0], size)
    t = rng.integers(0, schedule.T, size)
    eps = rng.standard_normal((size, data.shape[1]))
    xt = ad.value_of(df.forward_perturb(data[idx], t, eps, schedule))
    return xt, t, eps


def _result_row(run_seed, method, variant, status, metrics=None, plan=None,
                net=None, teacher_ftle=None, final_losses=None):
    row = {"seed": run_seed, "method": method, "variant": variant,
           "status": status,
           "params": None, "macs": None, "achieved_ratio": None,
           "mmd": None, "sliced_wasserstein": None, "sme": None,
           "sme_stderr": None, "ftle": None, "ftle_stderr": None,
           "ftle_skipped": None, "ftle_gap": None, "kd_eval": None,
           "bandwidth": None, "final_losses": final_losses}
    if net is not None:
        row["params"] = sn.param_count(net)
        row["macs"] = sn.mac_count(net)
    if plan is not None:
        row["achieved_ratio"] = plan.achieved_ratio
        row["plan"] = plan.to_record()
    if metrics is not None:
        row.update(metrics)
        if teacher_ftle is not None and metrics.get("ftle") is not None:
            row["ftle_gap"] = abs(metrics["ftle"] - teacher_ftle)
    return row


def aggregate_results(results):
    """Median and spread per (method, variant) over seeds with status ok."""
    groups = {}
    for r in results:
        if r["status"] != "ok":
            continue
        groups.setdefault((r["method"], r["variant"]), []).append(r)
    agg = {}
    for (method, variant), rows in sorted(groups.items()):
        entry = {"n": len(rows)}
        for key in ("mmd", "sliced_wasserstein", "sme", "ftle", "ftle_gap"):
            vals = [r[key] for r in rows if r[key] is not None]
            if vals:
                arr = np.asarray(vals, dtype=np.float64)
                entry[f"{key}_median"] = float(np.median(arr))
                entry[f"{key}_mean"] = float(arr.mean())
                entry[f"{key}_std"] = float(arr.std(ddof=1)) if arr.size > 1 else 0.0
        agg[f"{method}/{variant}"] = entry
    return agg


def pooled_stderr(agg_a, agg_b, key):
    """Two-sample standard error for comparing group medians with slack."""
    va = agg_a.get(f"{key}_std", 0.0) ** 2 / max(agg_a["n"], 1)
    vb = agg_b.get(f"{key}_std", 0.0) ** 2 / max(agg_b["n"], 1)
    return float(np.sqrt(va + vb))


def run_pipeline(cfg, resume=False):
    """Execute the full experiment; returns the report dict after writing
    report.json, tables.csv, and timings.json under cfg.out."""
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    specs = resolve_variants(cfg)
    results = []
    timings = {}
    for run_seed in cfg.seeds:
        t_seed0 = time.perf_counter()
        seeds = derive_seeds(cfg.dataset_seed, run_seed)
        seed_dir = out / f"seed{run_seed}"
        seed_dir.mkdir(parents=True, exist_ok=True)
        reference = dm.sample_dataset(cfg.dataset_kind, cfg.eval_reference,
                                      seeds["reference"]).points
        bandwidth = dm.median_heuristic_bandwidth(reference)
        gmm = dm.ring_mixture() if cfg.dataset_kind == "gmm_ring8" else None

        try:
            teacher, schedule = train_dense(
                cfg, seeds, ckpt_path=seed_dir / "dense.ckpt",
                log_path=seed_dir / "dense_losses.csv", resume=resume)
        except TrainingDiverged as e:
            (seed_dir / "dense_diverged.json").write_text(
                json.dumps({"seed": run_seed, "step": e.step, "error": str(e)}))
            results.append(_result_row(run_seed, "dense", "dense", "diverged"))
            for method in cfg.prune_methods:
                for spec in specs:
                    results.append(_result_row(run_seed, method, spec.name,
                                               "skipped"))
            continue

        teacher_metrics = evaluate(teacher, teacher, cfg, schedule, reference,
                                   bandwidth, seeds, gmm=gmm)
        results.append(_result_row(run_seed, "dense", "dense", "ok",
                                   metrics=teacher_metrics, net=teacher,
                                   teacher_ftle=teacher_metrics["ftle"]))
        data = dm.sample_dataset(cfg.dataset_kind, cfg.dataset_size,
                                 seeds["data"]).points
        calib = _calibration_batch(data, schedule, cfg.calib_size,
                                   seeds["calib"])
        timings[f"seed{run_seed}/dense"] = time.perf_counter() - t_seed0

        for method in cfg.prune_methods:
            pruned, plan = pr.prune(teacher, method, cfg.prune_ratio,
                                    calib=calib, seed=seeds["prune"])
            mdir = seed_dir / method
            mdir.mkdir(parents=True, exist_ok=True)
            (mdir / "plan.json").write_text(
                json.dumps(plan.to_record(), sort_keys=True))
            for spec in specs:
                t_var = time.perf_counter()
                try:
                    student, parts = run_finetune_variant(
                        teacher, pruned, spec, cfg, schedule, data, seeds,
                        ckpt_path=mdir / f"{spec.name}.ckpt",
                        log_path=mdir / f"{spec.name}_losses.csv",
                        resume=resume)
                except TrainingDiverged as e:
                    (mdir / f"{spec.name}_diverged.json").write_text(
                        json.dumps({"seed": run_seed, "step": e.step,
                                    "error": str(e)}))
                    results.append(_result_row(run_seed, method, spec.name,
                                               "diverged", plan=plan))
                    continue
                metrics = evaluate(student, teacher, cfg, schedule, reference,
                                   bandwidth, seeds, gmm=gmm)
                results.append(_result_row(
                    run_seed, method, spec.name, "ok", metrics=metrics,
                    plan=plan, net=student,
                    teacher_ftle=teacher_metrics["ftle"],
                    final_losses=parts))
                timings[f"seed{run_seed}/{method}/{spec.name}"] = \
                    time.perf_counter() - t_var

    report = {"config": config_echo(cfg),
              "results": results,
              "aggregates": aggregate_results(results)}
    write_report(report, out)
    (out / "timings.json").write_text(
        json.dumps(timings, sort_keys=True, indent=1))
    return report


_TABLE_COLUMNS = ("seed", "method", "variant", "status", "params", "macs",
                  "achieved_ratio", "mmd", "sliced_wasserstein", "sme",
                  "ftle", "ftle_stderr", "ftle_gap", "kd_eval")


def write_report(report, out_dir):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(
        json.dumps(report, sort_keys=True, separators=(",", ":")))
    write_tables(report, out / "tables.csv")


def write_tables(report, path):
    rows = []
    for r in report["results"]:
        rows.append(tuple("" if r.get(c) is None else
                          (repr(r[c]) if isinstance(r[c], float) else str(r[c]))
                          for c in _TABLE_COLUMNS))
    with open(path, "w") as f:
        f.write(",".join(_TABLE_COLUMNS) + "\n")
        for row in rows:
            f.write(",".join(row) + "\n")
