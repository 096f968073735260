"""Command-line entry points over the experiment harness."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import data_metrics as dm
from . import diffusion as df
from . import ftle as fl
from . import harness as hn
from . import pruning as pr
from . import scorenet as sn


def _load_cfg(args):
    cfg = hn.load_config(args.config) if args.config else hn.ExperimentConfig()
    if args.seed is not None:
        cfg.seeds = [args.seed]
    if args.out is not None:
        cfg.out = args.out
    return cfg


def _schedule_from_meta(meta):
    return df.make_schedule(meta["kind"], meta["T"],
                            meta["beta_min"], meta["beta_max"])


def cmd_gen_data(args):
    cfg = _load_cfg(args)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    ss = dm.sample_dataset(cfg.dataset_kind, cfg.dataset_size,
                           cfg.seeds[0] if args.seed is None else args.seed)
    path = out / f"{cfg.dataset_kind}.csv"
    dm.export_csv(ss, path)
    print(f"wrote {ss.points.shape[0]} points to {path}")


def cmd_train_dense(args):
    cfg = _load_cfg(args)
    run_seed = cfg.seeds[0]
    seeds = hn.derive_seeds(cfg.dataset_seed, run_seed)
    seed_dir = Path(cfg.out) / f"seed{run_seed}"
    net, schedule = hn.train_dense(cfg, seeds,
                                   ckpt_path=seed_dir / "dense.ckpt",
                                   log_path=seed_dir / "dense_losses.csv",
                                   resume=args.resume)
    print(f"dense teacher: {sn.param_count(net)} params, "
          f"checkpoint at {seed_dir / 'dense.ckpt'}")


def cmd_prune(args):
    cfg = _load_cfg(args)
    run_seed = cfg.seeds[0]
    seeds = hn.derive_seeds(cfg.dataset_seed, run_seed)
    net, meta = sn.load_checkpoint(args.ckpt)
    schedule = _schedule_from_meta(meta)
    data = dm.sample_dataset(cfg.dataset_kind, cfg.dataset_size,
                             seeds["data"]).points
    calib = hn._calibration_batch(data, schedule, cfg.calib_size,
                                  seeds["calib"])
    method = args.method or cfg.prune_methods[0]
    pruned, plan = pr.prune(net, method, cfg.prune_ratio,
                            calib=calib, seed=seeds["prune"])
    out = Path(args.out or cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    ckpt = out / f"pruned_{method}.ckpt"
    sn.save_checkpoint(ckpt, pruned, meta)
    (out / f"pruned_{method}_plan.json").write_text(
        json.dumps(plan.to_record(), sort_keys=True))
    print(json.dumps(plan.to_record(), sort_keys=True))
    print(f"pruned checkpoint at {ckpt}")


def cmd_finetune(args):
    cfg = _load_cfg(args)
    run_seed = cfg.seeds[0]
    seeds = hn.derive_seeds(cfg.dataset_seed, run_seed)
    teacher, meta = sn.load_checkpoint(args.teacher)
    student, _ = sn.load_checkpoint(args.student)
    schedule = _schedule_from_meta(meta)
    spec = next((s for s in hn.resolve_variants(cfg) if s.name == args.variant),
                None)
    if spec is None:
        sys.exit(f"variant {args.variant!r} not in config variants")
    data = dm.sample_dataset(cfg.dataset_kind, cfg.dataset_size,
                             seeds["data"]).points
    out = Path(args.out or cfg.out)
    net, _ = hn.run_finetune_variant(
        teacher, student, spec, cfg, schedule, data, seeds,
        ckpt_path=out / f"{args.variant}.ckpt",
        log_path=out / f"{args.variant}_losses.csv", resume=args.resume)
    print(f"finetuned checkpoint at {out / (args.variant + '.ckpt')}")


def cmd_sample(args):
    cfg = _load_cfg(args)
    net, meta = sn.load_checkpoint(args.ckpt)
    schedule = _schedule_from_meta(meta)
    seed = args.seed if args.seed is not None else 0
    x = df.sample_ddim(sn.predictor(net), schedule, args.count,
                       net.input_dim, seed)
    out = Path(args.out or cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "samples.csv"
    dm.export_csv(dm.SampleSet(x, "ddim", seed), path)
    print(f"wrote {args.count} samples to {path}")


def cmd_ftle(args):
    cfg = _load_cfg(args)
    net, meta = sn.load_checkpoint(args.ckpt)
    schedule = _schedule_from_meta(meta)
    t_start = schedule.T - 1 if cfg.ftle_t_start < 0 else cfg.ftle_t_start
    rng = np.random.default_rng(args.seed if args.seed is not None else 0)
    pts = rng.standard_normal((cfg.ftle_points, net.input_dim))
    model = sn.predictor(net)
    for t in range(schedule.T - 1, t_start, -1):
        pts = df.ddim_step(model, pts, t, t - 1, schedule)
    spec = df.FlowMapSpec(model, schedule, t_start, cfg.ftle_k)
    records = []
    for p in np.asarray(pts):
        est = fl.ftle(spec, p, max_iters=cfg.ftle_max_iters, tol=cfg.ftle_tol)
        records.append(est.to_record())
    print(json.dumps(records, sort_keys=True, indent=1))


def cmd_evaluate(args):
    cfg = _load_cfg(args)
    run_seed = cfg.seeds[0]
    seeds = hn.derive_seeds(cfg.dataset_seed, run_seed)
    net, meta = sn.load_checkpoint(args.ckpt)
    teacher, _ = sn.load_checkpoint(args.teacher or args.ckpt)
    schedule = _schedule_from_meta(meta)
    reference = dm.sample_dataset(cfg.dataset_kind, cfg.eval_reference,
                                  seeds["reference"]).points
    bandwidth = dm.median_heuristic_bandwidth(reference)
    gmm = dm.ring_mixture() if cfg.dataset_kind == "gmm_ring8" else None
    record = hn.evaluate(net, teacher, cfg, schedule, reference, bandwidth,
                         seeds, gmm=gmm)
    print(json.dumps(record, sort_keys=True, indent=1))


def cmd_run(args):
    cfg = _load_cfg(args)
    hn.run_pipeline(cfg, resume=args.resume)
    print(f"report at {Path(cfg.out) / 'report.json'}")


def cmd_report(args):
    cfg = _load_cfg(args)
    report_path = Path(args.out or cfg.out) / "report.json"
    report = json.loads(report_path.read_text())
    hn.write_tables(report, report_path.parent / "tables.csv")
    print(f"tables at {report_path.parent / 'tables.csv'}")


def main(argv=None):
    parser = argparse.ArgumentParser(
        prog="lyapdistill",
        description="Toy diffusion pruning and finetuning experiments")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="path to a section.key = value config")
        p.add_argument("--seed", type=int, help="run seed override")
        p.add_argument("--out", help="output directory override")
        p.add_argument("--resume", action="store_true",
                       help="reuse existing checkpoints instead of retraining")
        return p

    common(sub.add_parser("gen-data", help="export dataset samples to CSV")) \
        .set_defaults(fn=cmd_gen_data)
    common(sub.add_parser("train-dense", help="train the dense teacher")) \
        .set_defaults(fn=cmd_train_dense)
    p = common(sub.add_parser("prune", help="prune a dense checkpoint"))
    p.add_argument("--ckpt", required=True)
    p.add_argument("--method", choices=pr.METHODS)
    p.set_defaults(fn=cmd_prune)
    p = common(sub.add_parser("finetune", help="finetune a pruned student"))
    p.add_argument("--teacher", required=True)
    p.add_argument("--student", required=True)
    p.add_argument("--variant", required=True)
    p.set_defaults(fn=cmd_finetune)
    p = common(sub.add_parser("sample", help="generate samples from a checkpoint"))
    p.add_argument("--ckpt", required=True)
    p.add_argument("--count", type=int, default=10000)
    p.set_defaults(fn=cmd_sample)
    p = common(sub.add_parser("ftle", help="finite-time Lyapunov exponents"))
    p.add_argument("--ckpt", required=True)
    p.set_defaults(fn=cmd_ftle)
    p = common(sub.add_parser("evaluate", help="metrics for one checkpoint"))
    p.add_argument("--ckpt", required=True)
    p.add_argument("--teacher")
    p.set_defaults(fn=cmd_evaluate)
    common(sub.add_parser("run", help="full pipeline over all seeds")) \
        .set_defaults(fn=cmd_run)
    common(sub.add_parser("report", help="re-render tables.csv from report.json")) \
        .set_defaults(fn=cmd_report)

    args = parser.parse_args(argv)
    args.fn(args)
    return 0
