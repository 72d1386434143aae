"""Command line entry point ``ampost``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from .diffusion import NoiseSchedule
from .distill import DistillConfig, condition_dim, distill_train, write_trace_csv
from .flow import CONDITION_MODES, ConditionalFlow, condition_vector, sample_posterior
from .harness.config import load_config
from .harness.evaluate import DPSReconstructor, FlowReconstructor, evaluate
from .harness.images import emit_image
from .operators import (
    dataset_shape,
    gen_toy_dataset,
    load_dataset,
    load_measurements,
    measure_dataset,
    parse_operator,
    save_dataset,
    save_measurements,
)
from .samplers import SamplerConfig, dps_sample, reverse_sde_sample
from .score import ScoreNetwork, ScoreTrainConfig, train_score
from .tensorcore.container import write_container
from .tensorcore.rng import make_rng, split

log = logging.getLogger("ampost")


def _shape(text: str | None):
    if not text:
        return None
    return tuple(int(v) for v in text.lower().split("x"))


def cmd_make_data(args) -> int:
    rng = make_rng(args.seed)
    data_rng, meas_rng = split(rng, 2)
    xs = gen_toy_dataset(args.kind, args.n, data_rng)
    if not args.op:
        save_dataset(args.out, xs)
        log.info("wrote %d %s samples to %s", len(xs), args.kind, args.out)
        return 0
    factory = parse_operator(args.op, dataset_shape(args.kind))
    mset = measure_dataset(factory, xs, args.sigma_y, meas_rng)
    save_measurements(args.out, mset, truth=xs if args.split == "eval" else None)
    log.info("wrote %d measurements (%s, %s split) to %s", len(mset), args.op, args.split, args.out)
    return 0


def cmd_train_score(args) -> int:
    cfg_map = load_config(args.config)
    cfg = ScoreTrainConfig.from_config(cfg_map)
    if args.iterations is not None:
        cfg.iterations = args.iterations
    cfg.checkpoint = args.out
    sched = NoiseSchedule.from_config(cfg_map)
    data = load_dataset(args.data)
    res = train_score(data, cfg, sched, make_rng(args.seed))
    log.info("held-out DSM loss %.5f -> %.5f", res.initial_holdout_loss, res.final_holdout_loss)
    return 0


def _flow_from_config(cfg_map, dim: int, cond_dim: int, rng) -> ConditionalFlow:
    return ConditionalFlow(
        dim, cond_dim,
        steps=int(cfg_map.get("flow.steps", 24)),
        hidden_width=int(cfg_map.get("flow.hidden_width", 64)),
        hidden_layers=int(cfg_map.get("flow.hidden_layers", 2)),
        output_sigmoid=str(cfg_map.get("flow.output_sigmoid", "false")).lower() in ("1", "true", "yes", "on"),
        rng=rng,
    )


def cmd_distill(args) -> int:
    cfg_map = load_config(args.config)
    cfg = DistillConfig.from_config(cfg_map)
    if args.iterations is not None:
        cfg.iterations = args.iterations
    score = ScoreNetwork.load(args.score)
    mset, truth = load_measurements(args.measurements)
    if truth is not None:
        log.warning("measurement container holds ground truth; it is ignored during distillation")
    init_rng, train_rng = split(make_rng(args.seed), 2)
    flow = _flow_from_config(cfg_map, mset.in_dim, condition_dim(mset, cfg.condition_mode), init_rng)
    res = distill_train(flow, score, mset, cfg, score.sched, train_rng)
    flow.save(args.out, extra={"condition_mode": CONDITION_MODES.index(cfg.condition_mode)})
    if args.trace:
        write_trace_csv(args.trace, res.trace)
    log.info("final total cost %.4f", float(res.totals[-1]) if len(res.totals) else float("nan"))
    return 0


def _load_flow(path):
    flow, meta = ConditionalFlow.load(path)
    mode = CONDITION_MODES[int(meta["condition_mode"][0])] if "condition_mode" in meta else CONDITION_MODES[1]
    return flow, mode


def cmd_sample(args) -> int:
    rng = make_rng(args.seed)
    mset, _ = load_measurements(args.measurements)
    out = []
    if args.method == "flow":
        if not args.flow:
            raise SystemExit("--flow is required for --method flow")
        flow, mode = _load_flow(args.flow)
        for i in range(len(mset)):
            mask = None if mset.masks is None else mset.masks[i]
            xs = sample_posterior(flow, condition_vector(mset.y[i], mask, mode), args.n_samples, rng)
            out.append(xs.mean(axis=0))
    else:
        score = ScoreNetwork.load(args.score)
        cfg = SamplerConfig(steps=args.steps, zeta=args.zeta)
        for i in range(len(mset)):
            if args.method == "dps":
                meas = mset.item(i)
                xs = dps_sample(score, score.sched, meas, meas.op, cfg, rng, n=args.n_samples)
            else:
                xs = reverse_sde_sample(score, score.sched, cfg, rng, n=args.n_samples)
            out.append(xs.mean(axis=0))
    write_container(args.out, {"x": np.stack(out), "id": mset.ids})
    log.info("wrote %d reconstructions to %s", len(out), args.out)
    return 0


def cmd_evaluate(args) -> int:
    mset, truth = load_measurements(args.measurements)
    if truth is None:
        raise SystemExit("evaluation needs a container with held-out ground truth (make-data --split eval)")
    rng = make_rng(args.seed)
    if args.method == "flow":
        flow, mode = _load_flow(args.flow)
        recon = FlowReconstructor(flow, args.n_samples, mode)
    else:
        score = ScoreNetwork.load(args.score)
        recon = DPSReconstructor(score, score.sched, SamplerConfig(steps=args.steps, zeta=args.zeta))
    shape = _shape(args.image_shape)
    reports, agg = evaluate(recon, mset, truth, rng, image_shape=shape, csv_path=args.out)
    print(f"psnr {agg.psnr:.3f}  ssim {agg.ssim:.4f}  mse {agg.mse:.6f}  wall {agg.wall_time:.5f}s  nfe {agg.nfe}")
    if args.images and shape is not None:
        folder = Path(args.images)
        folder.mkdir(parents=True, exist_ok=True)
        for i in range(min(len(mset), args.max_images)):
            x = recon(mset, i, rng)
            emit_image(x, shape, folder / f"{i:04d}_recon.pgm")
            emit_image(truth[i], shape, folder / f"{i:04d}_truth.pgm")
            emit_image(mset.y[i], shape, folder / f"{i:04d}_meas.pgm")
    return 0


def cmd_oracle_check(args) -> int:
    from .harness.experiments import LinearGaussianProblem, distill_linear_gaussian, moment_errors
    from .harness.evaluate import posterior_stats
    from .harness.oracle import gaussian_flow_loglik
    from .samplers import pf_ode_loglik

    rng = make_rng(args.seed)
    prob = LinearGaussianProblem()
    ok = True
    pts = prob.mu0 + rng.standard_normal((10, 2)) * np.sqrt(prob.var0)
    ll = pf_ode_loglik(prob.score, prob.sched, pts)
    ref = gaussian_flow_loglik(prob.mu0, prob.var0, prob.sched, pts)
    gap = float(np.max(np.abs(ll - ref)))
    ok &= gap < 1e-3
    print(f"pf-ode log-likelihood vs closed form: max gap {gap:.2e}  {'PASS' if gap < 1e-3 else 'FAIL'}")
    mset = prob.measurements(args.n_measurements, rng)
    cfg = DistillConfig(lr=1e-3, lr_schedule="cosine", batch_size=256, iterations=args.iterations, log_every=0)
    flow = distill_linear_gaussian(prob, mset, rng, cfg)
    for y in (-2.0, -0.5, 0.3, 1.0, 2.5):
        mean, cov, _ = posterior_stats(flow, np.array([y]), 10_000, rng)
        em, ec = moment_errors(mean, cov, prob.posterior(y))
        passed = em < 0.05 and ec < 0.15
        ok &= passed
        print(f"y={y:+.2f}  mean err {em:.4f}  cov rel err {ec:.4f}  {'PASS' if passed else 'FAIL'}")
    return 0 if ok else 1


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ampost", description="Amortized posterior sampling with distilled diffusion priors.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    q = sub.add_parser("make-data", help="generate a toy dataset or measurement container")
    q.add_argument("--kind", required=True, choices=["gauss2d", "mixture2d", "moons", "blobs8x8", "sphere_field"])
    q.add_argument("--n", type=int, required=True)
    q.add_argument("--op", default=None, help="operator spec, e.g. mask:p=0.3, blur:sigma=1.0, down:f=2, id")
    q.add_argument("--sigma-y", type=float, default=0.1)
    q.add_argument("--split", choices=["train", "eval"], default="train",
                   help="eval containers also hold the ground truth")
    q.add_argument("--seed", type=int, default=0)
    q.add_argument("--out", required=True)
    q.set_defaults(func=cmd_make_data)

    q = sub.add_parser("train-score", help="fit a score network by denoising score matching")
    q.add_argument("--config", default=None)
    q.add_argument("--data", required=True)
    q.add_argument("--out", required=True)
    q.add_argument("--iterations", type=int, default=None)
    q.add_argument("--seed", type=int, default=0)
    q.set_defaults(func=cmd_train_score)

    q = sub.add_parser("distill", help="distill a frozen score prior into a conditional flow")
    q.add_argument("--score", required=True)
    q.add_argument("--measurements", required=True)
    q.add_argument("--config", default=None)
    q.add_argument("--out", required=True)
    q.add_argument("--trace", default=None, help="CSV path for the loss trace")
    q.add_argument("--iterations", type=int, default=None)
    q.add_argument("--seed", type=int, default=0)
    q.set_defaults(func=cmd_distill)

    q = sub.add_parser("sample", help="reconstruct every measurement in a container")
    q.add_argument("--method", choices=["flow", "dps", "uncond"], required=True)
    q.add_argument("--steps", type=int, default=1000)
    q.add_argument("--zeta", type=float, default=1e-3)
    q.add_argument("--score", default=None)
    q.add_argument("--flow", default=None)
    q.add_argument("--measurements", required=True)
    q.add_argument("--n-samples", type=int, default=1, help="draws averaged per reconstruction")
    q.add_argument("--out", required=True)
    q.add_argument("--seed", type=int, default=0)
    q.set_defaults(func=cmd_sample)

    q = sub.add_parser("evaluate", help="PSNR/SSIM/MSE/time per measurement, written as CSV")
    q.add_argument("--method", choices=["flow", "dps"], required=True)
    q.add_argument("--score", default=None)
    q.add_argument("--flow", default=None)
    q.add_argument("--measurements", required=True)
    q.add_argument("--n-samples", type=int, default=1)
    q.add_argument("--steps", type=int, default=1000)
    q.add_argument("--zeta", type=float, default=1e-3)
    q.add_argument("--image-shape", default=None, help="e.g. 8x8; enables 2D SSIM and image output")
    q.add_argument("--images", default=None, help="folder for PGM renderings")
    q.add_argument("--max-images", type=int, default=8)
    q.add_argument("--out", required=True)
    q.add_argument("--seed", type=int, default=0)
    q.set_defaults(func=cmd_evaluate)

    q = sub.add_parser("oracle-check", help="distill the linear-Gaussian toy and compare with the exact posterior")
    q.add_argument("--iterations", type=int, default=12000)
    q.add_argument("--n-measurements", type=int, default=2000)
    q.add_argument("--seed", type=int, default=0)
    q.set_defaults(func=cmd_oracle_check)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    return int(args.func(args) or 0)


if __name__ == "__main__":
    sys.exit(main())
