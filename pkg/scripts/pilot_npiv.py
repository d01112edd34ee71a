"""Quick NPIV training pilot: train on a synthetic instance and report risk.

Useful for picking step sizes and batch sizes before committing to a long
run.  Prints trace checkpoints and the final projected risk alongside the
fixed-feature baseline on the same data.
"""

import argparse
import time

import numpy as np

from mfldiv import baselines, bilevel, npiv_data
from mfldiv.objectives import RegParams


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--m", type=int, default=2000)
    p.add_argument("--n", type=int, default=2000)
    p.add_argument("--particles", type=int, default=200)
    p.add_argument("--outer-steps", type=int, default=3000)
    p.add_argument("--inner-steps", type=int, default=10)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--step", type=float, default=0.1, help="outer step gamma")
    p.add_argument("--inner-step", type=float, default=None,
                   help="alpha=beta; defaults to --step")
    p.add_argument("--beta", type=float, default=None,
                   help="override beta alone")
    p.add_argument("--lam", type=float, default=0.3)
    p.add_argument("--sigma", type=float, default=1e-2)
    p.add_argument("--zeta", type=float, default=1e-5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--clip", type=float, default=10.0)
    p.add_argument("--structural", default="abs")
    p.add_argument("--report-every", type=int, default=500)
    p.add_argument("--baseline-width", type=int, default=64)
    args = p.parse_args()

    spec = npiv_data.StructuralSpec(h_name=args.structural)
    data = npiv_data.generate_npiv(spec, args.m, args.n, seed=args.seed)
    grid = npiv_data.instrument_grid(spec)

    cfg = bilevel.TrainConfig(
        reg=RegParams(zeta1=args.zeta, zeta2=args.zeta,
                      sigma1=args.sigma, sigma2=args.sigma, lam=args.lam),
        alpha=args.inner_step if args.inner_step is not None else args.step,
        beta=(args.beta if args.beta is not None
              else args.inner_step if args.inner_step is not None
              else args.step),
        gamma=args.step,
        inner_steps=args.inner_steps, outer_steps=args.outer_steps,
        n_x=args.particles, n_z=args.particles,
        batch_size=args.batch_size, seed=args.seed,
        clip_bound=args.clip, trace_eval_size=64,
    )

    t0 = time.perf_counter()
    model = bilevel.train(cfg, data)
    train_s = time.perf_counter() - t0

    rows = list(model.trace[::args.report_every])
    if model.trace[-1] is not rows[-1]:
        rows.append(model.trace[-1])
    for r in rows:
        print(f"iter {r.iteration:5d}  f1={r.f1:.5f}  f2={r.f2:.5f}"
              f"  gap={r.gap:.5f}  |x|={r.mean_norm_x:.3f}")

    tail = model.trace[-max(1, len(model.trace) // 20):]
    tail_gap = sum(r.gap for r in tail) / len(tail)
    tail_f2 = sum(r.f2 for r in tail) / len(tail)
    print(f"tail(5%): gap={tail_gap:.5f}  f2={tail_f2:.5f}")

    risk = bilevel.projected_risk(model, spec, grid)
    print(f"train time {train_s:.1f}s  projected_risk={risk:.5f}")

    t0 = time.perf_counter()
    base = baselines.fixed_2sls(
        baselines.random_tanh_features(1, args.baseline_width, seed=args.seed),
        baselines.random_tanh_features(1, args.baseline_width, seed=args.seed + 1),
        data, args.zeta, args.zeta,
    )
    base_s = time.perf_counter() - t0
    base_risk = bilevel.projected_risk(
        lambda a: base.predict(np.asarray(a, dtype=np.float64).reshape(-1, 1)),
        spec, grid)
    print(f"fixed2sls({args.baseline_width}) time {base_s:.1f}s"
          f"  projected_risk={base_risk:.5f}  ratio={risk / base_risk:.3f}")


if __name__ == "__main__":
    main()
