"""Estimation and calibration numbers for the cached toy model."""

import argparse

import numpy as np

from amortized_cate.calibration import DEFAULT_LEVELS
from amortized_cate.experiments import (L2_TEST, ToyConfig, calibration_run, estimation_quality, heldout_dgps,
                                        pre_calibration_cate_ice, train_toy)


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--cache", default=".cache")
    ap.add_argument("--n-dgps", type=int, default=20)
    args = ap.parse_args()
    model, _ = train_toy(ToyConfig(), args.cache)
    dgps = heldout_dgps(args.n_dgps)

    q = estimation_quality(model, dgps)
    for n, d in q.items():
        print(f"n={n:5d}  PEHE {d['pehe'].mean():.4f}  ATE rel err {d['ate_rel_error'].mean():.4f}")

    cal = calibration_run(model, dgps)
    print("theta_T", cal.theta_T)
    print("ICE_mu before", np.round(cal.ice_mu_before, 4).tolist())
    print("ICE_mu after ", np.round(cal.ice_mu_after, 4).tolist())
    for name, curve in (("before", cal.mean_cate_before), ("after", cal.mean_cate_after)):
        print(f"CATE coverage {name}: ICE {curve.ice:+.4f}  min(cov - level) {np.min(curve.coverage - DEFAULT_LEVELS):+.4f}")
    ood = pre_calibration_cate_ice(model, heldout_dgps(args.n_dgps, omega_range=L2_TEST))
    print(f"OOD ICE_tau before {ood.mean():+.4f}")


if __name__ == "__main__":
    main()
