"""Fit the five-state ring with and without the moment weighting.

Draws triplets from the ring model, fits the spectral estimator and the
M-estimator (plain and with an L1 penalty), and scores each on test
sequences against the true joint probabilities.  At full rank the plain
M-estimator reproduces the spectral answer; the penalty matters most when N
is small.

    python demos/ring_fit.py [rank]
"""

import sys

import numpy as np

from specmoment.bench import rel_norm_detail
from specmoment.hmm import make_ring, sample_sequences, sample_triplets
from specmoment.mestimator import FitConfig, fit
from specmoment.moments import estimate_stats
from specmoment.spectral import fit_hsu


def main(rank=5):
    model = make_ring()
    test = list(sample_sequences(model, 100, 4, seed=99))
    print(f"rank {rank}; median relative error over 5 draws")
    print(f"{'N':>7}  {'spectral':>10}  {'M':>10}  {'M, L1':>10}")
    for n_train in (300, 3000, 30000):
        rows = []
        for seed in range(5):
            data = sample_triplets(model, n_train, seed=seed)
            spec = fit_hsu(estimate_stats(data), rank)
            cfg = FitConfig(rank=rank, n_random_restarts=1, seed=seed)
            m, _ = fit(data, cfg)
            reg, _ = fit(data, cfg.replace(lam=0.01))
            rows.append([rel_norm_detail(p, model, test).value for p in (spec, m, reg)])
        med = np.median(rows, axis=0)
        print(f"{n_train:>7}  {med[0]:>10.4f}  {med[1]:>10.4f}  {med[2]:>10.4f}")


if __name__ == "__main__":
    main(int(sys.argv[1]) if len(sys.argv) > 1 else 5)
