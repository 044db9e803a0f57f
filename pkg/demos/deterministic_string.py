"""Rank-one operator for a string that switches symbol once.

The string is ten 0s followed by 1s.  Once the switch has been seen, a 0
never follows, so the operator scalar for symbol 0 should shrink as the
string grows.  Run with ``python demos/deterministic_string.py``.
"""

from specmoment.bench import operator_scalar
from specmoment.hmm import make_deterministic_string, sliding_triplets
from specmoment.mestimator import FitConfig, fit
from specmoment.moments import estimate_stats
from specmoment.spectral import fit_hsu, top_left_singular_vectors


def main():
    print(f"{'length':>6}  {'spectral':>12}  {'M-estimator':>12}")
    for length in (10, 15, 25, 50):
        data = sliding_triplets(make_deterministic_string(length), 2)
        stats = estimate_stats(data)
        basis, _ = top_left_singular_vectors(stats.p21, 1)
        spec = operator_scalar(fit_hsu(stats, 1), 0, basis)
        m_params, _ = fit(data, FitConfig(rank=1))
        m = operator_scalar(m_params, 0, basis)
        print(f"{length:>6}  {spec:>12.6g}  {m:>12.6g}")


if __name__ == "__main__":
    main()
