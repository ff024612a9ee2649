"""How much outcome noise the lagged-outcome match can tolerate.

For a few robustness scenarios, finds the noise standard deviation at which
matching on lags stops reducing bias, then checks the data-driven rule on
either side of it with a short simulation.
"""

from matchdid.guidelines import estimate_guideline_xy, population_limits
from matchdid.model import sample_population
from matchdid.simlab import robustness_model, true_gain, turnover_sigma_e

scenarios = [
    ("stable", "all", "stable"),
    ("last-two-stable", "all", "varying"),
    ("fully-varying", "all", "varying"),
    ("fully-varying", "none", "stable"),
]

for theta, corr, xpat in scenarios:
    def make(s2, theta=theta, corr=corr, xpat=xpat):
        return robustness_model(theta, corr, xpat, s2)

    cut = turnover_sigma_e(make)
    print(f"\nlatent slopes {theta}, correlation pattern {corr}, covariate slopes {xpat}")
    print(f"  matching on lags stops helping at noise sd {cut:.3f}" if cut else "  no turnover in range")
    for sd in (0.5 * cut, 2.0 * cut) if cut else (0.3, 1.2):
        p = make(sd * sd)
        gain = true_gain(p)[2]
        limit = population_limits(p)
        votes = [
            estimate_guideline_xy(sample_population(p, 10_000, [k], oracle=False)).match_y
            for k in range(20)
        ]
        print(
            f"  sd {sd:5.3f}: true gain {gain:+.4f}, rule in the limit says"
            f" {'match' if limit.match_y else 'skip'}, {sum(votes)}/20 samples say match"
        )
