"""Independent brute-force recomputations used by unit and acceptance tests."""

from fractions import Fraction


def rank_desc(values):
    """Raster indices by descending value; earlier index first on ties."""
    return sorted(range(len(values)), key=lambda i: (-values[i], i))


def knee_oracle(values, rule):
    """Selected raster indices, recomputed from exact rational slopes over every k."""
    vals = [Fraction(float(v)) for v in values]
    n = len(vals)
    total = sum(vals)
    order = rank_desc(vals)
    if total == 0:
        return order[:1]
    slopes = [vals[i] * n / total for i in order]
    if rule == "mean_threshold":
        k = 0
        for m in range(1, n + 1):
            if all(s > 1 for s in slopes[:m]):
                k = m
    else:
        best = None
        for m in range(1, n + 1):
            gap = abs(slopes[m - 1] - 1)
            if best is None or gap < best[0]:
                best = (gap, m)
        k = best[1]
    return order[:max(k, 1)]


def budget_oracle(pct, n):
    # round half up, exact
    return max(int(Fraction(pct) * n / 100 + Fraction(1, 2)), 1)


def mr_oracle(counts, n, coverage=Fraction(999, 1000)):
    for pct in range(5, 100, 5):
        b = budget_oracle(pct, n)
        if Fraction(sum(1 for c in counts if c <= b), len(counts)) >= coverage:
            return pct
    return 95


def discounted_oracle(rewards, gamma, bootstrap, terminal):
    total = 0.0
    g = 1.0
    for r in rewards:
        total += g * r
        g *= gamma
    if not terminal:
        total += g * bootstrap
    return total
