"""Independent pure-Python reference implementations used as test oracles."""
import math


def distance_sums(points):
    return [math.fsum(math.hypot(px - qx, py - qy) for qx, qy in points) for px, py in points]


def brute_medoid(points, rtol=1e-12):
    """Lowest index whose exact distance sum is within ``rtol`` of the minimum."""
    sums = distance_sums(points)
    lo = min(sums)
    return next(i for i, s in enumerate(sums) if s <= lo + abs(lo) * rtol)


def brute_z_scores(points, lam=0.6745):
    m = points[brute_medoid(points)]
    d = [math.hypot(p[0] - m[0], p[1] - m[1]) for p in points]
    s = sorted(d)
    n = len(s)
    mad = s[n // 2] if n % 2 else 0.5 * (s[n // 2 - 1] + s[n // 2])
    if mad == 0:
        return [0.0 if di == 0 else math.inf for di in d]
    return [lam * di / mad for di in d]


def brute_medoid_shift(points, h):
    """Follow flat-kernel medoid-shift links to their fixed points."""
    n = len(points)
    dist = [[math.hypot(p[0] - q[0], p[1] - q[1]) for q in points] for p in points]
    link = []
    for i in range(n):
        nbrs = [k for k in range(n) if dist[i][k] <= h]
        costs = [math.fsum(dist[j][k] for k in nbrs) for j in range(n)]
        lo = min(costs)
        link.append(next(j for j, c in enumerate(costs) if c <= lo + abs(lo) * 1e-12))
    roots = []
    for i in range(n):
        j, seen = i, set()
        while link[j] != j and j not in seen:
            seen.add(j)
            j = link[j]
        roots.append(j)
    groups = {}
    for i, r in enumerate(roots):
        groups.setdefault(r, []).append(i)
    return sorted(groups.values())
