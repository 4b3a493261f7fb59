"""Independent extended-precision reference values frozen into the Rust tests.

Everything here is evaluated term by term with mpmath at 50 digits, without
log-sum-exp or any code shared with the crate. Run with `python3 reference_values.py`.
"""
from mpmath import mp, mpf, cos, sin, pi, exp, log, sqrt, quad, fabs, tanh

mp.dps = 50


def alpha(t):
    return cos(pi * t / 2)


def sigma(t):
    return sin(pi * t / 2)


def weights(points, x, t):
    g = [exp(-(x - alpha(t) * y) ** 2 / (2 * sigma(t) ** 2)) for y in points]
    z = sum(g)
    return [v / z for v in g]


def reverse_params(points, xt, s, t):
    a_s, a_t, s_s, s_t = alpha(s), alpha(t), sigma(s), sigma(t)
    ats = a_t / a_s
    sts2 = 1 - ats ** 2
    sst = sqrt(sts2 * s_s ** 2 / s_t ** 2)
    cx = ats * s_s ** 2 / s_t ** 2
    cy = a_s * sts2 / s_t ** 2
    w = weights(points, xt, t)
    ybar = sum(wi * y for wi, y in zip(w, points))
    return w, [cx * xt + cy * y for y in points], cx * xt + cy * ybar, sst


def normal(x, mu, sd):
    return exp(-(x - mu) ** 2 / (2 * sd ** 2)) / sqrt(2 * pi * sd ** 2)


def reverse_exact(points, xs, s, xt, t):
    w, mus, _, sd = reverse_params(points, xt, s, t)
    return sum(wi * normal(xs, mu, sd) for wi, mu in zip(w, mus))


def l1_gap(points, xt, s, t):
    w, mus, mub, sd = reverse_params(points, xt, s, t)
    f = lambda x: fabs(sum(wi * normal(x, mu, sd) for wi, mu in zip(w, mus)) - normal(x, mub, sd))
    lo = min(mus + [mub]) - 12 * sd
    hi = max(mus + [mub]) + 12 * sd
    # split at the crossing points' neighbourhood for accuracy
    pts = [lo] + [lo + (hi - lo) * k / 64 for k in range(1, 64)] + [hi]
    return quad(f, pts)


two = [mpf(-1), mpf(1)]
print("reverse_exact log p(x_s=0.2 | x_t=0.3), s=0.5, t=0.6:", log(reverse_exact(two, mpf("0.2"), mpf("0.5"), mpf("0.3"), mpf("0.6"))))
print("l1_gap(x_t=0.3, s=0.5, t=0.6):", l1_gap(two, mpf("0.3"), mpf("0.5"), mpf("0.6")))
print("l1_gap(x_t=0, s=0.9, t=1):", l1_gap(two, mpf(0), mpf("0.9"), mpf(1)))

# two-point score derivative at the midpoint: (alpha^2 - sigma^2) / sigma^4
for t in ["0.2", "0.02"]:
    a, s = alpha(mpf(t)), sigma(mpf(t))
    print("score derivative at x=0, t=%s:" % t, (a ** 2 - s ** 2) / s ** 4)
print("growth 0.2 -> 0.02:", ((alpha(mpf("0.02")) ** 2 - sigma(mpf("0.02")) ** 2) / sigma(mpf("0.02")) ** 4)
      / ((alpha(mpf("0.2")) ** 2 - sigma(mpf("0.2")) ** 2) / sigma(mpf("0.2")) ** 4))
print("single-point jacobian ratio sigma^2(0.1)/sigma^2(0.01):", sigma(mpf("0.1")) ** 2 / sigma(mpf("0.01")) ** 2)

# final step: weight of y_k when x_t = alpha_t y_k at t = 0.01, points {-1, +1}
w = weights(two, alpha(mpf("0.01")) * 1, mpf("0.01"))
print("final-step weight on +1 at t=0.01:", w[1], " 1-w:", 1 - w[1])

# alpha at 1 - eps for eps = 0.05 (brightness toy)
print("alpha(0.95):", alpha(mpf("0.95")), " sigma(0.95):", sigma(mpf("0.95")))
