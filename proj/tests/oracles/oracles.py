# Copyright 2026 The dpft-lab Authors.
# SPDX-License-Identifier: Apache-2.0
"""Independent reference values for the C++ test suite (mpmath, 30 digits).

Run with `python3 oracles.py`; the printed constants are frozen in the tests.
"""
from mpmath import mp, mpf, sqrt, log, exp

mp.dps = 30


def scale_condition(k, d, beta, h, a):
    kb = k * beta
    floor = (-h + sqrt(h * h + 4 * (1 + d) * h + 4 * d)) / (2 * k)
    t1 = (kb + a) / (2 * k)
    t2 = (kb - 1) / (sqrt(2) * (1 + d))
    t3 = (kb * (kb + h * h) / ((1 + d) * h + d) - 1) / (1 + sqrt(2) * (1 + d))
    return floor, t1, t2, t3, min(t1, t2, t3)


def ft(k, d, beta, sigma, h):
    c = k * beta - 1 - sqrt(2) * sigma**2 * (1 + d)
    return c, sigma**2 * ((1 + d) * h + d) / c


def vnorm_displayed(t, k, beta, sigma, a):
    return k * beta * exp(-2 * t) + 2 * a * (exp(-t) - exp(-2 * t)) + (a + k * sigma**2) * (1 - exp(-2 * t))


def accountant(rho, T, delta):
    a = mpf(T) / (2 * rho**2)
    L = log(1 / mpf(delta))
    return 1 + sqrt(L / a), a + 2 * sqrt(a * L)


if __name__ == "__main__":
    print("scale_condition k=10 d=4 beta=2 h=1 a=0.81:", *[mp.nstr(x, 17) for x in scale_condition(10, 4, mpf(2), mpf(1), mpf("0.81"))])
    print("ft k=3 beta=2 d=4 sigma=0.1 h=1:", *[mp.nstr(x, 17) for x in ft(3, 4, mpf(2), mpf("0.1"), mpf(1))])
    print("vnorm k=3 beta=2 sigma=0.1 a=0.8 t=1:", mp.nstr(vnorm_displayed(mpf(1), 3, mpf(2), mpf("0.1"), mpf("0.8")), 17))
    print("accountant rho=1 T=1 delta=1e-5 (alpha*, eps):", *[mp.nstr(x, 17) for x in accountant(mpf(1), 1, "1e-5")])
    print("accountant rho=4 T=100 and 400:", *[mp.nstr(accountant(mpf(4), T, "1e-5")[1], 17) for T in (100, 400)])
