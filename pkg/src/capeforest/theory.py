"""Household model of waste avoidance and recycling under a unit price.

A household chooses avoidance ``w_A`` and recycling ``w_R`` out of potential
waste ``W`` and pays ``t`` per unit of the remainder:

    V(w_A, w_R) = U(y - t * (W - w_A - w_R)) - C(w_A, w_R)

Differentiating the first-order conditions in ``t`` gives

    dw_A/dt = (C_RR - C_AR) * K / soc,   dw_R/dt = (C_AA - C_AR) * K / soc

with ``K = U' + U'' * t * (w_A + w_R - W) > 0`` and ``soc = V_AA * V_RR - V_AR**2``.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .exceptions import (InvalidCurvature, NoInteriorOptimum, NonConcave, NotAtOptimum,
                         SecondOrderFailure)

FOC_TOL = 1e-8

# convex (C_AA, C_RR, C_AR) realizing each prediction
CANONICAL = {
    "(i)": (2.0, 2.0, -1.0),
    "(ii)": (4.0, 1.0, 1.5),
    "(iii)": (1.0, 4.0, 1.5),
}


def _sign(v, tol=0.0):
    return "+" if v > tol else "-" if v < -tol else "0"


def statics_signs(C_AA, C_RR, C_AR):
    """Signs of ``(dw_A/dt, dw_R/dt)`` implied by the cost curvatures alone."""
    if not (C_AA > 0 and C_RR > 0):
        raise InvalidCurvature("marginal costs must be increasing: C_AA, C_RR > 0")
    return _sign(C_RR - C_AR), _sign(C_AA - C_AR)


def classify_prediction(signs, C_AA, C_RR, C_AR):
    """Map a sign pair and curvatures to prediction ``(i)``, ``(ii)``, ``(iii)`` or ``none``.

    (i): both responses positive (complements).
    (ii): ``(-, +)`` with ``|C_AA| > |C_AR| > |C_RR|``.
    (iii): ``(+, -)`` with ``|C_RR| > |C_AR| > |C_AA|``.
    """
    a, r, x = abs(C_AA), abs(C_RR), abs(C_AR)
    signs = tuple(signs)
    if signs == ("+", "+"):
        return "(i)"
    if signs == ("-", "+") and a > x > r:
        return "(ii)"
    if signs == ("+", "-") and r > x > a:
        return "(iii)"
    return "none"


@dataclass(frozen=True)
class StaticsResult:
    dwA_dt: float
    dwR_dt: float
    signs: tuple
    prediction_class: str


@dataclass(frozen=True)
class HouseholdModel:
    """``U(c) = log(1 + c)`` and quadratic costs

    ``C = C_AA/2 w_A^2 + C_RR/2 w_R^2 + C_AR w_A w_R + c_A w_A + c_R w_R``.

    The linear terms ``c_A, c_R`` stand in for the taste and household
    shifters; they move the optimum but not the curvatures.
    """

    y: float = 10.0
    W: float = 5.0
    t: float = 1.0
    C_AA: float = 2.0
    C_RR: float = 2.0
    C_AR: float = -1.0
    c_A: float = 0.0
    c_R: float = 0.0

    def __post_init__(self):
        if not (self.C_AA > 0 and self.C_RR > 0):
            raise InvalidCurvature("C_AA and C_RR must be positive")

    def consumption(self, wA, wR):
        return self.y - self.t * (self.W - wA - wR)

    def U1(self, c):
        return 1.0 / (1.0 + c)

    def U2(self, c):
        return -1.0 / (1.0 + c) ** 2

    def value(self, wA, wR):
        c = self.consumption(wA, wR)
        cost = (0.5 * self.C_AA * wA ** 2 + 0.5 * self.C_RR * wR ** 2
                + self.C_AR * wA * wR + self.c_A * wA + self.c_R * wR)
        return np.log1p(c) - cost

    def gradient(self, wA, wR):
        u1 = self.U1(self.consumption(wA, wR))
        return np.array([u1 * self.t - (self.C_AA * wA + self.C_AR * wR + self.c_A),
                         u1 * self.t - (self.C_RR * wR + self.C_AR * wA + self.c_R)])

    def hessian(self, wA, wR):
        a = self.U2(self.consumption(wA, wR)) * self.t ** 2
        return np.array([[a - self.C_AA, a - self.C_AR], [a - self.C_AR, a - self.C_RR]])

    def interior(self, wA, wR):
        return wA > 0 and wR > 0 and wA + wR < self.W and self.consumption(wA, wR) > -1

    def solve(self, start=None, tol=1e-13, max_iter=200):
        """Damped Newton ascent to the interior maximizer of ``V``."""
        x = np.array(start if start is not None else (self.W / 3, self.W / 3), float)
        for _ in range(max_iter):
            g = self.gradient(*x)
            H = self.hessian(*x)
            if not (H[0, 0] < 0 and np.linalg.det(H) > 0):
                raise NonConcave(f"V is not locally concave at {x}")
            step = -np.linalg.solve(H, g)
            lam, v0, g0 = 1.0, self.value(*x), np.max(np.abs(g))
            while lam > 1e-10:
                cand = x + lam * step
                if self.consumption(*cand) > -1 and (
                        self.value(*cand) > v0
                        or np.max(np.abs(self.gradient(*cand))) < g0):
                    break
                lam /= 2
            x = x + lam * step
            if np.max(np.abs(self.gradient(*x))) < tol:
                break
        if not self.interior(*x) or np.max(np.abs(self.gradient(*x))) > FOC_TOL:
            raise NoInteriorOptimum(f"no interior optimum found (stopped at {x})")
        return float(x[0]), float(x[1])


def statics_values(model: HouseholdModel, wA=None, wR=None):
    """Closed-form ``(dw_A/dt, dw_R/dt)`` at the optimum ``(wA, wR)``.

    The optimum is solved for when not supplied.
    """
    if wA is None or wR is None:
        wA, wR = model.solve()
    if np.max(np.abs(model.gradient(wA, wR))) > FOC_TOL:
        raise NotAtOptimum(f"first-order conditions fail at ({wA}, {wR})")
    H = model.hessian(wA, wR)
    soc = H[0, 0] * H[1, 1] - H[0, 1] ** 2
    if not (soc > 0 and H[0, 0] < 0):
        raise SecondOrderFailure(f"soc={soc:.3g} is not positive")
    c = model.consumption(wA, wR)
    K = model.U1(c) + model.U2(c) * model.t * (wA + wR - model.W)
    if not K > 0:
        raise SecondOrderFailure("common factor U' + U'' t (w_A + w_R - W) is not positive")
    dA = (model.C_RR - model.C_AR) * K / soc
    dR = (model.C_AA - model.C_AR) * K / soc
    signs = (_sign(dA), _sign(dR))
    return StaticsResult(float(dA), float(dR), signs,
                         classify_prediction(signs, model.C_AA, model.C_RR, model.C_AR))


def numeric_response(model: HouseholdModel, dt=1e-6):
    """Forward differences of the maximizer between prices ``t`` and ``t + dt``."""
    if dt == 0:
        return 0.0, 0.0
    a0, r0 = model.solve()
    a1, r1 = replace(model, t=model.t + dt).solve(start=(a0, r0))
    return (a1 - a0) / dt, (r1 - r0) / dt


def random_admissible(rng, min_gap=0.05):
    """Random model with a known interior optimum and strictly convex costs.

    Curvature differences ``C_RR - C_AR`` and ``C_AA - C_AR`` are kept at
    least ``min_gap`` away from zero so the signs are well defined.
    """
    while True:
        C_AA, C_RR = rng.uniform(0.5, 5.0, size=2)
        bound = 0.9 * np.sqrt(C_AA * C_RR)
        C_AR = rng.uniform(-bound, bound)
        if min(abs(C_RR - C_AR), abs(C_AA - C_AR)) > min_gap:
            break
    W = rng.uniform(2.0, 10.0)
    t = rng.uniform(0.2, 3.0)
    y = t * W + rng.uniform(1.0, 40.0)
    share = rng.dirichlet([2.0, 2.0, 2.0])
    while share.min() < 0.1:
        share = rng.dirichlet([2.0, 2.0, 2.0])
    wA, wR = share[0] * W, share[1] * W
    base = HouseholdModel(y, W, t, C_AA, C_RR, C_AR)
    u1t = base.U1(base.consumption(wA, wR)) * t
    c_A = u1t - (C_AA * wA + C_AR * wR)
    c_R = u1t - (C_RR * wR + C_AR * wA)
    return replace(base, c_A=c_A, c_R=c_R), (wA, wR)


def oracle_table(n=100, seed=0, dt=1e-6):
    """Compare closed-form and finite-difference responses on random models."""
    rng = np.random.default_rng(seed)
    rows = []
    for i in range(n):
        model, _ = random_admissible(rng)
        res = statics_values(model)
        nA, nR = numeric_response(model, dt)
        rows.append({"draw": i, "C_AA": model.C_AA, "C_RR": model.C_RR, "C_AR": model.C_AR,
                     "dwA_dt": res.dwA_dt, "dwR_dt": res.dwR_dt,
                     "fd_dwA_dt": nA, "fd_dwR_dt": nR,
                     "sign_match": (_sign(nA), _sign(nR)) == res.signs,
                     "class": res.prediction_class})
    return rows


def substitution_from_capes(cape_rw, cape_tw):
    """Read avoidance/recycling substitution off estimated CAPEs.

    Avoidance responds with ``CAPE_A = -CAPE_TW``. A negative correlation
    between the RW and TW responses across units (positive between RW and A)
    points to substitutes; a positive one to complements.
    """
    rw = np.asarray(cape_rw, float)
    tw = np.asarray(cape_tw, float)
    r = float(np.corrcoef(rw, tw)[0, 1])
    return {"corr_rw_tw": r, "corr_rw_a": -r,
            "classification": "substitutes" if r < 0 else "complements"}
