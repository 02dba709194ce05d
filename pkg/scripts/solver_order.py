"""Global error of Euler and RK4 under step halving on a damped rotation."""

import numpy as np

from strgode import diffcore as dc
from strgode.diffcore import Tensor
from strgode.ode import TimeGrid, integrate

A = np.array([[-0.5, 1.0], [-1.0, -0.5]])
z0 = np.array([[1.0, 0.5]])
lam, V = np.linalg.eig(A)
exact = np.real(V @ np.diag(np.exp(lam)) @ np.linalg.solve(V, z0.T)).T

for method in ("euler", "rk4"):
    errs = []
    for steps in (5, 10, 20, 40, 80):
        z = integrate(lambda z, t: dc.matmul(z, A.T), Tensor(z0), TimeGrid(0.0, 1.0, steps), method).data
        errs.append(np.linalg.norm(z - exact))
    ratios = [a / b for a, b in zip(errs, errs[1:])]
    print(method, " ".join(f"{e:.2e}" for e in errs), "| ratios", " ".join(f"{r:.2f}" for r in ratios))
