"""Test functions on R^d with analytic gradients and Hessians.

Every callable takes an ``(N, d)`` array; ``value`` returns ``(N,)``,
``grad`` ``(N, d)`` and ``hess`` ``(N, d, d)``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping

import numpy as np
from numpy.typing import NDArray


@dataclass(frozen=True)
class SmoothFunction:
    value: Callable[[NDArray], NDArray]
    grad: Callable[[NDArray], NDArray]
    hess: Callable[[NDArray], NDArray]
    name: str = "f"
    degree: int | None = None  # polynomial growth order, if known

    def __call__(self, x: NDArray) -> NDArray:
        return self.value(np.atleast_2d(x))


class Polynomial(SmoothFunction):
    """Sum of monomials ``coef * prod_i x_i**e_i`` given as ``{exponents: coef}``."""

    def __init__(self, terms: Mapping[tuple[int, ...], float], name: str | None = None):
        terms = {tuple(int(v) for v in e): float(c) for e, c in terms.items() if c != 0}
        d = len(next(iter(terms))) if terms else 1
        exps = np.array(list(terms) or [(0,) * d], dtype=np.int64)
        coefs = np.array(list(terms.values()) or [0.0])
        object.__setattr__(self, "terms", terms)
        object.__setattr__(self, "_exps", exps)
        object.__setattr__(self, "_coefs", coefs)
        object.__setattr__(self, "d", d)
        deg = int(exps.sum(axis=1).max())
        super().__init__(self._value, self._grad, self._hess, name or _poly_name(terms), deg)

    @classmethod
    def constant(cls, c: float, d: int) -> Polynomial:
        return cls({(0,) * d: c}, name=f"{c:g}")

    @classmethod
    def coordinate(cls, i: int, d: int, power: int = 1) -> Polynomial:
        e = [0] * d
        e[i] = power
        return cls({tuple(e): 1.0})

    @classmethod
    def from_spec(cls, spec, d: int) -> Polynomial:
        """Parse a config entry.

        ``[c0, c1, c2, ...]`` means ``sum_k c_k x_1^k`` (d = 1 style coefficient list);
        ``{"2,0": 1.0, "0,1": -3}`` gives explicit exponent tuples.
        """
        if isinstance(spec, Mapping):
            terms = {tuple(int(t) for t in str(k).split(",")): float(v) for k, v in spec.items()}
            return cls(terms)
        terms = {}
        for k, c in enumerate(spec):
            e = [0] * d
            e[0] = k
            terms[tuple(e)] = float(c)
        return cls(terms)

    def _value(self, x: NDArray) -> NDArray:
        x = np.atleast_2d(x)
        return np.prod(x[:, None, :] ** self._exps[None], axis=2) @ self._coefs

    def _grad(self, x: NDArray) -> NDArray:
        x = np.atleast_2d(x)
        N, d = x.shape
        g = np.zeros((N, d))
        for i in range(d):
            e = self._exps.copy()
            c = self._coefs * e[:, i]
            e[:, i] = np.maximum(e[:, i] - 1, 0)
            g[:, i] = np.prod(x[:, None, :] ** e[None], axis=2) @ c
        return g

    def _hess(self, x: NDArray) -> NDArray:
        x = np.atleast_2d(x)
        N, d = x.shape
        H = np.zeros((N, d, d))
        for i in range(d):
            for j in range(i, d):
                e = self._exps.copy()
                c = self._coefs * e[:, i]
                e[:, i] = np.maximum(e[:, i] - 1, 0)
                c = c * e[:, j]
                e[:, j] = np.maximum(e[:, j] - 1, 0)
                H[:, i, j] = H[:, j, i] = np.prod(x[:, None, :] ** e[None], axis=2) @ c
        return H


def _poly_name(terms: Mapping[tuple[int, ...], float]) -> str:
    parts = []
    for e, c in terms.items():
        mono = "*".join(f"x{i + 1}" + (f"^{k}" if k > 1 else "") for i, k in enumerate(e) if k)
        parts.append(f"{c:g}" + (f"*{mono}" if mono else "") if c != 1 or not mono else mono)
    return " + ".join(parts) or "0"


def positive_part_power(d: int, k: int) -> SmoothFunction:
    """``((e^T x)^+)^k``; C^2 for k >= 3."""
    ones = np.ones(d)

    def value(x):
        return np.maximum(np.atleast_2d(x).sum(axis=1), 0.0) ** k

    # s**0 would be 1 on the negative side, so mask explicitly
    def grad(x):
        s = np.atleast_2d(x).sum(axis=1)
        c = np.where(s > 0, k * np.maximum(s, 0.0) ** (k - 1), 0.0)
        return c[:, None] * ones

    def hess(x):
        s = np.atleast_2d(x).sum(axis=1)
        c = np.where(s > 0, k * (k - 1) * np.maximum(s, 0.0) ** max(k - 2, 0), 0.0)
        return c[:, None, None] * np.ones((d, d))

    return SmoothFunction(value, grad, hess, name=f"pos^{k}", degree=k)


def bump(center, radius: float) -> SmoothFunction:
    """Smooth compactly supported ``exp(-1 / (1 - r^2))`` with r = |x - center| / radius."""
    c = np.atleast_1d(np.asarray(center, dtype=float))
    d = c.size
    rho2 = radius**2

    def parts(x):
        y = np.atleast_2d(x) - c
        r2 = (y * y).sum(axis=1) / rho2
        inside = r2 < 1.0
        w = np.where(inside, 1.0 - r2, 1.0)
        v = np.where(inside, np.exp(-1.0 / w), 0.0)
        return y, w, v, inside

    def value(x):
        return parts(x)[2]

    def grad(x):
        y, w, v, _ = parts(x)
        # d/dy exp(-1/w) = v * (-2 y / rho2) / w^2
        return (v * (-2.0 / rho2) / w**2)[:, None] * y

    def hess(x):
        y, w, v, _ = parts(x)
        a = v * (-2.0 / rho2) / w**2
        # derivative of a wrt y: a * [ (-2/rho2)/w^2 * ... ] computed via d(log a)
        # log a = const - 1/w - 2 log w ; d w / dy = -2 y / rho2
        dlog = (-1.0 / w**2 + 2.0 / w) * (2.0 / rho2)
        H = a[:, None, None] * np.eye(d)[None] + (a * dlog)[:, None, None] * y[:, :, None] * y[:, None, :]
        return H

    return SmoothFunction(value, grad, hess, name=f"bump(c={c.tolist()}, r={radius:g})")


def monomials(d: int, max_degree: int, min_degree: int = 1) -> list[Polynomial]:
    from itertools import combinations_with_replacement

    out = []
    for deg in range(min_degree, max_degree + 1):
        for combo in combinations_with_replacement(range(d), deg):
            e = [0] * d
            for i in combo:
                e[i] += 1
            out.append(Polynomial({tuple(e): 1.0}))
    return out
