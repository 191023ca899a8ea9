"""Padé activation units: learnable rational activations with a safe denominator.

A unit of degrees (m, n) evaluates

    f(x) = (a_0 + a_1 x + ... + a_m x^m) / (1 + |b_1 x + ... + b_n x^n|)

which is finite for every finite input. The default degrees (5, 4) give 10
parameters per unit. Fresh units are initialized to a least-squares fit of
ReLU on [-3, 3].
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
import torch

from .errors import NonFiniteInput

FIT_RANGE = (-3.0, 3.0)
FIT_POINTS = 601
_FIT_REFINE_STEPS = 8


@dataclass(frozen=True)
class PAUParams:
    """Coefficients of one unit: numerator a_0..a_m, denominator b_1..b_n."""

    numerator: np.ndarray
    denominator: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "numerator", np.asarray(self.numerator, dtype=np.float64))
        object.__setattr__(self, "denominator", np.asarray(self.denominator, dtype=np.float64))

    @property
    def degree_m(self) -> int:
        return len(self.numerator) - 1

    @property
    def degree_n(self) -> int:
        return len(self.denominator)

    @property
    def param_count(self) -> int:
        return len(self.numerator) + len(self.denominator)


def _poly_eval(coeffs: np.ndarray, x: np.ndarray, lowest_power: int) -> np.ndarray:
    # Horner on coeffs[k] * x^(lowest_power + k)
    acc = np.zeros_like(x)
    for c in coeffs[::-1]:
        acc = acc * x + c
    return acc * x**lowest_power if lowest_power else acc


def pau_forward(x: np.ndarray, params: PAUParams) -> np.ndarray:
    """Elementwise safe rational evaluation; rejects NaN/Inf inputs."""
    x = np.asarray(x, dtype=np.float64)
    if not np.isfinite(x).all():
        raise NonFiniteInput("activation input contains NaN or Inf")
    p = _poly_eval(params.numerator, x, 0)
    r = _poly_eval(params.denominator, x, 1)
    return p / (1.0 + np.abs(r))


def pau_gradient(x: np.ndarray, params: PAUParams):
    """Analytic partials (df/dx, df/da_k, df/db_k) of the safe rational form.

    Shapes: df/dx matches x; df/da has a trailing axis of m+1; df/db of n.
    """
    x = np.asarray(x, dtype=np.float64)
    m = params.degree_m
    n = params.degree_n
    powers = x[..., None] ** np.arange(max(m, n) + 1, dtype=np.float64)
    p = powers[..., : m + 1] @ params.numerator
    r = powers[..., 1 : n + 1] @ params.denominator
    q = 1.0 + np.abs(r)
    sign_r = np.sign(r)

    dp_dx = _poly_eval(params.numerator[1:] * np.arange(1, m + 1), x, 0)
    dr_dx = _poly_eval(params.denominator * np.arange(1, n + 1), x, 0)
    df_dx = dp_dx / q - p * sign_r * dr_dx / q**2
    df_da = powers[..., : m + 1] / q[..., None]
    df_db = -(p * sign_r / q**2)[..., None] * powers[..., 1 : n + 1]
    return df_dx, df_da, df_db


@lru_cache(maxsize=8)
def _relu_fit(m: int, n: int) -> tuple[tuple[float, ...], tuple[float, ...]]:
    # Linearized least squares on the fixed grid, iteratively reweighted by
    # the previous safe denominator. Closed-form solve each round, so the
    # result is reproducible.
    x = np.linspace(FIT_RANGE[0], FIT_RANGE[1], FIT_POINTS)
    target = np.maximum(x, 0.0)
    basis_p = np.stack([x**k for k in range(m + 1)], axis=1)
    basis_r = np.stack([x**k for k in range(1, n + 1)], axis=1)
    weight = np.ones_like(x)
    a = np.zeros(m + 1)
    b = np.zeros(n)
    for _ in range(_FIT_REFINE_STEPS):
        lhs = np.concatenate([basis_p, -target[:, None] * basis_r], axis=1)
        sol, *_ = np.linalg.lstsq(lhs * weight[:, None], target * weight, rcond=None)
        a, b = sol[: m + 1], sol[m + 1 :]
        weight = 1.0 / (1.0 + np.abs(basis_r @ b))
    return tuple(a.tolist()), tuple(b.tolist())


def init_pau_as_relu(m: int = 5, n: int = 4) -> PAUParams:
    """Least-squares ReLU fit on the fixed [-3, 3] grid of 601 points."""
    a, b = _relu_fit(m, n)
    return PAUParams(numerator=np.array(a), denominator=np.array(b))


def relu_distance(params: PAUParams, points: int = FIT_POINTS) -> float:
    """Integral of |f - ReLU| over the fit range, trapezoid rule on the grid."""
    x = np.linspace(FIT_RANGE[0], FIT_RANGE[1], points)
    gap = np.abs(pau_forward(x, params) - np.maximum(x, 0.0))
    return float(np.trapezoid(gap, x))


class PauActivation(torch.nn.Module):
    """Torch module evaluating the same safe rational form.

    Coefficients are float64-initialized from the ReLU fit and cast to the
    module dtype; ``trainable=False`` freezes a unit (used by the
    last-block-only mode).
    """

    def __init__(self, params: PAUParams | None = None):
        super().__init__()
        params = params or init_pau_as_relu()
        self.numerator = torch.nn.Parameter(torch.tensor(params.numerator))
        self.denominator = torch.nn.Parameter(torch.tensor(params.denominator))

    @property
    def trainable(self) -> bool:
        return self.numerator.requires_grad

    @trainable.setter
    def trainable(self, enabled: bool):
        self.numerator.requires_grad_(enabled)
        self.denominator.requires_grad_(enabled)

    def export_params(self) -> PAUParams:
        return PAUParams(
            numerator=self.numerator.detach().cpu().double().numpy(),
            denominator=self.denominator.detach().cpu().double().numpy(),
        )

    def load_params(self, params: PAUParams):
        with torch.no_grad():
            self.numerator.copy_(torch.tensor(params.numerator, dtype=self.numerator.dtype))
            self.denominator.copy_(torch.tensor(params.denominator, dtype=self.denominator.dtype))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        num = self.numerator.to(x.dtype)
        den = self.denominator.to(x.dtype)
        p = torch.zeros_like(x)
        for c in num.flip(0):
            p = p * x + c
        r = torch.zeros_like(x)
        for c in den.flip(0):
            r = r * x + c
        r = r * x
        return p / (1.0 + torch.abs(r))
