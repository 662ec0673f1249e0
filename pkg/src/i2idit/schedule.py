"""Closed-form DDPM noise schedule, forward corruption and ancestral reverse step.

Timesteps are 0-based array indices ``t in [0, T)``.  ``q_sample(x0, t)``
yields the input to reverse step ``t``; the "previous" state of step 0 is the
clean sample, i.e. ``alpha_bar_prev[0] = 1``.
"""

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, ParameterError
from .tensor import Tensor, as_tensor

DEFAULT_T = 200
PRESET_T = 1000


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    alpha_bar_prev: np.ndarray
    sqrt_alpha_bar: np.ndarray
    sqrt_one_minus_alpha_bar: np.ndarray
    coef_x0: np.ndarray
    coef_xt: np.ndarray
    posterior_variance: np.ndarray

    @property
    def T(self):
        return len(self.beta)

    @classmethod
    def from_betas(cls, beta):
        beta = np.asarray(beta, dtype=np.float64)
        if beta.ndim != 1 or len(beta) < 2:
            raise ParameterError("need at least two timesteps")
        if np.any(beta <= 0) or np.any(beta >= 1):
            raise ParameterError("every beta must lie in (0, 1)")
        alpha = 1.0 - beta
        alpha_bar = np.cumprod(alpha)
        alpha_bar_prev = np.concatenate([[1.0], alpha_bar[:-1]])
        one_minus = 1.0 - alpha_bar
        arrays = dict(
            beta=beta,
            alpha=alpha,
            alpha_bar=alpha_bar,
            alpha_bar_prev=alpha_bar_prev,
            sqrt_alpha_bar=np.sqrt(alpha_bar),
            sqrt_one_minus_alpha_bar=np.sqrt(one_minus),
            coef_x0=np.sqrt(alpha_bar_prev) * beta / one_minus,
            coef_xt=np.sqrt(alpha) * (1.0 - alpha_bar_prev) / one_minus,
            posterior_variance=beta * (1.0 - alpha_bar_prev) / one_minus,
        )
        # beta[0] / (1 - alpha_bar[0]) is 1 analytically but not in floating point
        arrays["coef_x0"][0] = 1.0
        for a in arrays.values():
            a.setflags(write=False)
        return cls(**arrays)

    def check_t(self, t):
        t = np.asarray(t)
        if t.size and (t.min() < 0 or t.max() >= self.T):
            raise ParameterError(f"timestep {t.tolist()} outside [0, {self.T})")
        return t


def make_linear_schedule(T=DEFAULT_T, beta_start=1e-4, beta_end=0.02):
    if T < 2:
        raise ParameterError(f"T must be >= 2, got {T}")
    if not (0 < beta_start <= beta_end < 1):
        raise ParameterError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    return NoiseSchedule.from_betas(np.linspace(beta_start, beta_end, T))


def _per_sample(table, t, ndim):
    """Look up ``table[t]`` shaped to broadcast against a batch of rank ``ndim``.

    Scalar ``t`` gives a plain float; an array gives one value per leading
    batch element.
    """
    t = np.asarray(t)
    if t.ndim == 0:
        return float(table[int(t)])
    return table[t].reshape((-1,) + (1,) * (ndim - 1))


def q_sample(x0, t, eps, sched):
    """Closed-form sample of the forward marginal at step ``t``."""
    x0, eps = as_tensor(x0), as_tensor(eps)
    if x0.shape != eps.shape:
        raise DimensionError(f"q_sample: x0 {x0.shape} vs eps {eps.shape}")
    sched.check_t(t)
    a = _per_sample(sched.sqrt_alpha_bar, t, x0.ndim)
    b = _per_sample(sched.sqrt_one_minus_alpha_bar, t, x0.ndim)
    return x0 * a + eps * b


def q_mean(x0, t, sched):
    x0 = as_tensor(x0)
    if t < 0:
        return x0
    sched.check_t(t)
    return x0 * float(sched.sqrt_alpha_bar[t])


def q_sample_iterative(x0, t, rng, sched):
    """Apply the single-step transition ``t + 1`` times with fresh noise.

    Only used as an independent check on :func:`q_sample`.
    """
    sched.check_t(t)
    x = np.array(as_tensor(x0).data)
    for s in range(int(t) + 1):
        x = np.sqrt(1.0 - sched.beta[s]) * x + np.sqrt(sched.beta[s]) * rng.normal(x.shape)
    return Tensor._wrap(x)


def predict_x0_from_eps(xt, t, eps_hat, sched, clip=False):
    xt, eps_hat = as_tensor(xt), as_tensor(eps_hat)
    if xt.shape != eps_hat.shape:
        raise DimensionError(f"predict_x0_from_eps: xt {xt.shape} vs eps_hat {eps_hat.shape}")
    sched.check_t(t)
    a = _per_sample(sched.sqrt_alpha_bar, t, xt.ndim)
    b = _per_sample(sched.sqrt_one_minus_alpha_bar, t, xt.ndim)
    x0 = (xt - eps_hat * b) / a
    if clip:
        x0 = Tensor._wrap(np.clip(x0.data, -1.0, 1.0))
    return x0


def posterior(x0, xt, t, sched):
    """Mean and variance of q(x_{t-1} | x_t, x_0).

    At ``t = 0`` the previous state is the clean sample, so the mean is
    ``x0`` and the variance 0.
    """
    x0, xt = as_tensor(x0), as_tensor(xt)
    if x0.shape != xt.shape:
        raise DimensionError(f"posterior: x0 {x0.shape} vs xt {xt.shape}")
    if not isinstance(t, (int, np.integer)):
        raise ParameterError(f"posterior expects a scalar timestep, got {t!r}")
    sched.check_t(t)
    mean = x0 * float(sched.coef_x0[t]) + xt * float(sched.coef_xt[t])
    return mean, float(sched.posterior_variance[t])


def ancestral_step(xt, t, eps_hat, rng, sched, clip=True):
    """One reverse step: x̂0 from the noise estimate, then sample the posterior."""
    xt, eps_hat = as_tensor(xt), as_tensor(eps_hat)
    if xt.shape != eps_hat.shape:
        raise DimensionError(f"ancestral_step: xt {xt.shape} vs eps_hat {eps_hat.shape}")
    x0_hat = predict_x0_from_eps(xt, t, eps_hat, sched, clip=clip)
    mean, var = posterior(x0_hat, xt, t, sched)
    if t == 0:
        return mean
    return Tensor._wrap(mean.data + np.sqrt(var) * rng.normal(xt.shape))
