# %% [markdown]
# # Noise schedule and the oracle chain
#
# The default schedule is linear in beta over 200 steps.  It stops well short
# of pure noise, which matters later when sampling starts from a standard
# normal latent.

# %%
import numpy as np

from i2idit.rng import Rng
from i2idit.schedule import ancestral_step, make_linear_schedule, q_sample

# %%
for T in (200, 1000):
    s = make_linear_schedule(T)
    marks = [0, T // 4, T // 2, 3 * T // 4, T - 1]
    print(f"T={T}:", ", ".join(f"ab[{t}]={s.alpha_bar[t]:.4f}" for t in marks))

# %% [markdown]
# ## Closed form against the step-by-step chain
#
# Both should give the same marginal: mean sqrt(ab)*x0 and variance 1-ab.

# %%
sched = make_linear_schedule()
x0 = np.full(100_000, 0.6)
for t in (50, 100, 199):
    closed = q_sample(x0, t, Rng(t).normal(x0.shape), sched).data
    x = x0.copy()
    rng = Rng(1000 + t)
    for k in range(t + 1):
        x = np.sqrt(1 - sched.beta[k]) * x + np.sqrt(sched.beta[k]) * rng.normal(x.shape)
    print(t, "mean %.4f vs %.4f" % (closed.mean(), x.mean()), "var %.4f vs %.4f" % (closed.var(), x.var()))

# %% [markdown]
# ## Oracle denoiser
#
# Feed the reverse chain the exact noise that separates the current latent from
# a planted clean latent.  The chain should land on the planted latent.

# %%
z0 = Rng(3).uniform((4, 4), -1, 1)
z = Rng(4).normal(z0.shape)
chain = Rng(5)
for t in range(sched.T - 1, -1, -1):
    eps = (z - sched.sqrt_alpha_bar[t] * z0) / sched.sqrt_one_minus_alpha_bar[t]
    z = ancestral_step(z, t, eps, chain, sched).data
    if t in (150, 100, 50, 0):
        print(f"t={t:3d} max |z - z0| = {np.abs(z - z0).max():.4f}")
