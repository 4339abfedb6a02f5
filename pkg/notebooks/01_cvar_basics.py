"""
CVaR on particle sets
=====================

How the tail mean behaves on a handful of particle sets, and why it never sits
above the plain mean. Run with ``python3 notebooks/01_cvar_basics.py``.
"""

# %%
import numpy as np

from distded import risk

rng = np.random.default_rng(0)

# %% A skewed return distribution on the D-support [-1, 0]: mostly safe, a
# heavy lump near -1.
z = np.concatenate([rng.uniform(-0.1, 0.0, 900), rng.uniform(-1.0, -0.8, 100)])
print("mean        ", round(z.mean(), 4))
for a in (0.05, 0.1, 0.25, 0.5, 1.0):
    print(f"CVaR_{a:<5}   {float(risk.cvar_alpha(z, a)):.4f}   VaR {float(risk.var_alpha(z, a)):.4f}")

# %% The whole spectrum comes from one sort and is nondecreasing in alpha.
alphas = np.linspace(1 / 50, 1, 50)
spec = risk.cvar_spectrum(z, alphas)
print("nondecreasing:", bool(np.all(np.diff(spec) >= 0)))
print("gap mean - CVaR at alpha=0.1:", round(z.mean() - spec[4], 4))

# %% The dual form (reweighting inside the risk envelope) lands on the same number.
for a in (0.1, 0.35):
    print(a, float(risk.cvar_alpha(z, a)), risk.cvar_dual_oracle(z, a))

# %% With the literal envelope cap 1/(alpha*K) the dual gives the interpolated
# tail mean instead; the two agree whenever alpha*K is an integer.
small = rng.uniform(-1, 0, 7)
for a in (0.2, 3 / 7):
    print(f"alpha={a:.3f}  tail mean {float(risk.cvar_alpha(small, a)):.4f}  "
          f"interpolated {risk.cvar_dual_oracle(small, a, cap=1 / (a * small.size)):.4f}")
