"""How the head turns raw outputs into a smooth coefficient profile.

Positive section widths are rescaled to the insertion depth, centres sit at
the section midpoints and each Gaussian width is squashed between the bounds
that make it fall to 1/20 and 1/3 at its section edge. The normalised
Gaussians then blend the per-model amplitudes into Theta(s).

    python3 demos/local_model_profile.py
"""
import numpy as np

from geocontact import autodiff as ad
from geocontact.dynamics import LpvSecondOrder, Trajectory, simulate, steady_state_gain
from geocontact.local_models import (LocalModelSet, basis_weights, centers_from_sections,
                                     eval_profile, scale_sections, squash_variance,
                                     variance_bounds)

s_max = 0.012                                   # 12 mm insertion
raw_sections = np.array([1.0, 3.0, 1.5, 0.5])
c_raw = np.array([-2.0, 0.0, 1.0, 4.0])

with ad.no_grad():
    d_s = scale_sections(raw_sections, s_max).data
    b = centers_from_sections(d_s).data
    c = squash_variance(c_raw, d_s).data
lo, hi = variance_bounds(d_s)
print("sections [mm]", np.round(1e3 * d_s, 3), "sum", 1e3 * d_s.sum())
print("centres  [mm]", np.round(1e3 * b, 3))
for i in range(len(c)):
    print(f"  model {i}: c = {1e3 * c[i]:.3f} mm in [{1e3 * lo[i]:.3f}, {1e3 * hi[i]:.3f}]")

# stiffness rises with depth, damping and mass stay close to nominal
a = np.array([[1.0, 1.0, 1.0, 1.0],
              [20.0, 20.0, 22.0, 25.0],
              [400.0, 400.0, 400.0, 400.0],
              [1e5, 2e5, 4e5, 8e5]])
models = LocalModelSet.from_arrays(a, b, c, s_max)
s = np.linspace(0.0, s_max, 7)
with ad.no_grad():
    theta = eval_profile(models, s).data[0]
print("\ndepth [mm]  weights sum   b0(s)      static gain [N/m]")
gain = steady_state_gain(models, s)[0]
for si, wi, th, g in zip(s, basis_weights(models, s)[0], theta, gain):
    print(f"{1e3 * si:9.2f}  {wi.sum():11.15f}  {th[3]:9.1f}  {g:9.1f}")

# the force along a ramp-and-hold insertion
t = np.linspace(0.0, 2.0, 400)
u = s_max * np.clip(t / 1.5, 0.0, 1.0)
F = simulate(LpvSecondOrder(models), Trajectory(t[1], u)).F_hat
print(f"\nforce at full depth {F[-1]:.2f} N, static prediction {gain[-1] * s_max:.2f} N")
