"""Exponential decay of harmonic measure in a thin strip, and the
Carleson-type bound at the slit tip.

Run: python3 demos/04_decay_and_carleson.py
"""
import numpy as np

from bhplab.bhp import BhpConfig, ambient_form, carleson_estimate, harmonic_measure_decay
from bhplab.forms import assemble, laplacian
from bhplab.geometry import NodeSet, build_grid, preset
from bhplab.potential import capacity_width, transfer

g = build_grid(preset("square"), 1 / 128)
f = assemble(g, laplacian())
strip = NodeSet(np.flatnonzero(g.delta < 1 / 32), "strip")
# width measured in a larger box so the outside of the square counts as complement
amb = ambient_form(f, 0.25)
w = capacity_width(amb, transfer(g, amb.grid, strip), samples=8).width
fit = harmonic_measure_decay(f, strip, [g.nearest_node(0.5, 1 / 64)], np.linspace(2.5 * w, 0.45, 8), w)
print(f"capacity width {w:.4f}; log omega ~ {fit.slope:.3f} r/w + {fit.intercept:.3f} (R^2 {fit.r2:.4f})")

g = build_grid(preset("slit_square"), 1 / 128)
f = assemble(g, laplacian())
tab = carleson_estimate(f, BhpConfig(g.nearest_boundary_point(0.5, 0.5), 1 / 16, 0.35, 2.0, C_Omega=2.2))
ratios = np.array([row["ratio"] for row in tab.rows])
print(f"Carleson ratios over {len(ratios)} points: median {np.median(ratios):.3f}, max A_2 {tab.A_2:.3f}, "
      f"adjoint max {tab.A_2_adjoint:.3f}")
