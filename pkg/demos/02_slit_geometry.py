"""Inner versus Euclidean geometry of the slit square.

Points just above and below the slit are close in the plane but far apart for
paths that stay in the domain.  The inner ball around such a point is the
connected part of the Euclidean ball; its inner radius can exceed r, which is
what the constant C_Omega measures.

Run: python3 demos/02_slit_geometry.py
"""
import numpy as np

from bhplab import geometry
from bhplab.geometry import build_grid, preset

g = build_grid(preset("slit_square"), 1 / 64)
above, below = g.nearest_node(0.25, 0.5 + 1 / 64), g.nearest_node(0.25, 0.5 - 1 / 64)
d = geometry.inner_distance(g, above).dist
print(f"euclidean {np.hypot(*(g.xy[above] - g.xy[below])):.4f}  inner {d[below]:.4f}  "
      f"(around the tip: {2 * np.hypot(0.25, 1 / 64):.4f})")

x = g.nearest_node(0.45, 0.52)
for r in (0.05, 0.1, 0.2):
    inner = geometry.inner_ball(g, x, r)
    comp = geometry.component_ball(g, x, r)
    eucl = geometry.metric_ball(g, x, r)
    print(f"r = {r:.2f}: euclidean {len(eucl):5d} nodes, component {len(comp):5d}, inner {len(inner):5d}, "
          f"inner within component: {inner.issubset(comp)}")

pairs = geometry.sample_node_pairs(g, 40, seed=0)
c = geometry.largest_certified_c(g, 2.0, pairs)
print(f"largest certified c at C = 2 over {len(pairs)} pairs: {c:.3f}")
for C in (1.1, 4.0):
    cert = geometry.certify_inner_uniformity(g, 0.3, C, pairs)
    print(f"c = 0.3, C = {C}: {'certified' if cert.certified else f'{len(cert.violations)} violations'}")
