"""
Grouping satellite bands into mosaics
=====================================

Every geostationary imager measures a slightly different set of spectral
bands.  Bands from different satellites whose wavelength ranges overlap are
grouped into one global mosaic, then blended pixel by pixel with weights that
fall off with distance from each satellite's nadir.
"""

import numpy as np

from nowcast.geogrid import GeoGrid
from nowcast.mosaic import blend_mosaic, load_footprints, plan_mosaics, table_catalog

# The bundled catalog lists the bands of the five imagers.
catalog = table_catalog()
print(len(catalog), "bands from", len({b.satellite for b in catalog}), "satellites")

plan = plan_mosaics(catalog)
for m in plan.mosaics:
    print(f"{m.name:18s} {m.center:6.2f} um  [{m.lo:.2f}, {m.hi:.2f}]  "
          f"{', '.join(sorted(m.satellites))}")
print("bands left out:", [f"{b.satellite}/{b.band_id}" for b in plan.unassigned])

# Blend one mosaic on a coarse global grid.  Each member raster here is a
# constant equal to its satellite index, so the blend shows the weighting.
grid = GeoGrid(90.0, -180.0, 5.0, np.zeros((36, 72, 1), np.float32))
footprints = load_footprints()
spec = plan.mosaics[0]
rasters = {b: grid.with_data(np.full(grid.shape[:2] + (1,), i, np.float32))
           for i, b in enumerate(spec.members)}
blended = blend_mosaic(spec, rasters, footprints, grid)
print(f"{spec.name}: {blended.mask.mean():.0%} of the globe seen by at least one member")

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt

fig, ax = plt.subplots(figsize=(8, 4))
im = ax.imshow(np.where(blended.mask, blended.data[:, :, 0], np.nan),
               extent=(-180, 180, -90, 90), cmap="viridis")
fig.colorbar(im, ax=ax, label="blended satellite index")
ax.set_title(spec.name)
fig.savefig("mosaic_blend.png", dpi=80)
