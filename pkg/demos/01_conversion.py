"""Four ways of squeezing a 16-bit radiograph into 8 bits.

Run with ``python demos/01_conversion.py``.  Writes nothing.
"""

import numpy as np

from xrayqc import GlobalBounds, compute_global_bounds, compute_local_bounds, convert_global, convert_local
from xrayqc import convert_mixed, convert_naive
from xrayqc.synth import AnomalyKind, clean_plate, inject_anomaly

rng = np.random.default_rng(0)

# a clean coated plate sits in a narrow band of detector counts
plate = clean_plate(rng, 256, 128, mean=2250.0, spread=60.0, hot_pixels=2)
print("raw range", plate.min(), plate.max())  # the two hot pixels stretch the max
print("1st-99th pct", np.percentile(plate, [1, 99]))

# add a bubble so there is something to look at
bubble = inject_anomaly(plate, AnomalyKind.BUBBLE, 0.9, rng)

# method 1: drop the low byte; the whole coating becomes a handful of grey levels
naive = convert_naive(bubble)
print("naive levels used:", np.unique(naive[0]).size)

# method 2: one stretch for the whole dataset; the bubble core sets the upper bound here
bounds = compute_global_bounds([plate, bubble])
print("global bounds", bounds)
glob = convert_global(bubble, bounds)
print("global levels used:", np.unique(glob[0]).size)

# the bounds quoted for the real detector data
wide = convert_global(bubble, GlobalBounds(1700, 28000))
print("levels with (1700, 28000):", np.unique(wide[0]).size)

# method 3: every image gets its own stretch
print("local bounds", compute_local_bounds(bubble))
local = convert_local(bubble)
print("local levels used:", np.unique(local[0]).size)

# method 4: one method per channel
mixed = convert_mixed(bubble, bounds)
print("mixed shape", mixed.shape, "channel means", mixed.reshape(3, -1).mean(axis=1).round(1))
