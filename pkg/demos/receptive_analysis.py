#!/usr/bin/env python3
"""Walk through the receptive-field calculus on the two bundled backbones.

A neuron deep in a conv stack sees a bounded window of the input; the size
of that window (the receptive field) and its growth per layer decide where
a feature map can be cut into horizontal stripes without every stripe
seeing the whole image anyway. This script prints the per-layer tables for
the small toy backbone and for a deep residual-style geometry, then shows
how the numbers justify (or rule out) stripe plans at several depths.

Run:  python3 demos/receptive_analysis.py
"""

from stripenet.receptive import (
    analyze,
    bundled_archspec_path,
    feature_size,
    load_archspec,
    receptive_field,
    restricted_region,
)

# ---------------------------------------------------------------------------
# 1. The toy backbone: four 3x3 convolutions, three of them stride 2.
# ---------------------------------------------------------------------------

toy = load_archspec(bundled_archspec_path("toy_backbone"))
print("toy backbone (input 48x16)")
print(analyze(toy))
print()

# The interesting question for stripe learning: if we split feature map 2
# (after the two stem convs) into n_s stripes and continue through the
# remaining two convs, how much of the INPUT does stripe feature end up
# looking at?  `restricted_region` answers with the input-row budget per
# stripe, and calls the plan effective when the downstream receptive field
# no longer covers more rows than the stripe itself spans.

print("stripe plans for map 2 (12 rows):")
for n_s in (1, 2, 3, 4, 6):
    plan = restricted_region(toy, 2, n_s)
    verdict = "effective" if plan.effective else "NOT effective"
    print(
        f"  n_s={n_s}: stripe height {plan.stripe_height:2d} rows -> "
        f"each stripe sees {plan.restricted_region:3d} input rows "
        f"(tail RF {plan.tail_rf}); {verdict}"
    )
print()
print("With one stripe the 'stripe' is the whole map, so nothing is")
print("restricted; from two stripes up, each part genuinely specialises.")
print()

# ---------------------------------------------------------------------------
# 2. The deep backbone: a 50-layer residual geometry with its last
#    downsampling stage removed (stride 1), the common re-ID variant.
# ---------------------------------------------------------------------------

deep = load_archspec(bundled_archspec_path("resnet50_laststride1"))
report = analyze(deep)
final = report.rows[-1]
print(f"deep backbone (input {deep.input_size[0]}x{deep.input_size[1]}): "
      f"{len(deep.layers)} conv/pool layers on the main path")
print(f"  final map: {final.h}x{final.w}, cumulative stride {final.stride_h}, "
      f"receptive field {final.rf_h}x{final.rf_w}")
print()

# 363 input pixels of receptive field against a 384-pixel-tall input: a
# neuron at the top of the final map still sees almost the entire person.
# Cutting THAT map into stripes barely restricts anything, which is the
# argument for partitioning an earlier map and sharing the tail weights.

h_in = deep.input_size[0]
print(f"  final-map RF / input height = {final.rf_h}/{h_in} "
      f"= {final.rf_h / h_in:.2f}")
for j in (len(deep.layers) - 10, len(deep.layers)):
    h_j = feature_size(deep, j)[0]
    rf = receptive_field(deep, 0, j)[0]
    print(f"  map {j:2d}: height {h_j:3d}, RF {rf:3d} input rows")
