"""
Building blocks: gate, refinement and aggregation
=================================================

The encoder block regulates a feature map in three steps.  A spatial gate
splits positions into informative and non-informative parts and swaps
channel halves between them; channel refinement turns the result into a
high and a low stream; the aggregation module mixes the two streams with a
convolution path and a cross-attention path, then fuses two mirrored
branches with per-channel weights.
"""

import numpy as np

from scrnet.fam import FAM, ccapm_forward, fusion_block
from scrnet.nn_ops import ParameterStore, shift
from scrnet.scrm import SCRM, SpatialGate, channel_refinement, cr_channels, spatial_gate
from scrnet.tensor import Tensor

rng = np.random.default_rng(1)
x = Tensor(rng.normal(size=(1, 16, 8, 8)))

# --- spatial gate ---------------------------------------------------------
sg = SpatialGate.build(ParameterStore(), "sg", 16)
out, w1, w2 = spatial_gate(x, sg, return_masks=True)
print(f"gate: {w1.mean():.0%} of positions informative, W2 max {w2.max():.3f}")

# with gamma = beta = 0 every sigmoid sits at 0.5 and the gate is the identity
sg.gn.params.gamma.data[...] = 0
print("identity case exact:", np.array_equal(sg(x).data, x.data))

# --- channel refinement ---------------------------------------------------
print("channel bookkeeping for C=16:", cr_channels(16))
block = SCRM.build(ParameterStore(), "scrm", 16, rng)
xh, xl = channel_refinement(spatial_gate(x, block.sg), block.cr)
print("high/low streams:", xh.shape, xl.shape)

# --- shift: five channel groups moved -2..+2 columns ------------------------
ramp = Tensor(np.tile(np.arange(6.0), (1, 5, 1, 1)))
print("shifted rows:\n", shift(ramp).data[0, :, 0])

# --- aggregation ----------------------------------------------------------
fam = FAM.build(ParameterStore(), "fam", 16, rng)
y1 = ccapm_forward(xh, xl, fam.top)
y2 = ccapm_forward(xl, xh, fam.bottom)
fused, wg1, wg2 = fusion_block(y1, y2, return_weights=True)
print("fusion weights (first 4 channels):", np.round(wg1[0, :4], 3), "sum to", (wg1 + wg2).max())

# ablating the aggregation replaces it by a plain sum of the two streams
store_full, store_abl = ParameterStore(), ParameterStore()
SCRM.build(store_full, "s", 16, rng)
SCRM.build(store_abl, "s", 16, rng, ablate_fam=True)
print("parameters with/without aggregation:", store_full.count(), store_abl.count())
