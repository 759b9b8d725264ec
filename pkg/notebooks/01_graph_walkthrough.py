"""
One dyad through the graph layer
================================

Builds a single synthetic dyad and follows it through node attention, edge
attention and the periodic time code. Runs in a second or two.
"""

import numpy as np

from asyrec import tensor as T
from asyrec.data import MODALITIES, SynthConfig, synth_generate
from asyrec.graph import NeAgnParams, build_adjacency, ne_agn_layer
from asyrec.temporal import TemporalEncoderParams, periodic_encode

np.set_printoptions(precision=3, suppress=True)

ds = synth_generate(SynthConfig(dim=8, dyads_per_class=1, clips=6), seed=0)
dyad = next(iter(ds.dyads.values()))
print("labels i->j, j->i:", ds.schema.classes[dyad.label_i_to_j], ds.schema.classes[dyad.label_j_to_i])
print("features per clip:", dyad.features.shape[1:], "(person, modality, d)")

# %% the fully connected cross-person graph has no self loops
A = build_adjacency(len(MODALITIES))
print(A)

# %% with Phi at zero every target spreads its weight evenly over the other three
params = NeAgnParams.init(8, np.random.default_rng(0))
params.phi.data[...] = 0.0
h_i = T.constant(dyad.features[0, 0])
h_j = T.constant(dyad.features[0, 1])
out = ne_agn_layer(h_i, h_j, params, A)
print("node weights i:", out["w_i"].data)
print("edge weights i->j (columns are targets):")
print(out["beta_ij"].data)

# %% a random Phi reshapes the columns, which stay distributions
params.phi.data[...] = np.random.default_rng(1).normal(0, 0.5, params.phi.shape)
beta = ne_agn_layer(h_i, h_j, params, A)["beta_ij"].data
print(beta)
print("column sums:", beta.sum(axis=0))

# %% time code: even clips take sin, odd clips cos, one cycle per video
enc = TemporalEncoderParams.init(4, np.random.default_rng(2))
t = np.arange(dyad.n_clips)
print(periodic_encode(t, dyad.n_clips - 1, enc).data)
