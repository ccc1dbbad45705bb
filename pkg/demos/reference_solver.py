"""Generate a small drop scene with the reference solver and print how it settles."""

import numpy as np

from cconvfluid.core import SimConfig
from cconvfluid.metrics import density
from cconvfluid.refsim import generate, preset, scene_config

p = preset("drop-tiny", seed=0, frame_count=120)
cfg = scene_config(p, SimConfig())
seq = generate(p, cfg)
print(f"{seq.n_fluid} fluid and {seq.n_solid} boundary particles, {len(seq)} frames")
for t in range(0, len(seq), 20):
    speed = np.linalg.norm(seq.fluid_vel[t], axis=1).mean()
    rho = density(seq.fluid_pos[t], cfg).max()
    print(f"frame {t:3d}  mean speed {speed:.3f} m/s  max density {rho:7.1f} kg/m^3")
