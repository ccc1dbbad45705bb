"""Show that the antisymmetric convolution exchanges equal and opposite features."""

import numpy as np

from cconvfluid.contconv import AsccHalfKernel, ascc_forward, cconv_forward, interpolate_kernel

rng = np.random.default_rng(0)
half = rng.normal(size=(2, 4, 4, 2, 3))
u = rng.uniform(-1, 1, (5, 3))
G = interpolate_kernel(AsccHalfKernel(half), u)
print("max |G(u) + G(-u)|:", np.abs(G + interpolate_kernel(AsccHalfKernel(half), -u)).max())

x = rng.uniform(0, 0.3, (200, 3))
f = rng.normal(size=(200, 2))
out, _ = ascc_forward(f, x, half, R=0.1125)
full = np.concatenate([half, half[::-1, ::-1, ::-1]], axis=0)  # a symmetric filter for contrast
plain, _ = cconv_forward(f, x, x, full, R=0.1125)
print("column sums, antisymmetric:", out.sum(0).round(12))
print("column sums, symmetric:    ", plain.sum(0).round(3))
