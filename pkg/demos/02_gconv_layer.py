"""
The generative convolution layer
================================

A GConv layer keeps an ordinary kernel bank K and adds a latent-driven copy:
each sample scales K's output channels by S = sigmoid([gap(X), z] W_s) and
remixes them through W_L. The fused form never builds per-sample kernels.
"""
import numpy as np

from gconv_lab import layers as L
from gconv_lab import tensor as T
from gconv_lab.layers import GConvParams

rng = np.random.default_rng(1)
b, h, m, n, d_z = 3, 6, 4, 5, 8
X = np.repeat(rng.standard_normal((1, h, h, m)), b, axis=0)   # same image, three latents
z = rng.standard_normal((b, d_z))
p = GConvParams(rng.standard_normal((9 * m, n)), rng.standard_normal((m + d_z, n)),
                rng.standard_normal((n, n)), (3, 3), np.zeros(n))

S = L.gconv_scaling(T.gap(X).data, z, p.W_s).data
print("per-sample channel scales\n", S.round(3))

direct = L.gconv_forward_direct(X, z, p).data
fused = L.gconv_forward_fused(X, z, p).data
print("direct vs fused, max relative gap:", np.abs(direct - fused).max() / np.abs(direct).max())

# identical inputs, different latents -> different feature maps
print("slice 0 == slice 1 ?", np.array_equal(fused[0], fused[1]))
plain = T.conv2d(X, p.K.data.reshape(3, 3, m, n)).data
print("plain conv slice 0 == slice 1 ?", np.array_equal(plain[0], plain[1]))

# with the mixing matrix zeroed the layer is a plain convolution again
p.W_L = T.Tensor(np.zeros((n, n)))
print("W_L = 0 reduces to conv:", np.array_equal(L.gconv_forward_fused(X, z, p).data,
                                                 T.add(plain, p.bias).data))
