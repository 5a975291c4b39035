"""
Reverse-mode gradients on a tape
================================

Every operation on a tape-bound tensor records how to push a gradient back
to its inputs. Here a small convolution + dense head is differentiated and
checked against central finite differences.
"""
import numpy as np

from gconv_lab import Tape, grad_check
from gconv_lab import tensor as T

rng = np.random.default_rng(0)
x = rng.standard_normal((2, 5, 5, 3))      # NHWC
k = rng.standard_normal((3, 3, 3, 4))      # kh, kw, in, out
w = rng.standard_normal((4, 1))


def head(x, k, w):
    h = T.activation(T.conv2d(x, k), "tanh")
    return T.sum(T.matmul(T.gap(h), w))


tape = Tape()
xv, kv, wv = tape.variable(x), tape.variable(k), tape.variable(w)
loss = head(xv, kv, wv)
tape.backward(loss)
print("loss", float(loss.data))
print("dL/dw", tape.grad(wv).ravel())

# max |analytic - numeric| / (|analytic| + |numeric|) over every coordinate
print("gradient check", grad_check(head, [x, k, w]))
