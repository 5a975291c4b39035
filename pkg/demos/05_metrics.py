"""
Distribution metrics
====================

Frechet distance between Gaussian summaries and the Inception-score formula
over a class-probability matrix.
"""
import numpy as np

from gconv_lab.metrics import GaussianStats, fit_gaussian_stats, frechet_distance, inception_score

rng = np.random.default_rng(2)
real = rng.standard_normal((5000, 3))
shifted = real + [0.5, 0.0, 0.0]
wider = 2 * rng.standard_normal((5000, 3))

p = fit_gaussian_stats(real)
print("F(real, real)    ", frechet_distance(p, p))
print("F(real, shifted) ", frechet_distance(p, fit_gaussian_stats(shifted)))   # ~0.25
print("F(real, wider)   ", frechet_distance(p, fit_gaussian_stats(wider)))     # ~3
print("closed form N(0,4I) vs N(0,I):",
      frechet_distance(GaussianStats(np.zeros(2), 4 * np.eye(2)), GaussianStats(np.zeros(2), np.eye(2))))

confident = np.eye(10)[rng.integers(10, size=1000)]
print("IS, confident and balanced:", inception_score(confident))
print("IS, uninformative:", inception_score(np.full((1000, 10), 0.1)))
print("IS, [[1,0],[.5,.5]]:", inception_score([[1.0, 0.0], [0.5, 0.5]]))
