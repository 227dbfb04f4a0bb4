"""Scalar Adam on f(w) = w^2 from w = 1, lr = 0.1, 100 steps (betas 0.9/0.999, eps 1e-8)."""
import math

w, m, v = 1.0, 0.0, 0.0
b1, b2, eps, lr = 0.9, 0.999, 1e-8, 0.1
for t in range(1, 101):
    g = 2.0 * w
    m = b1 * m + (1 - b1) * g
    v = b2 * v + (1 - b2) * g * g
    mh = m / (1 - b1 ** t)
    vh = v / (1 - b2 ** t)
    w -= lr * mh / (math.sqrt(vh) + eps)
print(repr(w))
