"""Closed-form values asserted by the unit tests."""
from mpmath import mp, log, exp, mpf
mp.dps = 30
print("ce([10,-10], 0) =", mp.nstr(log(1 + exp(mpf(-20))), 20))
print("usps split 7291 @0.3:", int(7291 * 0.3), 7291 - int(7291 * 0.3))
