"""Definitional 2-D DCT-II, four nested loops, orthonormal scaling."""
import math

import numpy as np


def dct2_bruteforce(block):
    n = block.shape[0]
    out = np.zeros((n, n))
    for u in range(n):
        for v in range(n):
            cu = math.sqrt((1 if u == 0 else 2) / n)
            cv = math.sqrt((1 if v == 0 else 2) / n)
            acc = 0.0
            for x in range(n):
                for y in range(n):
                    acc += block[x, y] * math.cos((2 * x + 1) * u * math.pi / (2 * n)) \
                        * math.cos((2 * y + 1) * v * math.pi / (2 * n))
            out[u, v] = cu * cv * acc
    return out
