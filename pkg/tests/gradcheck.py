"""Central finite-difference checks on sampled coordinates, double precision."""
import numpy as np
import torch

REL_TOL = 1e-4
ABS_FLOOR = 1e-6


def check_coords(fn, tensors, n_coords=20, eps=1e-6, seed=0):
    """Compare autograd and central differences of scalar ``fn()`` on random coordinates.

    ``tensors`` are leaf float64 tensors with requires_grad. Returns the list of
    (analytic, numeric) pairs; raises AssertionError on the first mismatch.
    """
    rng = np.random.default_rng(seed)
    for t in tensors:
        t.grad = None
    out = fn()
    grads = torch.autograd.grad(out, tensors, allow_unused=True)
    grads = [torch.zeros_like(t) if g is None else g for g, t in zip(grads, tensors)]
    sizes = np.array([t.numel() for t in tensors])
    pairs = []
    for _ in range(n_coords):
        k = rng.choice(len(tensors), p=sizes / sizes.sum())
        idx = int(rng.integers(tensors[k].numel()))
        flat = tensors[k].data.view(-1)
        orig = flat[idx].item()
        with torch.no_grad():
            flat[idx] = orig + eps
            hi = float(fn())
            flat[idx] = orig - eps
            lo = float(fn())
            flat[idx] = orig
        num = (hi - lo) / (2 * eps)
        ana = float(grads[k].reshape(-1)[idx])
        pairs.append((ana, num))
        assert abs(ana - num) <= max(ABS_FLOOR, REL_TOL * max(abs(ana), abs(num))), \
            f"tensor {k} coord {idx}: analytic {ana} vs numeric {num}"
    return pairs
