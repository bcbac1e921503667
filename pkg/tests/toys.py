"""Small hand-checkable models for trainer oracles."""
import numpy as np
import torch
import torch.nn as nn

from biadapt.nets import Classifier, Discriminator, ModelState


class Identity(nn.Module):
    def __init__(self, dim):
        super().__init__()
        self.w = nn.Parameter(torch.ones(dim))

    def forward(self, x, maps=None):
        return x * self.w


class MLPExtractor(nn.Module):
    def __init__(self, d_in, d_out, hidden=32):
        super().__init__()
        self.net = nn.Sequential(nn.Linear(d_in, hidden), nn.Tanh(), nn.Linear(hidden, d_out))

    def forward(self, x, maps=None):
        return self.net(x)


def toy_state(F, feat_dim, seed=0, disc_hidden=16, dtype=torch.float64):
    import copy

    torch.manual_seed(seed)
    G = Classifier(feat_dim, hidden=max(2, feat_dim))
    Q = Discriminator(feat_dim, disc_hidden)
    st = ModelState(F, copy.deepcopy(F), G, Q, None)
    return st.to(dtype)


def two_moons(n, rng, noise=0.1):
    t = rng.uniform(0, np.pi, n)
    y = rng.integers(0, 2, n)
    x = np.where(y[:, None] == 0, np.c_[np.cos(t), np.sin(t)], np.c_[1 - np.cos(t), 0.5 - np.sin(t)])
    return x + noise * rng.normal(size=x.shape), y


def rotate(x, degrees, shift=(0.0, 0.0)):
    a = np.deg2rad(degrees)
    r = np.array([[np.cos(a), -np.sin(a)], [np.sin(a), np.cos(a)]])
    return x @ r.T + np.asarray(shift)


class Linear(nn.Module):
    """Affine extractor; can drop an input direction only by zeroing its column."""

    def __init__(self, d_in, d_out):
        super().__init__()
        self.lin = nn.Linear(d_in, d_out)

    def forward(self, x, maps=None):
        return self.lin(x)


def moons_with_nuisance(n, rng, offset, nuisance_sd=0.5):
    """Two moons plus a third coordinate whose mean differs by domain."""
    x, y = two_moons(n, rng)
    return np.c_[x, offset + nuisance_sd * rng.normal(size=n)], y
