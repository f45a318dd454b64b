"""Shared fixtures-by-function for the test suite."""

import numpy as np
from scipy import ndimage

from quizreg.volume import Volume


def _phantom_params(n, seed):
    rng = np.random.default_rng(seed)
    centres = rng.uniform(0.2 * n, 0.8 * n, size=(5, 3))
    sigmas = rng.uniform(0.12 * n, 0.25 * n, size=5)
    amps = rng.uniform(0.5, 1.5, size=5)
    return centres, sigmas, amps


def phantom_value(n, seed, pts_xyz):
    """Analytic phantom value at arbitrary xyz points."""
    pts = np.asarray(pts_xyz, dtype=np.float64)
    out = np.zeros(len(pts))
    for c, s, a in zip(*_phantom_params(n, seed)):
        out += a * np.exp(-((pts - c) ** 2).sum(axis=1) / (2 * s * s))
    return out


def phantom_grid(n, seed, shift=(0.0, 0.0, 0.0)):
    """Sum of broad Gaussians on an n^3 grid, evaluated analytically at ``v - shift``."""
    z, y, x = np.meshgrid(*(np.arange(n, dtype=np.float64),) * 3, indexing="ij")
    pts = np.stack([x.ravel() - shift[0], y.ravel() - shift[1], z.ravel() - shift[2]], axis=1)
    return phantom_value(n, seed, pts).reshape(n, n, n)


def interpolation_bound(n, seed, pts_xyz):
    """Largest error of one trilinear pass over the phantom grid at the given points."""
    vol = Volume(phantom_grid(n, seed))
    return np.abs(sample_at(vol, pts_xyz) - phantom_value(n, seed, pts_xyz)).max()


def smooth_phantom(n, seed=0):
    return Volume(phantom_grid(n, seed).astype(np.float32))


def sample_at(vol, pts_xyz):
    """Independent trilinear sampler (scipy) at xyz voxel coordinates."""
    pts = np.asarray(pts_xyz, dtype=np.float64)
    coords = [pts[:, 2], pts[:, 1], pts[:, 0]]
    return ndimage.map_coordinates(vol.data.astype(np.float64), coords, order=1, mode="constant", cval=0.0)


def trilinear_error_bound(n, seed, lo=0.0, hi=None, step=0.25):
    """Classical bound on one trilinear pass, (1/8) * sum_i max |d^2 f / dx_i^2| (unit spacing).

    Second derivatives of the Gaussian phantom are evaluated analytically on a fine
    lattice covering ``[lo, hi]^3``.
    """
    hi = n - 1 if hi is None else hi
    axis = np.arange(lo, hi + 1e-9, step)
    z, y, x = np.meshgrid(axis, axis, axis, indexing="ij")
    pts = np.stack([x.ravel(), y.ravel(), z.ravel()], axis=1)
    second = np.zeros((len(pts), 3))
    for c, s, a in zip(*_phantom_params(n, seed)):
        d = pts - c
        g = a * np.exp(-(d ** 2).sum(axis=1) / (2 * s * s))
        second += g[:, None] * (d ** 2 / s ** 4 - 1 / s ** 2)
    return np.abs(second).max(axis=0).sum() / 8
