"""Data generators used as independent oracles by the tests.

Nothing here calls an estimator. Pairs are produced directly from the
image-formation model with known parameters.
"""

from __future__ import annotations

import numpy as np

from photocal.tracker import PairSet, TrackSet, observe


def forward(lut: np.ndarray, x) -> np.ndarray:
    """Intensity for normalized irradiance ``x`` under a strictly increasing LUT."""
    return np.interp(np.asarray(x, dtype=np.float64), lut, np.arange(256.0))


def _keep(m1, m2):
    return (m1 >= 5) & (m1 <= 250) & (m2 >= 5) & (m2 <= 250)


def crf_pairs(lut, n=20000, seed=0, exposure_max=8.0, scale=1.0, quantize=True) -> PairSet:
    """Same-radius pairs of one scene point seen at two exposures.

    Exposures span ``[1, exposure_max]`` ms so ratios span
    ``[1/exposure_max, exposure_max]``.
    """
    rng = np.random.default_rng(seed)
    e1 = np.exp(rng.uniform(0, np.log(exposure_max), n))
    e2 = np.exp(rng.uniform(0, np.log(exposure_max), n))
    L = scale * rng.uniform(0.01, 1.0, n) / exposure_max
    m1, m2 = forward(lut, e1 * L), forward(lut, e2 * L)
    if quantize:
        m1, m2 = np.round(m1), np.round(m2)
    k = _keep(m1, m2)
    z = np.zeros(k.sum())
    return PairSet(m1[k], m2[k], z + 0.5, z + 0.5, e1[k], e2[k], z, z + 1)


def vignette_pairs(lut, coeffs, n=20000, seed=0, quantize=True) -> PairSet:
    """Pairs of one point seen at two radii and two exposures."""
    a2, a4, a6 = coeffs
    V = lambda r: 1 + a2 * r**2 + a4 * r**4 + a6 * r**6
    rng = np.random.default_rng(seed)
    e1 = np.exp(rng.uniform(0, np.log(8), n))
    e2 = np.exp(rng.uniform(0, np.log(8), n))
    r1, r2 = rng.uniform(0, 1, n), rng.uniform(0, 1, n)
    L = rng.uniform(0.01, 1.0, n) / 8
    m1, m2 = forward(lut, e1 * V(r1) * L), forward(lut, e2 * V(r2) * L)
    if quantize:
        m1, m2 = np.round(m1), np.round(m2)
    k = _keep(m1, m2)
    z = np.zeros(k.sum())
    return PairSet(m1[k], m2[k], r1[k], r2[k], e1[k], e2[k], z, z + 1)


def projected_tracks(scene, frames, start: int, stop: int, step: int = 12, border: int = 2, only=None) -> TrackSet:
    """Ground-truth tracks: a pixel grid of frame ``start`` projected into
    later frames through the known geometry. ``only`` restricts the frames
    that receive observations."""
    h, w = scene.shape
    ys, xs = np.mgrid[border:h - border:step, border:w - border:step]
    uv = np.stack([xs.ravel(), ys.ravel()], axis=1).astype(np.float64)
    X, _ = scene.intersect(start, uv)
    ts = TrackSet()
    for fid in range(start, stop) if only is None else sorted(only):
        p, z = scene.project_world(fid, X)
        for tid, (x, y) in enumerate(p):
            if z[tid] > 0 and 0 <= x <= w - 1 and 0 <= y <= h - 1:
                ts.add(tid, observe(frames[fid], x, y))
    return ts


def kink_free(obs, pose, delta_p=9.0, delta_g=3.0, margin=1e-3):
    """Restrict ``obs`` to points whose residuals are smooth in the pose near
    ``pose``: every pattern sample lands at least ``margin`` px from a target
    pixel boundary and no residual lies within ``margin`` of a Huber knee."""
    import dataclasses

    from photocal.pose import PATTERN, sample

    n = len(PATTERN)
    uv = (obs.points[:, None, :] + PATTERN[None]).reshape(-1, 2)
    idp = np.repeat(obs.inverse_depth, n)
    Xc = pose.apply(obs.camera.backproject(uv, idp))
    proj = obs.camera.project(Xc)
    ref, _, ok_r = sample(obs.reference, uv)
    tgt, _, ok_t = sample(obs.target, proj)
    frac = proj - np.floor(proj)
    away = (np.min(np.minimum(frac, 1 - frac), axis=1) > margin) & ok_r & ok_t & (Xc[:, 2] > 0)
    away &= np.abs(np.abs(tgt - ref) - delta_p) > margin * delta_p
    keep = away.reshape(-1, n).all(axis=1)

    Xk = pose.apply(obs.camera.backproject(obs.keypoints_ref, obs.keypoint_inverse_depth))
    rg = obs.camera.project(Xk) - obs.keypoints_obs
    kk = np.all(np.abs(np.abs(rg) - delta_g) > margin * delta_g, axis=1) & (Xk[:, 2] > 0)
    return dataclasses.replace(
        obs,
        points=obs.points[keep],
        inverse_depth=obs.inverse_depth[keep],
        keypoints_ref=obs.keypoints_ref[kk],
        keypoint_inverse_depth=obs.keypoint_inverse_depth[kk],
        keypoints_obs=obs.keypoints_obs[kk],
    )


def finite_difference_gradient(energy, pose, h=1e-6):
    from photocal.geometry import PoseSE3

    g = np.zeros(6)
    for k in range(6):
        e = np.zeros(6)
        e[k] = h
        g[k] = (energy(PoseSE3.exp(e) @ pose) - energy(PoseSE3.exp(-e) @ pose)) / (2 * h)
    return g
