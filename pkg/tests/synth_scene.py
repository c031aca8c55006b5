"""Synthetic rendered dataset: textured cube-corner faces ray-cast to
pinhole views. Exercises the full image -> features -> matches ->
reconstruction path without any real dataset."""

from __future__ import annotations

import numpy as np

from oracles import look_at_rotation

from sfmkit.image import gaussian_blur


def _textures(seed, n=3, size=384):
    """Multi-octave noise: strong local gradients at several scales, so the
    texture survives 8-bit quantization (like natural photographs)."""
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        t = np.zeros((size, size))
        for sigma, weight in ((1.0, 1.0), (3.0, 1.5), (9.0, 2.0)):
            t += weight * gaussian_blur(rng.uniform(size=(size, size)), sigma)
        out.append((t - t.min()) / (t.max() - t.min()))
    return out


def render_view(planes, K, R, t, width, height):
    """Ray-cast textured rectangles (O, U, V, texture) with z-buffering."""
    C = -R.T @ t
    ys, xs = np.mgrid[0:height, 0:width]
    d_cam = np.stack([(xs - K[0, 2]) / K[0, 0],
                      (ys - K[1, 2]) / K[1, 1],
                      np.ones_like(xs, dtype=float)], axis=-1)
    d_world = d_cam @ R           # rows times R == R^T applied to each ray
    img = np.zeros((height, width))
    depth = np.full((height, width), np.inf)
    for O, U, V, tex in planes:
        n_vec = np.cross(U, V)
        denom = d_world @ n_vec
        ok = np.abs(denom) > 1e-12
        lam = np.where(ok, ((O - C) @ n_vec) / np.where(ok, denom, 1.0), -1.0)
        lam_safe = np.where(lam > 0, lam, 0.0)
        P = C + lam_safe[..., None] * d_world
        rel = P - O
        u = rel @ U / (U @ U)
        v = rel @ V / (V @ V)
        hit = ((lam > 0.1) & (u >= 0) & (u <= 1) & (v >= 0) & (v <= 1)
               & (lam < depth))
        th, tw = tex.shape
        uu = np.clip(u * (tw - 1), 0, tw - 1)
        vv = np.clip(v * (th - 1), 0, th - 1)
        u0 = np.floor(uu).astype(int)
        v0 = np.floor(vv).astype(int)
        u1 = np.minimum(u0 + 1, tw - 1)
        v1 = np.minimum(v0 + 1, th - 1)
        fu, fv = uu - u0, vv - v0
        val = ((1 - fv) * ((1 - fu) * tex[v0, u0] + fu * tex[v0, u1])
               + fv * ((1 - fu) * tex[v1, u0] + fu * tex[v1, u1]))
        img = np.where(hit, val, img)
        depth = np.where(hit, lam, depth)
    return img


def make_corner_dataset(n_views=8, width=480, height=360, radius=7.0,
                        seed=0, fx=600.0, fy=600.0, cx=240.0, cy=180.0):
    """Views on a 30..60 degree arc around a textured cube corner, so every
    frame sees all three faces (no planar-dominant view, which would make
    two-view bootstrap projectively ambiguous)."""
    tex = _textures(seed)
    hs = 1.5
    planes = [
        (np.array([hs, -hs, -hs]), np.array([0.0, 2 * hs, 0]),
         np.array([0.0, 0, 2 * hs]), tex[0]),
        (np.array([-hs, -hs, -hs]), np.array([2 * hs, 0.0, 0]),
         np.array([0.0, 2 * hs, 0]), tex[1]),
        (np.array([-hs, hs, -hs]), np.array([2 * hs, 0.0, 0]),
         np.array([0.0, 0, 2 * hs]), tex[2]),
    ]
    K = np.array([[fx, 0.0, cx], [0.0, fy, cy], [0.0, 0.0, 1.0]])
    images, rotations, centers = [], [], []
    for i in range(n_views):
        theta = np.deg2rad(30.0 + 30.0 * i / max(n_views - 1, 1))
        d = np.array([np.cos(theta), 0.55, -np.sin(theta)])
        C = radius * d / np.linalg.norm(d)
        R = look_at_rotation(C, up=(0, 0, 1))
        images.append(render_view(planes, K, R, -R @ C, width, height))
        rotations.append(R)
        centers.append(C)
    return {"images": images, "K": K, "R": rotations,
            "centers": np.array(centers),
            "fx": fx, "fy": fy, "cx": cx, "cy": cy}
