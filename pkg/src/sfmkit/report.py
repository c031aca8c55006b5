"""Figure rendering for the report stage.

Renders the diagnostics that accompany the delimited output: keypoint
counts per image, match counts (per-pair and averaged before/after
geometric verification), the reprojection-error curve around the final
bundle adjustment, and a camera-trajectory / point-cloud view.
"""

from __future__ import annotations

import os

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_keypoint_counts(summary: dict, path: str) -> None:
    counts = [rec["keypoints"] for rec in summary["images"]]
    idx = [rec["index"] for rec in summary["images"]]
    fig, ax = plt.subplots(figsize=(7, 3.2))
    ax.bar(idx, counts, color="tab:blue")
    if counts:
        mean = float(np.mean(counts))
        ax.axhline(mean, color="tab:red", ls="--", lw=1,
                   label=f"mean = {mean:.0f}")
        ax.legend()
    ax.set_xlabel("image")
    ax.set_ylabel("# keypoints")
    ax.set_title("Detected keypoints per image")
    _save(fig, path)


def plot_match_counts(summary: dict, path: str, anchor: int = 0) -> None:
    """Inlier match counts of every pair containing the anchor image."""
    xs, ys = [], []
    for rec in summary["pairs"]:
        if rec["i"] == anchor or rec["j"] == anchor:
            xs.append(rec["j"] if rec["i"] == anchor else rec["i"])
            ys.append(rec["inliers"])
    fig, ax = plt.subplots(figsize=(7, 3.2))
    ax.bar(xs, ys, color="tab:green")
    ax.set_xlabel("image")
    ax.set_ylabel("# inlier matches")
    ax.set_title(f"Matches of image {anchor} across the collection")
    _save(fig, path)


def plot_average_matches(summary: dict, path: str) -> None:
    """Per-image average putative vs inlier match counts over its pairs."""
    per_image: dict[int, list[tuple[int, int]]] = {}
    for rec in summary["pairs"]:
        for img in (rec["i"], rec["j"]):
            per_image.setdefault(img, []).append(
                (rec["putative"], rec["inliers"]))
    idx = sorted(per_image)
    before = [float(np.mean([p for p, _ in per_image[i]])) for i in idx]
    after = [float(np.mean([q for _, q in per_image[i]])) for i in idx]
    fig, ax = plt.subplots(figsize=(7, 3.2))
    w = 0.4
    ax.bar(np.array(idx) - w / 2, before, width=w, color="tab:blue",
           label="before verification")
    ax.bar(np.array(idx) + w / 2, after, width=w, color="tab:green",
           label="after verification")
    ax.set_xlabel("image")
    ax.set_ylabel("average # matches")
    ax.set_title("Average matches per image")
    ax.legend()
    _save(fig, path)


def plot_reprojection_errors(summary: dict, path: str) -> None:
    recs = sorted(summary["per_view_errors"], key=lambda r: r["index"])
    idx = [r["index"] for r in recs]
    before = [r["before_px"] for r in recs]
    after = [r["after_px"] for r in recs]
    fig, ax = plt.subplots(figsize=(7, 3.2))
    ax.plot(idx, before, "o-", color="tab:orange", label="before BA")
    ax.plot(idx, after, "s-", color="tab:green", label="after BA")
    ax.set_xlabel("image")
    ax.set_ylabel("mean reprojection error [px]")
    ax.set_title("Reprojection error around the final bundle adjustment")
    ax.legend()
    _save(fig, path)


def plot_trajectory(summary: dict, path: str, max_points: int = 20000) -> None:
    centers = np.array([rec["center"] for rec in summary["poses"]])
    pts = np.array([rec["xyz"] for rec in summary["points"][:max_points]])
    fig = plt.figure(figsize=(6, 6))
    ax = fig.add_subplot(projection="3d")
    if pts.size:
        ax.scatter(pts[:, 0], pts[:, 1], pts[:, 2], s=1, c="0.6", alpha=0.5)
    if centers.size:
        ax.scatter(centers[:, 0], centers[:, 1], centers[:, 2],
                   s=25, c="tab:green", depthshade=False, label="cameras")
        ax.legend()
    ax.set_title("Camera centers and sparse point cloud")
    _save(fig, path)


def render_figures(summary: dict, out_dir: str) -> list[str]:
    """Render every report figure into ``out_dir``; returns the paths."""
    os.makedirs(out_dir, exist_ok=True)
    jobs = [
        ("keypoints_per_image.png", plot_keypoint_counts),
        ("matches_anchor0.png", plot_match_counts),
        ("average_matches.png", plot_average_matches),
        ("reproj_error.png", plot_reprojection_errors),
        ("trajectory.png", plot_trajectory),
    ]
    paths = []
    for name, fn in jobs:
        p = os.path.join(out_dir, name)
        fn(summary, p)
        paths.append(p)
    return paths
