"""Persistent artifacts: PLY cloud, pose JSON, CSV diagnostics, intrinsics,
and the length-prefixed binary containers used by the staged CLI.

All writers are deterministic functions of their inputs (no timestamps), so
repeated runs with the same seed produce byte-identical files.
"""

from __future__ import annotations

import json
import os
import struct

import numpy as np

from .errors import CorruptFileError, EmptyCloudError, OutputError
from .matching import Match
from .pipeline import (
    STATUS_TRIANGULATED,
    PairResult,
    ReconstructionState,
    Track,
)
from .sift import Keypoint
from .twoview import CameraIntrinsics

FEATURES_MAGIC = b"SFKF"
MATCHES_MAGIC = b"SFKM"
CONTAINER_VERSION = 1


# --- intrinsics ---

def load_intrinsics(path: str) -> CameraIntrinsics:
    """Read a JSON file with fx, fy, cx, cy and optional skew."""
    with open(path, "r", encoding="utf-8") as fh:
        data = json.load(fh)
    try:
        return CameraIntrinsics(fx=float(data["fx"]), fy=float(data["fy"]),
                                cx=float(data["cx"]), cy=float(data["cy"]),
                                skew=float(data.get("skew", 0.0)))
    except KeyError as exc:
        raise CorruptFileError(f"{path}: missing intrinsics key {exc}") from exc


def save_intrinsics(intr: CameraIntrinsics, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump({"fx": intr.fx, "fy": intr.fy, "cx": intr.cx,
                   "cy": intr.cy, "skew": intr.skew}, fh, indent=2)
        fh.write("\n")


# --- binary feature / match containers ---

def save_features(features, names, path: str) -> None:
    """Write per-image keypoints + descriptors; ``features`` is a list of
    (keypoints, descriptor array) and ``names`` the image file names."""
    with open(path, "wb") as fh:
        fh.write(FEATURES_MAGIC)
        fh.write(struct.pack("<II", CONTAINER_VERSION, len(features)))
        for name, (kps, desc) in zip(names, features):
            nb = name.encode("utf-8")
            fh.write(struct.pack("<I", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<II", len(kps), desc.shape[1] if len(kps) else 128))
            if kps:
                flt = np.array([[k.x, k.y, k.sigma, k.orientation, k.response]
                                for k in kps], dtype="<f8")
                ints = np.array([[k.octave, k.layer] for k in kps], dtype="<i4")
                fh.write(flt.tobytes())
                fh.write(ints.tobytes())
                fh.write(np.ascontiguousarray(desc, dtype="<f4").tobytes())


def load_features(path: str):
    """Inverse of :func:`save_features`; returns (features, names)."""
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:4] != FEATURES_MAGIC:
        raise CorruptFileError(f"{path}: bad features magic")
    version, n_images = struct.unpack_from("<II", buf, 4)
    if version != CONTAINER_VERSION:
        raise CorruptFileError(f"{path}: unsupported version {version}")
    pos = 12
    features, names = [], []
    for _ in range(n_images):
        (nlen,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        names.append(buf[pos:pos + nlen].decode("utf-8"))
        pos += nlen
        n_kp, width = struct.unpack_from("<II", buf, pos)
        pos += 8
        kps: list[Keypoint] = []
        if n_kp:
            flt = np.frombuffer(buf, dtype="<f8", count=n_kp * 5, offset=pos)
            pos += n_kp * 5 * 8
            ints = np.frombuffer(buf, dtype="<i4", count=n_kp * 2, offset=pos)
            pos += n_kp * 2 * 4
            desc = np.frombuffer(buf, dtype="<f4", count=n_kp * width,
                                 offset=pos).reshape(n_kp, width).copy()
            pos += n_kp * width * 4
            flt = flt.reshape(n_kp, 5)
            ints = ints.reshape(n_kp, 2)
            for i in range(n_kp):
                kps.append(Keypoint(x=float(flt[i, 0]), y=float(flt[i, 1]),
                                    sigma=float(flt[i, 2]),
                                    orientation=float(flt[i, 3]),
                                    response=float(flt[i, 4]),
                                    octave=int(ints[i, 0]),
                                    layer=int(ints[i, 1])))
        else:
            desc = np.zeros((0, width), dtype=np.float32)
        features.append((kps, desc))
    return features, names


def save_matches(pairwise: dict, path: str) -> None:
    """Write verified pair results (putative matches, inliers, F)."""
    with open(path, "wb") as fh:
        fh.write(MATCHES_MAGIC)
        fh.write(struct.pack("<II", CONTAINER_VERSION, len(pairwise)))
        for (i, j) in sorted(pairwise):
            pr = pairwise[(i, j)]
            fh.write(struct.pack("<iiII", i, j, len(pr.matches),
                                 pr.ratio_matches))
            if pr.matches:
                arr = np.array([[m.idx_left, m.idx_right] for m in pr.matches],
                               dtype="<i4")
                dist = np.array([m.distance for m in pr.matches], dtype="<f8")
                fh.write(arr.tobytes())
                fh.write(dist.tobytes())
            fh.write(struct.pack("<I", len(pr.inlier_idx)))
            if pr.inlier_idx:
                fh.write(np.array(pr.inlier_idx, dtype="<i4").tobytes())
            fh.write(struct.pack("<B", 1 if pr.F is not None else 0))
            if pr.F is not None:
                fh.write(np.ascontiguousarray(pr.F, dtype="<f8").tobytes())


def load_matches(path: str) -> dict:
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:4] != MATCHES_MAGIC:
        raise CorruptFileError(f"{path}: bad matches magic")
    version, n_pairs = struct.unpack_from("<II", buf, 4)
    if version != CONTAINER_VERSION:
        raise CorruptFileError(f"{path}: unsupported version {version}")
    pos = 12
    out = {}
    for _ in range(n_pairs):
        i, j, n_m, n_ratio = struct.unpack_from("<iiII", buf, pos)
        pos += 16
        matches = []
        if n_m:
            arr = np.frombuffer(buf, dtype="<i4", count=n_m * 2,
                                offset=pos).reshape(n_m, 2)
            pos += n_m * 8
            dist = np.frombuffer(buf, dtype="<f8", count=n_m, offset=pos)
            pos += n_m * 8
            matches = [Match(int(arr[k, 0]), int(arr[k, 1]), float(dist[k]))
                       for k in range(n_m)]
        (n_in,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        inliers = []
        if n_in:
            inliers = [int(v) for v in
                       np.frombuffer(buf, dtype="<i4", count=n_in, offset=pos)]
            pos += n_in * 4
        (has_f,) = struct.unpack_from("<B", buf, pos)
        pos += 1
        F = None
        if has_f:
            F = np.frombuffer(buf, dtype="<f8", count=9,
                              offset=pos).reshape(3, 3).copy()
            pos += 72
        out[(i, j)] = PairResult(matches, inliers, F, n_ratio)
    return out


# --- state summary (the JSON the export/report stages consume) ---

def state_summary(state: ReconstructionState) -> dict:
    """JSON-serializable snapshot carrying everything export/report need."""
    images = [{"index": i, "name": state.image_names.get(i, f"{i:05d}"),
               "keypoints": len(state.keypoints.get(i, []))}
              for i in sorted(state.keypoints)]
    poses = []
    for img in sorted(state.registered):
        pose = state.poses[img]
        before, after = state.per_view_errors.get(img, (float("nan"),) * 2)
        poses.append({
            "index": img,
            "name": state.image_names.get(img, f"{img:05d}"),
            "rotation": [float(v) for v in pose.R.ravel()],
            "translation": [float(v) for v in pose.t],
            "center": [float(v) for v in pose.center],
            "mean_reproj_px": float(after),
        })
    pairs = [{"i": i, "j": j, "putative": pr.n_putative,
              "inliers": pr.n_inliers}
             for (i, j), pr in sorted(state.pairwise.items())]
    errors = [{"index": img,
               "name": state.image_names.get(img, f"{img:05d}"),
               "before_px": float(state.per_view_errors[img][0]),
               "after_px": float(state.per_view_errors[img][1])}
              for img in sorted(state.per_view_errors)]
    points = [{"xyz": [float(v) for v in t.point3d],
               "intensity": float(t.intensity),
               "n_obs": len(t.observations)}
              for t in state.tracks if t.status == STATUS_TRIANGULATED]
    return {"intrinsics": {"fx": state.intrinsics.fx, "fy": state.intrinsics.fy,
                           "cx": state.intrinsics.cx, "cy": state.intrinsics.cy,
                           "skew": state.intrinsics.skew},
            "images": images, "registered": sorted(state.registered),
            "failed": sorted(state.failed), "poses": poses, "pairs": pairs,
            "per_view_errors": errors, "points": points}


def save_state(summary: dict, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=1)
        fh.write("\n")


def load_state(path: str) -> dict:
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)


# --- final artifacts ---

def write_ply(points, path: str) -> None:
    """ASCII PLY point cloud; ``points`` iterates (xyz, intensity in [0,1])."""
    points = list(points)
    if not points:
        raise EmptyCloudError("no triangulated points to export")
    try:
        with open(path, "w", encoding="ascii") as fh:
            fh.write("ply\n")
            fh.write("format ascii 1.0\n")
            fh.write(f"element vertex {len(points)}\n")
            fh.write("property float x\n")
            fh.write("property float y\n")
            fh.write("property float z\n")
            fh.write("property uchar red\n")
            fh.write("property uchar green\n")
            fh.write("property uchar blue\n")
            fh.write("end_header\n")
            for xyz, intensity in points:
                g = min(max(int(intensity * 255), 0), 255)
                fh.write(f"{xyz[0]:.9g} {xyz[1]:.9g} {xyz[2]:.9g} "
                         f"{g} {g} {g}\n")
    except OSError as exc:
        raise OutputError(f"cannot write {path}: {exc}") from exc


def export_ply(tracks_or_points, path: str) -> None:
    """PLY export from Track objects (triangulated only) or a state summary
    points list."""
    pts = []
    for t in tracks_or_points:
        if isinstance(t, Track):
            if t.status == STATUS_TRIANGULATED:
                pts.append((t.point3d, t.intensity))
        else:
            pts.append((t["xyz"], t["intensity"]))
    write_ply(pts, path)


def export_poses(pose_records, path: str) -> None:
    """Pose records (from ``state_summary``) sorted by image name."""
    records = sorted(pose_records, key=lambda r: r["name"])
    try:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(records, fh, indent=1)
            fh.write("\n")
    except OSError as exc:
        raise OutputError(f"cannot write {path}: {exc}") from exc


def export_report(summary: dict, out_dir: str) -> list[str]:
    """The three diagnostics CSVs: keypoint counts, per-pair match counts,
    and per-view reprojection error before/after the final bundle adjustment."""
    os.makedirs(out_dir, exist_ok=True)
    paths = []
    p = os.path.join(out_dir, "keypoints_per_image.csv")
    with open(p, "w", encoding="ascii") as fh:
        fh.write("image,count\n")
        for rec in summary["images"]:
            fh.write(f"{rec['name']},{rec['keypoints']}\n")
    paths.append(p)
    p = os.path.join(out_dir, "matches.csv")
    with open(p, "w", encoding="ascii") as fh:
        fh.write("i,j,putative,inliers\n")
        for rec in summary["pairs"]:
            fh.write(f"{rec['i']},{rec['j']},{rec['putative']},"
                     f"{rec['inliers']}\n")
    paths.append(p)
    p = os.path.join(out_dir, "reproj_error.csv")
    with open(p, "w", encoding="ascii") as fh:
        fh.write("image,before_px,after_px\n")
        for rec in sorted(summary["per_view_errors"], key=lambda r: r["name"]):
            fh.write(f"{rec['name']},{rec['before_px']:.6f},"
                     f"{rec['after_px']:.6f}\n")
    paths.append(p)
    return paths


def parse_ply(path: str):
    """Minimal reference PLY reader used to round-trip exported clouds."""
    with open(path, "r", encoding="ascii") as fh:
        line = fh.readline().strip()
        if line != "ply":
            raise CorruptFileError(f"{path}: not a PLY file")
        n_vertex = None
        props = []
        while True:
            line = fh.readline()
            if not line:
                raise CorruptFileError(f"{path}: unterminated header")
            line = line.strip()
            if line == "end_header":
                break
            parts = line.split()
            if parts[0] == "format" and parts[1] != "ascii":
                raise CorruptFileError(f"{path}: not ASCII PLY")
            if parts[0] == "element" and parts[1] == "vertex":
                n_vertex = int(parts[2])
            if parts[0] == "property":
                props.append(parts[2])
        if n_vertex is None:
            raise CorruptFileError(f"{path}: no vertex element")
        verts = []
        for _ in range(n_vertex):
            parts = fh.readline().split()
            if len(parts) != len(props):
                raise CorruptFileError(f"{path}: bad vertex row")
            verts.append([float(v) for v in parts])
    return props, np.array(verts) if verts else np.zeros((0, len(props)))
