"""Deterministic synthetic scenes.

A scene is a set of static yawed boxes standing on the ground plane ``z = 0``
and an ego vehicle driving along world +x. Every random draw comes from
:class:`~sparsebev.rng.SplitMix64` streams keyed by ``(seed, purpose, frame)``,
so frames can be rendered in any order with identical results.

Sensors are first-hit ray casters: LiDAR rays are drawn uniformly in azimuth
and elevation (so hits per object fall off as ``1/r^2``), and oracle camera
features cast one ray through every feature-pixel center.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .geometry import CameraModel, DepthBins, RigidTransform, Vec3, default_camera_rig, ego_to_camera
from .head import N_REG, Box3D, HeadWeights
from .encoder import ConvKernel2D, ConvLayer, EncoderConfig
from .lidar import PointCloud
from .rng import SplitMix64, derive_seed
from .temporal import FramePose
from .view_transformer import Box2D, ImageFeatures

SCENE_VERSION = 1
GROUND = -1
MISS = -2
OBJECT_INTENSITY = 0.9
GROUND_INTENSITY = 0.2


class PlacementError(RuntimeError):
    pass


@dataclass(frozen=True)
class ObjectClass:
    name: str
    length: tuple[float, float]
    width: tuple[float, float]
    height: tuple[float, float]

    @property
    def max_half_diagonal(self) -> float:
        return 0.5 * math.hypot(self.length[1], self.width[1])


DEFAULT_CLASSES = (
    ObjectClass("pedestrian", (0.6, 0.9), (0.6, 0.9), (1.5, 1.9)),
    ObjectClass("cyclist", (1.5, 1.9), (0.6, 0.9), (1.4, 1.8)),
    ObjectClass("small_vehicle", (2.2, 2.6), (1.4, 1.7), (1.4, 1.6)),
)


@dataclass(frozen=True)
class LidarConfig:
    n_rays: int = 40000
    elevation_deg: tuple[float, float] = (-25.0, 10.0)
    max_range: float = 120.0
    noise_sigma: float = 0.0
    dropout_exponent: float = 0.0  # keep probability min(1, (ref_range / r) ** e)
    ref_range: float = 10.0
    height: float = 1.8


@dataclass(frozen=True)
class SceneConfig:
    range_m: float = 200.0
    n_objects: int = 20
    classes: tuple = DEFAULT_CLASSES
    lidar: LidarConfig = LidarConfig()
    cameras: Optional[tuple] = None  # None -> default six-camera rig
    n_frames: int = 1
    ego_speed: float = 10.0
    dt: float = 0.1
    seed: int = 0
    min_separation_m: float = 8.0
    min_ego_distance_m: float = 4.0
    spawn_fraction: float = 0.9
    occlusion_free: bool = False
    max_attempts: int = 20000

    def __post_init__(self):
        if not self.range_m > 0:
            raise ValueError("range_m must be positive")
        if self.n_objects < 0:
            raise ValueError("n_objects must be >= 0")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must be an unsigned 64-bit integer")
        if self.n_frames < 1:
            raise ValueError("n_frames must be >= 1")

    @property
    def n_classes(self) -> int:
        return len(self.classes)

    def camera_rig(self) -> list[CameraModel]:
        return list(self.cameras) if self.cameras is not None else default_camera_rig()

    def to_dict(self) -> dict:
        return {
            "range_m": self.range_m, "n_objects": self.n_objects,
            "classes": [{"name": c.name, "length": list(c.length), "width": list(c.width),
                         "height": list(c.height)} for c in self.classes],
            "lidar": {k: list(v) if isinstance(v, tuple) else v for k, v in self.lidar.__dict__.items()},
            "cameras": [c.to_dict() for c in self.camera_rig()],
            "n_frames": self.n_frames, "ego_speed": self.ego_speed, "dt": self.dt, "seed": self.seed,
            "min_separation_m": self.min_separation_m, "min_ego_distance_m": self.min_ego_distance_m,
            "spawn_fraction": self.spawn_fraction, "occlusion_free": self.occlusion_free,
            "max_attempts": self.max_attempts,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SceneConfig":
        d = dict(d)
        if "classes" in d:
            d["classes"] = tuple(ObjectClass(c["name"], tuple(c["length"]), tuple(c["width"]),
                                             tuple(c["height"])) for c in d["classes"])
        if "lidar" in d:
            lid = {k: tuple(v) if isinstance(v, list) else v for k, v in d["lidar"].items()}
            d["lidar"] = LidarConfig(**lid)
        if d.get("cameras") is not None:
            d["cameras"] = tuple(CameraModel.from_dict(c) for c in d["cameras"])
        return cls(**d)


@dataclass
class SceneFrame:
    timestamp: float
    ego_to_world: RigidTransform
    boxes: list  # Box3D in the ego frame of this frame

    @property
    def pose(self) -> FramePose:
        return FramePose(self.timestamp, self.ego_to_world)


@dataclass
class Scene:
    config: SceneConfig
    world_boxes: list
    frames: list

    def to_dict(self) -> dict:
        return {
            "version": SCENE_VERSION,
            "config": self.config.to_dict(),
            "objects": [b.to_dict() for b in self.world_boxes],
            "frames": [{"timestamp": f.timestamp, "ego_to_world": f.ego_to_world.to_dict(),
                        "boxes": [b.to_dict() for b in f.boxes]} for f in self.frames],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def lock(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()

    def save(self, directory) -> Path:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        (d / "scene.json").write_text(self.to_json())
        (d / "scene.lock").write_text(self.lock() + "\n")
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Scene":
        frames = [SceneFrame(f["timestamp"], RigidTransform.from_dict(f["ego_to_world"]),
                             [Box3D.from_dict(b) for b in f["boxes"]]) for f in d["frames"]]
        return cls(SceneConfig.from_dict(d["config"]), [Box3D.from_dict(b) for b in d["objects"]], frames)

    @classmethod
    def load(cls, directory) -> "Scene":
        return cls.from_dict(json.loads((Path(directory) / "scene.json").read_text()))

    def class_of(self, track_id: int) -> int:
        return self.world_boxes[track_id].cls


# ---------------------------------------------------------------------------
# generation


def _azimuth_interval(box: Box3D) -> tuple[float, float]:
    """Angular extent of the footprint seen from the origin, as ``(center, half_width)``."""
    c = box.corners()[:4, :2]
    a0 = math.atan2(box.center[1], box.center[0])
    rel = np.angle(np.exp(1j * (np.arctan2(c[:, 1], c[:, 0]) - a0)))
    return a0 + 0.5 * (rel.max() + rel.min()), 0.5 * (rel.max() - rel.min())


def _azimuth_overlap(a: tuple[float, float], b: tuple[float, float], margin: float) -> bool:
    gap = abs(math.remainder(a[0] - b[0], 2 * math.pi))
    return gap < a[1] + b[1] + margin


def generate_scene(cfg: SceneConfig) -> Scene:
    rng = SplitMix64(derive_seed(cfg.seed, "scene"))
    boxes: list[Box3D] = []
    intervals = []
    attempts = 0
    margin = math.radians(1.0)
    while len(boxes) < cfg.n_objects:
        attempts += 1
        if attempts > cfg.max_attempts:
            raise PlacementError(f"placed {len(boxes)} of {cfg.n_objects} objects in {cfg.max_attempts} attempts")
        cls_id = rng.integers(0, cfg.n_classes)
        oc = cfg.classes[cls_id]
        l, w, h = (rng.uniform(*oc.length), rng.uniform(*oc.width), rng.uniform(*oc.height))
        yaw = rng.uniform(-math.pi, math.pi)
        half = 0.5 * math.hypot(l, w)
        extent = cfg.spawn_fraction * cfg.range_m - half
        if extent <= 0:
            raise PlacementError("range too small for the object classes")
        x, y = rng.uniform(-extent, extent), rng.uniform(-extent, extent)
        if math.hypot(x, y) < cfg.min_ego_distance_m + half:
            continue
        cand = Box3D(Vec3(x, y, h / 2), l, w, h, yaw, int(cls_id), len(boxes))
        ok = True
        for b in boxes:
            need = max(cfg.min_separation_m, half + 0.5 * math.hypot(b.l, b.w))
            if math.hypot(b.center[0] - x, b.center[1] - y) < need:
                ok = False
                break
        if not ok:
            continue
        if cfg.occlusion_free:
            iv = _azimuth_interval(cand)
            if any(_azimuth_overlap(iv, o, margin) for o in intervals):
                continue
            intervals.append(iv)
        boxes.append(cand)

    frames = []
    for f in range(cfg.n_frames):
        pose = RigidTransform.from_yaw(0.0, (cfg.ego_speed * cfg.dt * f, 0.0, 0.0))
        ego_boxes = []
        for b in boxes:
            c = pose.apply_inverse(np.array(b.center))
            ego_boxes.append(replace(b, center=Vec3(*map(float, c)), yaw=b.yaw - pose.yaw))
        frames.append(SceneFrame(round(cfg.dt * f, 9), pose, ego_boxes))
    return Scene(cfg, boxes, frames)


# ---------------------------------------------------------------------------
# ray casting


def cast_rays(origins: np.ndarray, dirs: np.ndarray, boxes: Sequence[Box3D],
              max_t: float = np.inf, ground: bool = True) -> tuple[np.ndarray, np.ndarray]:
    """First hit along each ray. Returns ``(t, label)``; label is a track id,
    ``GROUND`` or ``MISS`` (``t = inf``)."""
    o = np.broadcast_to(np.asarray(origins, dtype=np.float64), np.shape(dirs))
    d = np.asarray(dirs, dtype=np.float64)
    n = len(d)
    t_best = np.full(n, np.inf)
    label = np.full(n, MISS, dtype=np.int64)
    if ground:
        with np.errstate(divide="ignore", invalid="ignore"):
            tg = np.where(d[:, 2] < 0, -o[:, 2] / d[:, 2], np.inf)
        hit = (tg > 0) & (tg < t_best)
        t_best[hit], label[hit] = tg[hit], GROUND
    for b in boxes:
        c, s = math.cos(b.yaw), math.sin(b.yaw)
        rel = o - np.asarray(b.center)
        # rotate into the box frame
        p = np.stack([c * rel[:, 0] + s * rel[:, 1], -s * rel[:, 0] + c * rel[:, 1], rel[:, 2]], axis=1)
        q = np.stack([c * d[:, 0] + s * d[:, 1], -s * d[:, 0] + c * d[:, 1], d[:, 2]], axis=1)
        half = np.array([b.l, b.w, b.h]) / 2
        with np.errstate(divide="ignore", invalid="ignore"):
            t1 = (-half - p) / q
            t2 = (half - p) / q
        tnear = np.nanmax(np.minimum(t1, t2), axis=1)
        tfar = np.nanmin(np.maximum(t1, t2), axis=1)
        hit = (tnear <= tfar) & (tnear > 0) & (tnear < t_best)
        t_best[hit], label[hit] = tnear[hit], b.track_id
    miss = t_best > max_t
    t_best[miss], label[miss] = np.inf, MISS
    return t_best, label


def render_lidar(scene: Scene, frame: int) -> PointCloud:
    cfg = scene.config.lidar
    rng = SplitMix64(derive_seed(scene.config.seed, "lidar", frame))
    n = cfg.n_rays
    az = rng.uniform(0.0, 2 * math.pi, n)
    el = np.radians(rng.uniform(cfg.elevation_deg[0], cfg.elevation_deg[1], n))
    noise = rng.normal(n) * cfg.noise_sigma
    keep_u = rng.uniform(size=n)
    dirs = np.stack([np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)], axis=1)
    origin = np.array([0.0, 0.0, cfg.height])
    t, lab = cast_rays(origin, dirs, scene.frames[frame].boxes, cfg.max_range)
    ok = np.isfinite(t)
    if cfg.dropout_exponent:
        with np.errstate(divide="ignore"):
            ok &= keep_u < np.minimum(1.0, (cfg.ref_range / t) ** cfg.dropout_exponent)
    r = t[ok] + noise[ok]
    xyz = origin + r[:, None] * dirs[ok]
    lab = lab[ok]
    inten = np.where(lab >= 0, OBJECT_INTENSITY, GROUND_INTENSITY)
    return PointCloud(xyz, inten, lab)


def _hull_in_camera(box: Box3D, cam: CameraModel, near: float):
    xc, yc, zc = ego_to_camera(box.corners(), cam)
    pts = [(x, y, z) for x, y, z in zip(xc, yc, zc) if z > near]
    edges = [(0, 1), (1, 2), (2, 3), (3, 0), (4, 5), (5, 6), (6, 7), (7, 4), (0, 4), (1, 5), (2, 6), (3, 7)]
    for i, j in edges:
        if (zc[i] > near) != (zc[j] > near):
            a = (near - zc[i]) / (zc[j] - zc[i])
            pts.append((xc[i] + a * (xc[j] - xc[i]), yc[i] + a * (yc[j] - yc[i]), near))
    return np.array(pts)


def render_camera_gt(scene: Scene, frame: int, cam: CameraModel,
                     near: float = 0.1) -> tuple[list[Box2D], list[int]]:
    """Image-clipped 2D hulls of the near-plane-clipped box corners."""
    out, ids = [], []
    for b in scene.frames[frame].boxes:
        pts = _hull_in_camera(b, cam, near)
        if len(pts) == 0:
            continue
        u = cam.fx * pts[:, 0] / pts[:, 2] + cam.cx
        v = cam.fy * pts[:, 1] / pts[:, 2] + cam.cy
        x0, x1 = max(u.min(), 0.0), min(u.max(), float(cam.width))
        y0, y1 = max(v.min(), 0.0), min(v.max(), float(cam.height))
        if x1 <= x0 or y1 <= y0:
            continue
        out.append(Box2D(float(x0), float(y0), float(x1 - x0), float(y1 - y0)))
        ids.append(b.track_id)
    return out, ids


def pixel_rays(cam: CameraModel, stride: int) -> tuple[np.ndarray, np.ndarray]:
    """Ego-frame directions through feature-pixel centers, scaled to unit camera depth."""
    hf, wf = cam.feature_shape(stride)
    py, px = np.meshgrid(np.arange(hf), np.arange(wf), indexing="ij")
    xc = ((px + 0.5) * stride - cam.cx) / cam.fx
    yc = ((py + 0.5) * stride - cam.cy) / cam.fy
    R = cam.cam_to_ego.rotation
    dirs = np.stack([xc, yc, np.ones_like(xc)], axis=-1).reshape(-1, 3) @ R.T
    return cam.position.copy(), dirs


def analytic_depth_map(scene: Scene, frame: int, cam: CameraModel, stride: int,
                       max_depth: float = np.inf) -> tuple[np.ndarray, np.ndarray]:
    """Camera depth and hit label at every feature-pixel center, shape ``(hf, wf)``."""
    hf, wf = cam.feature_shape(stride)
    o, d = pixel_rays(cam, stride)
    t, lab = cast_rays(o, d, scene.frames[frame].boxes, max_depth)
    return t.reshape(hf, wf), lab.reshape(hf, wf)


# ---------------------------------------------------------------------------
# oracle features


@dataclass(frozen=True)
class OracleFeatureConfig:
    n_classes: int = 3
    channels: Optional[int] = None  # defaults to n_classes + 1
    class_strength: float = 1.0
    depth_sharpness: float = 50.0
    noise: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.n_channels < self.n_classes + 1:
            raise ValueError("need at least n_classes + 1 channels")

    @property
    def n_channels(self) -> int:
        return self.channels if self.channels is not None else self.n_classes + 1


def oracle_image_features(scene: Scene, frame: int, cam: CameraModel, ocfg: OracleFeatureConfig,
                          bins: DepthBins, stride: int, cam_index: int = 0) -> tuple[ImageFeatures, np.ndarray]:
    """Surrogate backbone output: ``(features, depth logits)``.

    Object pixels carry ``class_strength`` on their class channel and on the
    objectness channel ``n_classes``; all pixels get uniform noise in
    ``±noise``. Depth logits are ``-sharpness * ((center - depth) / step)^2``
    for pixels that see a surface and zero for sky.
    """
    depth, lab = analytic_depth_map(scene, frame, cam, stride)
    hf, wf = depth.shape
    ctx = np.zeros((hf, wf, ocfg.n_channels))
    fg = lab >= 0
    if fg.any():
        cls = np.array([scene.class_of(t) for t in lab[fg]])
        rows = np.flatnonzero(fg.ravel())
        flat = ctx.reshape(-1, ocfg.n_channels)
        flat[rows, cls] = ocfg.class_strength
        flat[rows, ocfg.n_classes] = ocfg.class_strength
    if ocfg.noise:
        rng = SplitMix64(derive_seed(ocfg.seed, scene.config.seed, "oracle", frame, cam_index))
        ctx += rng.uniform(-ocfg.noise, ocfg.noise, ctx.size).reshape(ctx.shape)
    seen = np.isfinite(depth)
    diff = (bins.centers()[None, None, :] - np.where(seen, depth, 0.0)[..., None]) / bins.step
    logits = np.where(seen[..., None], -ocfg.depth_sharpness * diff**2, 0.0)
    return ImageFeatures(ctx, stride), logits


def oracle_encoder_config(fused_channels: int, ocfg: OracleFeatureConfig, layers: int = 3,
                          k: int = 3) -> EncoderConfig:
    """Box-sum smoothing of the camera channels; LiDAR channels get zero weight.

    Assumes camera channels come first in the fused grid. Regular
    convolutions let the smoothed mass spill into empty neighbours, which
    gives each object a single-peaked response.
    """
    cc = ocfg.n_channels
    out = []
    c_in = fused_channels
    for _ in range(layers):
        w = np.zeros((cc, c_in, k, k))
        w[np.arange(cc), np.arange(cc)] = 1.0
        out.append(ConvLayer(ConvKernel2D(w), "regular", 1, "none"))
        c_in = cc
    # float64 accumulation so dense and sparse runs round to the same float32
    return EncoderConfig(out, accumulate="float64")


def oracle_head_weights(ocfg: OracleFeatureConfig, channels: Optional[int] = None,
                        logit_scale: float = 1e-4, threshold_mass: float = 0.5) -> HeadWeights:
    """Linear head reading the class channels.

    A cell scores above 0.5 for class ``c`` iff its class-``c`` mass exceeds
    ``threshold_mass * class_strength``. The small ``logit_scale`` keeps the
    sigmoid away from saturation so nearby cells keep distinct scores.
    """
    channels = channels or ocfg.n_channels
    sw = np.zeros((ocfg.n_classes, channels))
    sw[np.arange(ocfg.n_classes), np.arange(ocfg.n_classes)] = logit_scale
    sb = np.full(ocfg.n_classes, -logit_scale * threshold_mass * ocfg.class_strength)
    rb = np.array([0.0, 0.0, 0.8, math.log(2.0), math.log(1.0), math.log(1.6), 0.0])
    return HeadWeights(sw, sb, np.zeros((N_REG, channels)), rb)
