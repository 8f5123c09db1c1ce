"""Procedural dynamic-scene generator with an exact ray-cast oracle.

Scenes live in a z-up "scene frame": a finite checkered ground disc, a few
static boxes/spheres, dynamic primitives translating at constant world
velocity, a two-color sky gradient by ray elevation, and a level camera rig
moving at constant velocity with a small yaw rate. Shading is Lambertian
under one fixed directional light, so every channel the oracle emits (RGB,
view-z depth, sky mask, per-pixel 3D flow, dynamic mask) is exact.

Each clip is expressed in its own world frame anchored at the first context
camera; the scene-from-world transform is kept so clips from one scene can be
merged into a common frame.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .geometry import Camera

FORMAT_VERSION = 1
AMBIENT = 0.35
LIGHT_DIR = np.array([0.25, -0.15, 0.955])  # scene frame, toward the light
MAX_SPEED = 5.0  # m/s bound on dynamic primitives


@dataclass
class Primitive:
    kind: str  # "sphere" | "box"
    center: np.ndarray  # (3,) scene frame at t = 0
    size: np.ndarray  # sphere: (radius,); box: (3,) half extents
    albedo: np.ndarray  # (3,) in [0, 1]
    yaw: float = 0.0  # boxes only
    velocity: np.ndarray = field(default_factory=lambda: np.zeros(3))  # m/s

    def center_at(self, t: float) -> np.ndarray:
        return self.center + self.velocity * t

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "center": self.center.tolist(),
            "size": self.size.tolist(),
            "albedo": self.albedo.tolist(),
            "yaw": self.yaw,
            "velocity": self.velocity.tolist(),
        }

    @staticmethod
    def from_dict(d: dict) -> "Primitive":
        return Primitive(
            kind=d["kind"],
            center=np.array(d["center"], dtype=np.float64),
            size=np.array(d["size"], dtype=np.float64),
            albedo=np.array(d["albedo"], dtype=np.float64),
            yaw=float(d["yaw"]),
            velocity=np.array(d["velocity"], dtype=np.float64),
        )


@dataclass
class SceneSpec:
    """Complete deterministic description of one synthetic scene."""

    seed: int
    ground_checker: float  # checker cell size, m
    ground_albedo_a: np.ndarray
    ground_albedo_b: np.ndarray
    ground_radius: float
    statics: list[Primitive]
    dynamics: list[Primitive]
    sky_horizon: np.ndarray
    sky_zenith: np.ndarray
    rig_start: np.ndarray  # (3,) scene frame
    rig_heading: float  # rad about +z
    rig_speed: float  # m/s along initial heading
    rig_yaw_rate: float  # rad/s
    cam_offsets: np.ndarray  # (V,) lateral offsets, m
    cam_height: float
    fx: float
    width: int
    height: int
    clip_length: float
    frames_per_clip: int
    exposure_gain: np.ndarray | None = None  # (V, 3) diagonal gains
    exposure_bias: np.ndarray | None = None  # (V, 3)

    @property
    def num_cameras(self) -> int:
        return len(self.cam_offsets)

    @property
    def frame_interval(self) -> float:
        return self.clip_length / (self.frames_per_clip - 1)

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "ground_checker": self.ground_checker,
            "ground_albedo_a": self.ground_albedo_a.tolist(),
            "ground_albedo_b": self.ground_albedo_b.tolist(),
            "ground_radius": self.ground_radius,
            "statics": [p.to_dict() for p in self.statics],
            "dynamics": [p.to_dict() for p in self.dynamics],
            "sky_horizon": self.sky_horizon.tolist(),
            "sky_zenith": self.sky_zenith.tolist(),
            "rig_start": self.rig_start.tolist(),
            "rig_heading": self.rig_heading,
            "rig_speed": self.rig_speed,
            "rig_yaw_rate": self.rig_yaw_rate,
            "cam_offsets": self.cam_offsets.tolist(),
            "cam_height": self.cam_height,
            "fx": self.fx,
            "width": self.width,
            "height": self.height,
            "clip_length": self.clip_length,
            "frames_per_clip": self.frames_per_clip,
            "exposure_gain": None if self.exposure_gain is None else self.exposure_gain.tolist(),
            "exposure_bias": None if self.exposure_bias is None else self.exposure_bias.tolist(),
        }

    @staticmethod
    def from_dict(d: dict) -> "SceneSpec":
        arr = lambda k: np.array(d[k], dtype=np.float64)
        return SceneSpec(
            seed=d["seed"],
            ground_checker=d["ground_checker"],
            ground_albedo_a=arr("ground_albedo_a"),
            ground_albedo_b=arr("ground_albedo_b"),
            ground_radius=d["ground_radius"],
            statics=[Primitive.from_dict(p) for p in d["statics"]],
            dynamics=[Primitive.from_dict(p) for p in d["dynamics"]],
            sky_horizon=arr("sky_horizon"),
            sky_zenith=arr("sky_zenith"),
            rig_start=arr("rig_start"),
            rig_heading=d["rig_heading"],
            rig_speed=d["rig_speed"],
            rig_yaw_rate=d["rig_yaw_rate"],
            cam_offsets=arr("cam_offsets"),
            cam_height=d["cam_height"],
            fx=d["fx"],
            width=d["width"],
            height=d["height"],
            clip_length=d["clip_length"],
            frames_per_clip=d["frames_per_clip"],
            exposure_gain=None if d.get("exposure_gain") is None else arr("exposure_gain"),
            exposure_bias=None if d.get("exposure_bias") is None else arr("exposure_bias"),
        )

    def hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class FrameBundle:
    """One observation: image, exact depth/masks/flow, camera, timestamp."""

    image: np.ndarray  # (H, W, 3) float32 in [0, 1]
    depth: np.ndarray  # (H, W) float32, view-space z; invalid where sky
    sky_mask: np.ndarray  # (H, W) uint8, 1 = sky
    camera: Camera
    time: float  # seconds from clip start
    flow: np.ndarray | None = None  # (H, W, 3) world-frame displacement over one frame interval
    dynamic_mask: np.ndarray | None = None  # (H, W) uint8


@dataclass
class ClipRecord:
    """Context/target observations for one clip plus ground-truth channels."""

    context: list[list[FrameBundle]]  # [view][ctx index]
    targets: list[list[FrameBundle]]  # [view][tgt index]
    spec: SceneSpec
    start_time: float
    world_from_scene: np.ndarray  # (3, 4): rows of [R | t]

    @property
    def context_times(self) -> np.ndarray:
        return np.array([fb.time for fb in self.context[0]])

    @property
    def target_times(self) -> np.ndarray:
        return np.array([fb.time for fb in self.targets[0]])


# -- rig poses -----------------------------------------------------------------------


def _heading_basis(theta: float) -> tuple[np.ndarray, np.ndarray]:
    forward = np.array([np.cos(theta), np.sin(theta), 0.0])
    right = np.array([np.sin(theta), -np.cos(theta), 0.0])
    return forward, right


def rig_camera_pose_scene(spec: SceneSpec, view: int, t: float) -> tuple[np.ndarray, np.ndarray]:
    """World-from-camera pose of one rig camera in the scene frame at time t."""
    theta = spec.rig_heading + spec.rig_yaw_rate * t
    forward0, _ = _heading_basis(spec.rig_heading)
    forward, right = _heading_basis(theta)
    pos = spec.rig_start + spec.rig_speed * t * forward0
    pos = pos + right * spec.cam_offsets[view] + np.array([0.0, 0.0, spec.cam_height])
    down = np.array([0.0, 0.0, -1.0])
    rot = np.stack([right, down, forward], axis=1)  # columns: camera x, y, z in scene
    return rot, pos


def clip_anchor(spec: SceneSpec, start_time: float) -> np.ndarray:
    """world_from_scene (3, 4) anchored at the first context camera."""
    rot, pos = rig_camera_pose_scene(spec, 0, start_time)
    r_ws = rot.T
    t_ws = -rot.T @ pos
    return np.concatenate([r_ws, t_ws[:, None]], axis=1)


def camera_at(spec: SceneSpec, view: int, t: float, world_from_scene: np.ndarray) -> Camera:
    rot_s, pos_s = rig_camera_pose_scene(spec, view, t)
    r_ws, t_ws = world_from_scene[:, :3], world_from_scene[:, 3]
    return Camera(
        fx=spec.fx,
        fy=spec.fx,
        cx=spec.width / 2,
        cy=spec.height / 2,
        width=spec.width,
        height=spec.height,
        rotation=r_ws @ rot_s,
        translation=r_ws @ pos_s + t_ws,
        camera_index=view,
    )


# -- ray casting ----------------------------------------------------------------------


def _intersect_sphere(o, d, center, radius):
    oc = o - center
    b = (oc * d).sum(-1)
    c = (oc * oc).sum(-1) - radius * radius
    disc = b * b - c
    hit = disc >= 0
    sq = np.sqrt(np.maximum(disc, 0.0))
    t = np.where(hit, -b - sq, np.inf)
    t = np.where(t > 1e-6, t, np.where(hit & (-b + sq > 1e-6), -b + sq, np.inf))
    t_safe = np.where(np.isfinite(t), t, 1.0)
    normal = (o + t_safe[..., None] * d) - center
    return t, normal


def _intersect_box(o, d, center, half, yaw):
    cz, sz = np.cos(yaw), np.sin(yaw)
    rot = np.array([[cz, sz, 0.0], [-sz, cz, 0.0], [0.0, 0.0, 1.0]])  # scene -> box
    ob = (o - center) @ rot.T
    db = d @ rot.T
    safe = np.where(np.abs(db) < 1e-12, 1e-12, db)
    t1 = (-half - ob) / safe
    t2 = (half - ob) / safe
    tmin = np.minimum(t1, t2)
    tmax = np.maximum(t1, t2)
    t_enter = tmin.max(-1)
    t_exit = tmax.min(-1)
    hit = (t_enter <= t_exit) & (t_exit > 1e-6)
    t = np.where(hit & (t_enter > 1e-6), t_enter, np.inf)
    axis = tmin.argmax(-1)
    sign = -np.sign(np.take_along_axis(db, axis[..., None], -1)[..., 0])
    normal_box = np.zeros(o.shape)
    np.put_along_axis(normal_box, axis[..., None], sign[..., None], -1)
    return t, normal_box @ rot


def _scene_rays(camera: Camera, world_from_scene: np.ndarray):
    """Unit rays of a camera expressed in the scene frame, plus view-z cosines."""
    h, w = camera.height, camera.width
    j = np.arange(w) + 0.5
    i = np.arange(h) + 0.5
    x = (j[None, :] - camera.cx) / camera.fx
    y = (i[:, None] - camera.cy) / camera.fy
    d_cam = np.stack([np.broadcast_to(x, (h, w)), np.broadcast_to(y, (h, w)), np.ones((h, w))], -1)
    norm = np.linalg.norm(d_cam, axis=-1, keepdims=True)
    d_cam_unit = d_cam / norm
    r_ws, t_ws = world_from_scene[:, :3], world_from_scene[:, 3]
    rot_cam_scene = r_ws.T @ camera.rotation  # scene-from-camera rotation
    origin_scene = r_ws.T @ (camera.translation - t_ws)
    d_scene = d_cam_unit @ rot_cam_scene.T
    cosz = d_cam_unit[..., 2]
    return origin_scene, d_scene, cosz


def render_oracle(
    spec: SceneSpec, camera: Camera, time: float, world_from_scene: np.ndarray
) -> FrameBundle:
    """Exact render of the scene through ``camera`` at ``time`` (seconds)."""
    h, w = spec.height, spec.width
    origin, dirs, cosz = _scene_rays(camera, world_from_scene)
    o = np.broadcast_to(origin, dirs.shape)

    best_t = np.full((h, w), np.inf)
    best_albedo = np.zeros((h, w, 3))
    best_normal = np.zeros((h, w, 3))
    best_vel = np.zeros((h, w, 3))
    best_dyn = np.zeros((h, w), dtype=bool)

    def consider(t, normal, albedo, velocity, dynamic):
        nonlocal best_t, best_albedo, best_normal, best_vel, best_dyn
        closer = t < best_t
        best_t = np.where(closer, t, best_t)
        best_albedo = np.where(closer[..., None], albedo, best_albedo)
        nn = normal / np.maximum(np.linalg.norm(normal, axis=-1, keepdims=True), 1e-12)
        best_normal = np.where(closer[..., None], nn, best_normal)
        best_vel = np.where(closer[..., None], velocity, best_vel)
        best_dyn = np.where(closer, dynamic, best_dyn)

    # ground disc at z = 0 with checker albedo
    dz = dirs[..., 2]
    t_plane = np.where(np.abs(dz) > 1e-12, -o[..., 2] / np.where(np.abs(dz) > 1e-12, dz, 1.0), np.inf)
    t_safe = np.where(np.isfinite(t_plane) & (t_plane > 0), t_plane, 1.0)
    hit_pt = o + t_safe[..., None] * dirs
    inside = (t_plane > 1e-6) & np.isfinite(t_plane) & (np.linalg.norm(hit_pt[..., :2], axis=-1) <= spec.ground_radius)
    t_plane = np.where(inside, t_plane, np.inf)
    parity = (np.floor(hit_pt[..., 0] / spec.ground_checker) + np.floor(hit_pt[..., 1] / spec.ground_checker)) % 2
    ground_albedo = np.where(parity[..., None] == 0, spec.ground_albedo_a, spec.ground_albedo_b)
    consider(t_plane, np.broadcast_to([0.0, 0.0, 1.0], dirs.shape), ground_albedo, np.zeros(3), False)

    for prim in spec.statics + spec.dynamics:
        center = prim.center_at(time)
        if prim.kind == "sphere":
            t, normal = _intersect_sphere(o, dirs, center, prim.size[0])
        else:
            t, normal = _intersect_box(o, dirs, center, prim.size, prim.yaw)
        dynamic = bool(np.linalg.norm(prim.velocity) > 0)
        consider(t, normal, np.broadcast_to(prim.albedo, dirs.shape), prim.velocity, dynamic)

    sky = ~np.isfinite(best_t)
    light = LIGHT_DIR / np.linalg.norm(LIGHT_DIR)
    lambert = AMBIENT + (1 - AMBIENT) * np.maximum((best_normal * light).sum(-1), 0.0)
    elev = np.clip(dirs[..., 2], 0.0, 1.0)
    sky_rgb = spec.sky_horizon + (spec.sky_zenith - spec.sky_horizon) * elev[..., None]
    rgb = np.where(sky[..., None], sky_rgb, best_albedo * lambert[..., None])

    if spec.exposure_gain is not None:
        v = camera.camera_index
        rgb = rgb * spec.exposure_gain[v] + spec.exposure_bias[v]

    depth = np.where(sky, 0.0, best_t * cosz).astype(np.float32)
    flow_scene = best_vel * spec.frame_interval
    flow_world = flow_scene @ world_from_scene[:, :3].T  # rotation only
    flow_world = np.where(sky[..., None], 0.0, flow_world).astype(np.float32)
    return FrameBundle(
        image=rgb.astype(np.float32),
        depth=depth,
        sky_mask=sky.astype(np.uint8),
        camera=camera,
        time=time,
        flow=flow_world,
        dynamic_mask=(best_dyn & ~sky).astype(np.uint8),
    )


# -- scene generation --------------------------------------------------------------------


@dataclass
class GeneratorConfig:
    width: int = 48
    height: int = 32
    num_cameras: int = 2
    fov_deg: float = 62.0
    clip_length: float = 2.0
    frames_per_clip: int = 9
    n_static: tuple[int, int] = (2, 4)
    n_dynamic: tuple[int, int] = (1, 2)
    speed_range: tuple[float, float] = (0.6, 2.2)
    dyn_radius_range: tuple[float, float] = (0.5, 1.0)
    dyn_dist_range: tuple[float, float] = (5.0, 12.0)
    rig_speed_range: tuple[float, float] = (0.0, 1.0)
    rig_yaw_rate_range: tuple[float, float] = (-0.06, 0.06)
    exposure: bool = False
    static_only: bool = False
    sky_min_fraction: float = 0.05
    max_attempts: int = 40

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in self.__dict__.items()}

    @staticmethod
    def from_dict(d: dict) -> "GeneratorConfig":
        cfg = GeneratorConfig()
        for k, v in d.items():
            want = getattr(cfg, k)
            setattr(cfg, k, tuple(v) if isinstance(want, tuple) else v)
        return cfg


def _attempt_scene(seed: int, attempt: int, cfg: GeneratorConfig) -> SceneSpec:
    rng = np.random.default_rng(np.random.SeedSequence([seed, attempt]))
    palette = rng.uniform(0.15, 0.95, size=(12, 3))
    fx = cfg.width / (2 * np.tan(np.deg2rad(cfg.fov_deg) / 2))

    statics = []
    for _ in range(rng.integers(cfg.n_static[0], cfg.n_static[1] + 1)):
        kind = "sphere" if rng.random() < 0.5 else "box"
        dist = rng.uniform(4.0, 16.0)
        lateral = rng.uniform(-5.0, 5.0)
        if kind == "sphere":
            r = rng.uniform(0.4, 1.1)
            center = np.array([dist, lateral, r])
            size = np.array([r])
        else:
            half = rng.uniform(0.3, 1.0, 3)
            center = np.array([dist, lateral, half[2]])
            size = half
        statics.append(Primitive(kind, center, size, palette[rng.integers(len(palette))], float(rng.uniform(0, np.pi))))

    dynamics = []
    if not cfg.static_only:
        for _ in range(rng.integers(cfg.n_dynamic[0], cfg.n_dynamic[1] + 1)):
            kind = "sphere" if rng.random() < 0.6 else "box"
            dist = rng.uniform(*cfg.dyn_dist_range)
            lateral = rng.uniform(-4.0, 4.0)
            speed = min(rng.uniform(*cfg.speed_range), MAX_SPEED)
            ang = rng.uniform(0, 2 * np.pi)
            vel = np.array([np.cos(ang), np.sin(ang), 0.0]) * speed
            if kind == "sphere":
                r = rng.uniform(*cfg.dyn_radius_range)
                center = np.array([dist, lateral, r + rng.uniform(0.0, 0.6)])
                size = np.array([r])
            else:
                half = rng.uniform(cfg.dyn_radius_range[0] * 0.6, cfg.dyn_radius_range[1] * 0.8, 3)
                center = np.array([dist, lateral, half[2]])
                size = half
            dynamics.append(
                Primitive(kind, center, size, palette[rng.integers(len(palette))], float(rng.uniform(0, np.pi)), vel)
            )

    sky_pair = np.sort(rng.uniform(0.35, 0.95, size=(2, 3)), axis=0)
    return SceneSpec(
        seed=seed,
        ground_checker=float(rng.uniform(1.5, 3.0)),
        ground_albedo_a=palette[rng.integers(len(palette))],
        ground_albedo_b=palette[rng.integers(len(palette))] * 0.45,
        ground_radius=45.0,
        statics=statics,
        dynamics=dynamics,
        sky_horizon=sky_pair[0],
        sky_zenith=sky_pair[1],
        rig_start=np.array([rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0), 0.0]),
        rig_heading=float(rng.uniform(-0.3, 0.3)),
        rig_speed=float(rng.uniform(*cfg.rig_speed_range)),
        rig_yaw_rate=float(rng.uniform(*cfg.rig_yaw_rate_range)),
        cam_offsets=np.linspace(-0.2, 0.2, cfg.num_cameras) if cfg.num_cameras > 1 else np.zeros(1),
        cam_height=1.4,
        fx=float(fx),
        width=cfg.width,
        height=cfg.height,
        clip_length=cfg.clip_length,
        frames_per_clip=cfg.frames_per_clip,
        exposure_gain=rng.uniform(0.8, 1.2, (cfg.num_cameras, 3)) if cfg.exposure else None,
        exposure_bias=rng.uniform(-0.05, 0.05, (cfg.num_cameras, 3)) if cfg.exposure else None,
    )


def _scene_ok(spec: SceneSpec, cfg: GeneratorConfig) -> bool:
    anchor = clip_anchor(spec, 0.0)
    for t in (0.0, spec.clip_length):
        for v in range(spec.num_cameras):
            cam = camera_at(spec, v, t, anchor)
            fb = render_oracle(spec, cam, t, anchor)
            if fb.sky_mask.mean() < cfg.sky_min_fraction:
                return False
    # dynamic primitives must keep clear of every camera over the clip
    for prim in spec.dynamics:
        margin = float(prim.size.max()) + 0.5
        for t in np.linspace(0, spec.clip_length, spec.frames_per_clip):
            c = prim.center_at(t)
            for v in range(spec.num_cameras):
                _, pos = rig_camera_pose_scene(spec, v, t)
                if np.linalg.norm(c - pos) < margin:
                    return False
    return True


def generate_scene(seed: int, cfg: GeneratorConfig | None = None) -> SceneSpec:
    """Deterministic scene from a seed; retries layouts that violate constraints."""
    cfg = cfg or GeneratorConfig()
    for attempt in range(cfg.max_attempts):
        spec = _attempt_scene(seed, attempt, cfg)
        if _scene_ok(spec, cfg):
            return spec
    raise RuntimeError(f"could not generate a valid scene for seed {seed} after {cfg.max_attempts} attempts")


# -- clips ----------------------------------------------------------------------------------


def context_times_for(spec: SceneSpec, start_time: float, n_context: int = 4) -> np.ndarray:
    """Evenly spaced context timesteps over the first 3/4 of the clip."""
    span = 0.75 * spec.clip_length
    if n_context == 1:
        return np.array([start_time])
    return start_time + np.linspace(0.0, span, n_context)


def make_clip(spec: SceneSpec, start_time: float = 0.0, n_context: int = 4) -> ClipRecord:
    """Context frames at the standard spacing plus all remaining grid frames as targets."""
    grid = start_time + np.linspace(0.0, spec.clip_length, spec.frames_per_clip)
    ctx_times = context_times_for(spec, start_time, n_context)
    tgt_times = np.array([t for t in grid if not np.any(np.abs(ctx_times - t) < 1e-9)])
    anchor = clip_anchor(spec, start_time)

    def frames(times):
        per_view = []
        for v in range(spec.num_cameras):
            per_view.append([render_oracle(spec, camera_at(spec, v, t, anchor), t, anchor) for t in times])
        return per_view

    return ClipRecord(
        context=frames(ctx_times),
        targets=frames(tgt_times),
        spec=spec,
        start_time=start_time,
        world_from_scene=anchor,
    )


# -- binary tensor container ------------------------------------------------------------------

_MAGIC = b"DSTN"
_DTYPES = {0: "<f4", 1: "<f8", 2: "|u1", 3: "<i8"}
_DTYPE_CODES = {np.dtype(v): k for k, v in _DTYPES.items()}


def write_tensors(path, tensors: dict[str, np.ndarray]) -> None:
    """Shape-prefixed little-endian tensor container; round-trips bit-exactly."""
    with open(path, "wb") as fh:
        fh.write(_MAGIC + struct.pack("<II", FORMAT_VERSION, len(tensors)))
        for name, arr in tensors.items():
            arr = np.ascontiguousarray(arr)
            code = _DTYPE_CODES.get(arr.dtype.newbyteorder("<") if arr.dtype.byteorder == ">" else arr.dtype)
            if code is None:
                raise ValueError(f"unsupported dtype {arr.dtype} for tensor {name!r}")
            nm = name.encode()
            fh.write(struct.pack("<H", len(nm)) + nm)
            fh.write(struct.pack("<BB", code, arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}q", *arr.shape))
            fh.write(arr.astype(_DTYPES[code]).tobytes())


def read_tensors(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != _MAGIC:
        raise ValueError(f"{path}: not a tensor container")
    version, count = struct.unpack("<II", blob[4:12])
    if version != FORMAT_VERSION:
        raise ValueError(f"{path}: format version {version}, expected {FORMAT_VERSION}")
    pos = 12
    out: dict[str, np.ndarray] = {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack("<H", blob[pos : pos + 2])
            pos += 2
            name = blob[pos : pos + nlen].decode()
            pos += nlen
            code, ndim = struct.unpack("<BB", blob[pos : pos + 2])
            pos += 2
            shape = struct.unpack(f"<{ndim}q", blob[pos : pos + 8 * ndim])
            pos += 8 * ndim
            dt = np.dtype(_DTYPES[code])
            nbytes = int(np.prod(shape)) * dt.itemsize
            if pos + nbytes > len(blob):
                raise ValueError("truncated tensor payload")
            out[name] = np.frombuffer(blob[pos : pos + nbytes], dtype=dt).reshape(shape).copy()
            pos += nbytes
    except (struct.error, ValueError) as exc:
        raise ValueError(f"{path}: corrupted tensor container ({exc})") from None
    return out


# -- clip (de)serialization ---------------------------------------------------------------------


def _bundle_block(frames: list[list[FrameBundle]], prefix: str) -> dict[str, np.ndarray]:
    block: dict[str, np.ndarray] = {}
    block[f"{prefix}_image"] = np.stack([[fb.image for fb in row] for row in frames]).astype(np.float32)
    block[f"{prefix}_depth"] = np.stack([[fb.depth for fb in row] for row in frames]).astype(np.float32)
    block[f"{prefix}_sky"] = np.stack([[fb.sky_mask for fb in row] for row in frames]).astype(np.uint8)
    block[f"{prefix}_flow"] = np.stack([[fb.flow for fb in row] for row in frames]).astype(np.float32)
    block[f"{prefix}_dyn"] = np.stack([[fb.dynamic_mask for fb in row] for row in frames]).astype(np.uint8)
    block[f"{prefix}_times"] = np.array([fb.time for fb in frames[0]], dtype=np.float64)
    block[f"{prefix}_pose"] = np.stack(
        [[np.concatenate([fb.camera.rotation, fb.camera.translation[:, None]], 1) for fb in row] for row in frames]
    ).astype(np.float64)
    return block


def clip_to_tensors(clip: ClipRecord) -> dict[str, np.ndarray]:
    spec = clip.spec
    out = {}
    out.update(_bundle_block(clip.context, "ctx"))
    out.update(_bundle_block(clip.targets, "tgt"))
    out["intrinsics"] = np.array([spec.fx, spec.fx, spec.width / 2, spec.height / 2, spec.width, spec.height])
    out["world_from_scene"] = clip.world_from_scene.astype(np.float64)
    out["start_time"] = np.array([clip.start_time], dtype=np.float64)
    return out


def _bundles_from(block: dict[str, np.ndarray], prefix: str, spec: SceneSpec) -> list[list[FrameBundle]]:
    images = block[f"{prefix}_image"]
    views, times = images.shape[0], images.shape[1]
    fx, fy, cx, cy, w, h = block["intrinsics"]
    rows = []
    for v in range(views):
        row = []
        for t in range(times):
            pose = block[f"{prefix}_pose"][v, t]
            cam = Camera(
                fx=float(fx), fy=float(fy), cx=float(cx), cy=float(cy), width=int(w), height=int(h),
                rotation=pose[:, :3], translation=pose[:, 3], camera_index=v,
            )
            row.append(
                FrameBundle(
                    image=images[v, t],
                    depth=block[f"{prefix}_depth"][v, t],
                    sky_mask=block[f"{prefix}_sky"][v, t],
                    camera=cam,
                    time=float(block[f"{prefix}_times"][t]),
                    flow=block[f"{prefix}_flow"][v, t],
                    dynamic_mask=block[f"{prefix}_dyn"][v, t],
                )
            )
        rows.append(row)
    return rows


def clip_from_tensors(block: dict[str, np.ndarray], spec: SceneSpec) -> ClipRecord:
    return ClipRecord(
        context=_bundles_from(block, "ctx", spec),
        targets=_bundles_from(block, "tgt", spec),
        spec=spec,
        start_time=float(block["start_time"][0]),
        world_from_scene=block["world_from_scene"],
    )


# -- dataset directory --------------------------------------------------------------------------


def _sha256(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def write_dataset(root, clips: list[tuple[str, ClipRecord]], generator_config: GeneratorConfig | None = None) -> str:
    """Write clips (as (split, record) pairs) plus a manifest; returns the dataset hash."""
    from pathlib import Path

    root = Path(root)
    (root / "clips").mkdir(parents=True, exist_ok=True)
    entries = []
    for idx, (split, clip) in enumerate(clips):
        rel = f"clips/clip_{idx:05d}.bin"
        write_tensors(root / rel, clip_to_tensors(clip))
        entries.append(
            {
                "id": idx,
                "split": split,
                "file": rel,
                "sha256": _sha256(root / rel),
                "scene": clip.spec.to_dict(),
                "start_time": clip.start_time,
            }
        )
    manifest = {
        "format_version": FORMAT_VERSION,
        "generator_config": None if generator_config is None else generator_config.to_dict(),
        "num_clips": len(entries),
        "clips": entries,
    }
    body = json.dumps(manifest, sort_keys=True, indent=1)
    manifest["dataset_hash"] = hashlib.sha256(body.encode()).hexdigest()
    with open(root / "manifest.json", "w") as fh:
        json.dump(manifest, fh, sort_keys=True, indent=1)
    return manifest["dataset_hash"]


def dataset_hash(root) -> str:
    from pathlib import Path

    with open(Path(root) / "manifest.json") as fh:
        return json.load(fh)["dataset_hash"]


def read_dataset(root, split: str | None = None, verify: bool = True) -> list[ClipRecord]:
    from pathlib import Path

    root = Path(root)
    with open(root / "manifest.json") as fh:
        manifest = json.load(fh)
    if manifest["format_version"] != FORMAT_VERSION:
        raise ValueError(f"{root}: dataset format version {manifest['format_version']}, expected {FORMAT_VERSION}")
    clips = []
    for entry in manifest["clips"]:
        if split is not None and entry["split"] != split:
            continue
        path = root / entry["file"]
        if verify and _sha256(path) != entry["sha256"]:
            raise ValueError(f"{path}: checksum mismatch (corrupted or modified)")
        spec = SceneSpec.from_dict(entry["scene"])
        clips.append(clip_from_tensors(read_tensors(path), spec))
    return clips
