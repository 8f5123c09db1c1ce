"""Feed-forward reconstructor: posed images at several timesteps in, per-frame
pixel-aligned 3D Gaussians with velocities out.

Image and Plucker-ray patches are linearly embedded and summed with a
frequency-encoded time embedding; learnable motion, sky, and affine tokens are
prepended; a pre-norm Transformer with full attention runs over the whole
sequence. Heads decode per-pixel Gaussian parameters, per-token velocity bases
and motion queries (combined per pixel through a temperature softmax into
velocities), a direction-conditioned sky color, and one affine color
correction per camera.

Token order: [motion (M), sky (1), affine (V), image (T*V*h*w)], with image
frames time-major and view-minor, patches row-major, pixels row-major inside
each patch.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import dynamics, splatter
from . import tensor as tp
from .geometry import Camera, RayMap, frequency_embed, make_rays
from .splatter import GaussianSet, RenderOutput
from .synthgen import FrameBundle
from .tensor import Tensor


@dataclass
class ModelConfig:
    patch_size: int = 8
    embed_dim: int = 128
    depth: int = 4
    heads: int = 4
    num_motion_tokens: int = 4
    motion_embed_dim: int = 32
    temperature: float = 0.5
    near: float = 0.1
    far: float = 50.0
    num_cameras: int = 2
    image_height: int = 32
    image_width: int = 48
    time_freqs: int = 10
    dir_freqs: int = 6
    mlp_ratio: int = 4
    decoder_channels: tuple[int, int, int] = (128, 64, 32)
    sky_hidden: int = 64
    freeze_velocities: bool = False
    init_scale_bias: float = 0.0  # added to the raw scale channels at init; widens early footprints

    def __post_init__(self):
        self.decoder_channels = tuple(self.decoder_channels)
        if self.image_height % self.patch_size or self.image_width % self.patch_size:
            raise ValueError(
                f"image {self.image_height}x{self.image_width} not divisible by patch size {self.patch_size}"
            )
        if self.num_motion_tokens < 0:
            raise ValueError("num_motion_tokens must be >= 0")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.embed_dim % self.heads:
            raise ValueError("embed_dim must divide evenly into heads")

    @property
    def grid(self) -> tuple[int, int]:
        return self.image_height // self.patch_size, self.image_width // self.patch_size

    def to_dict(self) -> dict:
        d = asdict(self)
        d["decoder_channels"] = list(self.decoder_channels)
        return d

    @staticmethod
    def from_dict(d: dict) -> "ModelConfig":
        d = dict(d)
        d["decoder_channels"] = tuple(d["decoder_channels"])
        return ModelConfig(**d)


@dataclass
class MotionBasisSet:
    """Shared velocity bases plus everything that assigns them to pixels.

    ``bases`` and ``queries`` are per motion token; ``keys`` and ``weights``
    are per context frame, pixel-aligned. Weights are non-negative and sum to
    one per pixel. With no motion tokens all fields except weights are None
    and weights have zero columns.
    """

    bases: Tensor | None  # (M, 6), normalized-time units
    queries: Tensor | None  # (M, e')
    keys: list[Tensor] | None  # per frame (H*W, e')
    weights: list[Tensor]  # per frame (H*W, M)


@dataclass
class Prediction:
    """Everything one forward pass produces for a clip."""

    gaussians: list[GaussianSet]  # one per (time-major, view-minor) context frame
    motion: MotionBasisSet
    sky_feature: Tensor  # (embed,)
    affine_scale: Tensor  # (V, 3, 3)
    affine_bias: Tensor  # (V, 3)
    frame_meta: list[tuple[int, int, float]]  # (view, time index, abs time)
    clip_start: float
    clip_length: float

    @property
    def weights(self) -> list[Tensor]:
        return self.motion.weights

    @property
    def bases(self) -> Tensor | None:
        return self.motion.bases


def _patchify(arr: np.ndarray, p: int) -> np.ndarray:
    h, w, c = arr.shape
    gh, gw = h // p, w // p
    return arr.reshape(gh, p, gw, p, c).transpose(0, 2, 1, 3, 4).reshape(gh * gw, p * p * c)


def _unfold(t: Tensor, gh: int, gw: int, p: int, ch: int) -> Tensor:
    blocks = tp.reshape(t, (gh, gw, p, p, ch))
    return tp.reshape(tp.transpose(blocks, (0, 2, 1, 3, 4)), (gh * p, gw * p, ch))


class Model:
    """Parameter container plus the forward pipeline.

    Instances are immutable during forward evaluation (safe for concurrent
    reads); training mutates parameters and needs exclusive access per step.
    """

    def __init__(self, config: ModelConfig, params: dict[str, Tensor]):
        self.config = config
        self.params = params

    # -- construction -------------------------------------------------------

    @staticmethod
    def init(config: ModelConfig, seed: int = 0, dtype=np.float32) -> "Model":
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0x6D6F646C]))
        p: dict[str, Tensor] = {}

        def normal(name, shape, std=0.02):
            p[name] = Tensor(rng.normal(0.0, std, shape).astype(dtype), requires_grad=True)

        def zeros(name, shape):
            p[name] = Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)

        def ones(name, shape):
            p[name] = Tensor(np.ones(shape, dtype=dtype), requires_grad=True)

        cfg = config
        e, ep = cfg.embed_dim, cfg.motion_embed_dim
        ps = cfg.patch_size
        normal("patch_embed.w", (ps * ps * 9, e))
        zeros("patch_embed.b", (e,))
        normal("time_mlp.w1", (2 * cfg.time_freqs, e))
        zeros("time_mlp.b1", (e,))
        normal("time_mlp.w2", (e, e))
        zeros("time_mlp.b2", (e,))
        normal("motion_tokens", (cfg.num_motion_tokens, e))
        normal("sky_token", (1, e))
        normal("affine_tokens", (cfg.num_cameras, e))
        for i in range(cfg.depth):
            ones(f"blocks.{i}.ln1.w", (e,))
            zeros(f"blocks.{i}.ln1.b", (e,))
            normal(f"blocks.{i}.attn.qkv.w", (e, 3 * e))
            zeros(f"blocks.{i}.attn.qkv.b", (3 * e,))
            normal(f"blocks.{i}.attn.proj.w", (e, e))
            zeros(f"blocks.{i}.attn.proj.b", (e,))
            ones(f"blocks.{i}.ln2.w", (e,))
            zeros(f"blocks.{i}.ln2.b", (e,))
            normal(f"blocks.{i}.mlp.w1", (e, cfg.mlp_ratio * e))
            zeros(f"blocks.{i}.mlp.b1", (cfg.mlp_ratio * e,))
            normal(f"blocks.{i}.mlp.w2", (cfg.mlp_ratio * e, e))
            zeros(f"blocks.{i}.mlp.b2", (e,))
        ones("final_ln.w", (e,))
        zeros("final_ln.b", (e,))

        # zero-initialized output head: every pixel starts identical; the
        # quaternion bias is the identity rotation so normalization is sane
        zeros("gauss_head.w", (e, ps * ps * 12))
        gb = np.zeros((ps * ps, 12), dtype=dtype)
        gb[:, 1] = 1.0
        gb[:, 5:8] = cfg.init_scale_bias
        p["gauss_head.b"] = Tensor(gb.reshape(-1), requires_grad=True)

        for m in range(cfg.num_motion_tokens):
            normal(f"motion.{m}.q.w1", (e, e))
            zeros(f"motion.{m}.q.b1", (e,))
            normal(f"motion.{m}.q.w2", (e, e))
            zeros(f"motion.{m}.q.b2", (e,))
            normal(f"motion.{m}.q.w3", (e, ep))
            zeros(f"motion.{m}.q.b3", (ep,))
            normal(f"motion.{m}.vb.w1", (e, e))
            zeros(f"motion.{m}.vb.b1", (e,))
            normal(f"motion.{m}.vb.w2", (e, e))
            zeros(f"motion.{m}.vb.b2", (e,))
            zeros(f"motion.{m}.vb.w3", (e, 6))  # velocities start at zero
            zeros(f"motion.{m}.vb.b3", (6,))

        c1, c2, c3 = cfg.decoder_channels
        normal("decoder.conv1.k", (e, 2, 2, c1))
        zeros("decoder.conv1.b", (c1,))
        ones("decoder.ln1.w", (c1,))
        zeros("decoder.ln1.b", (c1,))
        normal("decoder.conv2.k", (c1, 2, 2, c2))
        zeros("decoder.conv2.b", (c2,))
        ones("decoder.ln2.w", (c2,))
        zeros("decoder.ln2.b", (c2,))
        normal("decoder.conv3.k", (c2, 2, 2, c3))
        zeros("decoder.conv3.b", (c3,))
        if cfg.num_motion_tokens > 0:
            normal("decoder.key.w", (c3, ep))
            zeros("decoder.key.b", (ep,))
        else:
            zeros("decoder.vel.w", (c3, 6))
            zeros("decoder.vel.b", (6,))

        normal("sky.in.w", (2 * cfg.dir_freqs * 3, cfg.sky_hidden))
        zeros("sky.in.b", (cfg.sky_hidden,))
        zeros("sky.mod.w", (e, 2 * cfg.sky_hidden))  # identity modulation at init
        zeros("sky.mod.b", (2 * cfg.sky_hidden,))
        zeros("sky.out.w", (cfg.sky_hidden, 3))  # gray sky at init, like the other heads
        zeros("sky.out.b", (3,))

        zeros("affine.w", (e, 12))  # affine correction starts at identity
        zeros("affine.b", (12,))
        return Model(config, p)

    def parameters(self) -> dict[str, Tensor]:
        return self.params

    @property
    def dtype(self):
        return self.params["patch_embed.w"].dtype

    def astype(self, dtype) -> "Model":
        params = {k: Tensor(v.numpy().astype(dtype), requires_grad=v.requires_grad) for k, v in self.params.items()}
        return Model(self.config, params)

    # -- forward pieces -------------------------------------------------------

    def _linear(self, x: Tensor, name: str) -> Tensor:
        return tp.matmul(x, self.params[f"{name}.w"]) + self.params[f"{name}.b"]

    def _time_embedding(self, t_norm: float) -> Tensor:
        enc = frequency_embed(np.array([t_norm]), self.config.time_freqs).astype(self.dtype)
        h = tp.gelu(tp.matmul(Tensor(enc.reshape(1, -1)), self.params["time_mlp.w1"]) + self.params["time_mlp.b1"])
        return tp.matmul(h, self.params["time_mlp.w2"]) + self.params["time_mlp.b2"]

    def embed_inputs(
        self, frames: list[list[FrameBundle]], clip_start: float, clip_length: float
    ) -> tuple[Tensor, list[tuple[int, int, float]], list[RayMap]]:
        """Build the token sequence; returns (tokens, frame metadata, ray maps).

        ``frames`` is indexed [view][time]; timestamps are normalized to [0, 1]
        over the clip before frequency encoding.
        """
        cfg = self.config
        n_views = len(frames)
        n_times = len(frames[0])
        blocks: list[Tensor] = []
        meta: list[tuple[int, int, float]] = []
        rays: list[RayMap] = []
        for ti in range(n_times):
            for v in range(n_views):
                fb = frames[v][ti]
                if fb.image.shape[:2] != (cfg.image_height, cfg.image_width):
                    raise ValueError(f"frame is {fb.image.shape[:2]}, config expects "
                                     f"{(cfg.image_height, cfg.image_width)}")
                ray = make_rays(fb.camera)
                img = fb.image.astype(np.float64) * 2.0 - 1.0  # [0,1] -> [-1,1]
                stacked = np.concatenate([img, ray.plucker], axis=-1)
                patches = Tensor(_patchify(stacked, cfg.patch_size).astype(self.dtype))
                tok = self._linear(patches, "patch_embed")
                t_norm = (fb.time - clip_start) / clip_length
                tok = tok + self._time_embedding(t_norm)
                blocks.append(tok)
                meta.append((v, ti, fb.time))
                rays.append(ray)
        aux = [self.params["motion_tokens"], self.params["sky_token"], self.params["affine_tokens"]]
        tokens = tp.concat(aux + blocks, axis=0)
        return tokens, meta, rays

    def encode(self, tokens: Tensor) -> Tensor:
        """Pre-norm Transformer blocks with full attention over the sequence."""
        cfg = self.config
        x = tokens
        for i in range(cfg.depth):
            pre = f"blocks.{i}"
            h = tp.layer_norm(x, self.params[f"{pre}.ln1.w"], self.params[f"{pre}.ln1.b"])
            qkv = self._linear(h, f"{pre}.attn.qkv")
            e = cfg.embed_dim
            q, k, v = qkv[:, 0:e], qkv[:, e : 2 * e], qkv[:, 2 * e : 3 * e]
            att = tp.attention(q, k, v, heads=cfg.heads)
            x = x + self._linear(att, f"{pre}.attn.proj")
            h = tp.layer_norm(x, self.params[f"{pre}.ln2.w"], self.params[f"{pre}.ln2.b"])
            h = tp.gelu(tp.matmul(h, self.params[f"{pre}.mlp.w1"]) + self.params[f"{pre}.mlp.b1"])
            x = x + tp.matmul(h, self.params[f"{pre}.mlp.w2"]) + self.params[f"{pre}.mlp.b2"]
        return tp.layer_norm(x, self.params["final_ln.w"], self.params["final_ln.b"])

    def split_features(self, feats: Tensor, n_frames: int):
        cfg = self.config
        m, v = cfg.num_motion_tokens, cfg.num_cameras
        gh, gw = cfg.grid
        motion = feats[0:m]
        sky = feats[m : m + 1]
        affine = feats[m + 1 : m + 1 + v]
        img = feats[m + 1 + v :]
        per_frame = [img[i * gh * gw : (i + 1) * gh * gw] for i in range(n_frames)]
        return motion, sky, affine, per_frame

    def decode_gaussians(self, frame_feats: Tensor, ray: RayMap) -> dict[str, Tensor]:
        """Pixel-aligned Gaussian parameters with the fixed activation set."""
        cfg = self.config
        gh, gw = cfg.grid
        ps = cfg.patch_size
        raw = self._linear(frame_feats, "gauss_head")  # (gh*gw, p*p*12)
        px = tp.reshape(_unfold(raw, gh, gw, ps, 12), (cfg.image_height * cfg.image_width, 12))
        d_raw = px[:, 0]
        quat = px[:, 1:5]
        s_raw = px[:, 5:8]
        o_raw = px[:, 8]
        c_raw = px[:, 9:12]
        depth = cfg.near + tp.sigmoid(d_raw) * (cfg.far - cfg.near)
        origins = Tensor(ray.origins.reshape(-1, 3).astype(self.dtype))
        dirs = Tensor(ray.directions.reshape(-1, 3).astype(self.dtype))
        centers = origins + tp.reshape(depth, (depth.shape[0], 1)) * dirs
        scales = tp.minimum_const(tp.exp(s_raw - 2.3), 0.5)
        opac = tp.sigmoid(o_raw - 2.0)
        colors = tp.sigmoid(c_raw) * 2.0 - 1.0
        return {"centers": centers, "quaternions": quat, "scales": scales, "opacities": opac,
                "colors": colors, "depth": depth}

    def _token_mlp(self, feat: Tensor, prefix: str) -> Tensor:
        h = tp.gelu(tp.matmul(feat, self.params[f"{prefix}.w1"]) + self.params[f"{prefix}.b1"])
        h = tp.gelu(tp.matmul(h, self.params[f"{prefix}.w2"]) + self.params[f"{prefix}.b2"])
        return tp.matmul(h, self.params[f"{prefix}.w3"]) + self.params[f"{prefix}.b3"]

    def _upscale_features(self, frame_feats: Tensor) -> Tensor:
        """Three 2x transposed-conv stages back to pixel resolution."""
        cfg = self.config
        gh, gw = cfg.grid
        x = tp.reshape(frame_feats, (gh, gw, cfg.embed_dim))
        x = tp.transposed_conv_2x(x, self.params["decoder.conv1.k"], self.params["decoder.conv1.b"])
        x = tp.gelu(tp.layer_norm(x, self.params["decoder.ln1.w"], self.params["decoder.ln1.b"]))
        x = tp.transposed_conv_2x(x, self.params["decoder.conv2.k"], self.params["decoder.conv2.b"])
        x = tp.gelu(tp.layer_norm(x, self.params["decoder.ln2.w"], self.params["decoder.ln2.b"]))
        x = tp.transposed_conv_2x(x, self.params["decoder.conv3.k"], self.params["decoder.conv3.b"])
        x = tp.gelu(x)
        return tp.reshape(x, (cfg.image_height * cfg.image_width, cfg.decoder_channels[2]))

    def decode_motion(self, motion_feats: Tensor, frame_feats_list: list[Tensor]) -> tuple["MotionBasisSet", list[Tensor]]:
        """Velocity bases, queries, per-pixel keys/weights, and velocities.

        With no motion tokens (M = 0) the decoder predicts pixel-aligned
        velocities directly and the basis set is empty.
        """
        cfg = self.config
        m = cfg.num_motion_tokens
        hw = cfg.image_height * cfg.image_width
        if m == 0:
            weights, vels = [], []
            for feats in frame_feats_list:
                up = self._upscale_features(feats)
                v = tp.matmul(up, self.params["decoder.vel.w"]) + self.params["decoder.vel.b"]
                weights.append(Tensor(np.zeros((hw, 0), dtype=self.dtype)))
                vels.append(v)
            return MotionBasisSet(None, None, None, weights), vels
        queries = tp.concat([self._token_mlp(motion_feats[i : i + 1], f"motion.{i}.q") for i in range(m)], axis=0)
        bases = tp.concat([self._token_mlp(motion_feats[i : i + 1], f"motion.{i}.vb") for i in range(m)], axis=0)
        keys_list, weights, vels = [], [], []
        for feats in frame_feats_list:
            up = self._upscale_features(feats)
            keys = tp.matmul(up, self.params["decoder.key.w"]) + self.params["decoder.key.b"]  # (hw, e')
            logits = tp.matmul(keys, tp.transpose(queries, (1, 0)))  # (hw, M)
            w = tp.softmax(logits, axis=-1, temperature=cfg.temperature)
            v = tp.matmul(w, bases)  # (hw, 6) convex combination of bases
            keys_list.append(keys)
            weights.append(w)
            vels.append(v)
        return MotionBasisSet(bases, queries, keys_list, weights), vels

    def decode_sky(self, sky_feature: Tensor, directions: np.ndarray) -> Tensor:
        """Direction-conditioned sky color via adaptive layer-norm modulation."""
        cfg = self.config
        enc = frequency_embed(directions.reshape(-1, 3), cfg.dir_freqs).astype(self.dtype)
        x = tp.matmul(Tensor(enc), self.params["sky.in.w"]) + self.params["sky.in.b"]
        x = tp.layer_norm(x)  # no affine parameters
        mod = tp.matmul(tp.reshape(sky_feature, (1, cfg.embed_dim)), self.params["sky.mod.w"]) + self.params["sky.mod.b"]
        scale = mod[:, : cfg.sky_hidden]
        shift = mod[:, cfg.sky_hidden :]
        x = x * (1.0 + scale) + shift
        rgb = tp.matmul(x, self.params["sky.out.w"]) + self.params["sky.out.b"]
        return tp.sigmoid(rgb) * 2.0 - 1.0

    def decode_affine(self, affine_feats: Tensor) -> tuple[Tensor, Tensor]:
        raw = self._linear(affine_feats, "affine")  # (V, 12)
        v = raw.shape[0]
        eye = Tensor(np.tile(np.eye(3, dtype=self.dtype), (v, 1, 1)))
        scale = eye + tp.reshape(raw[:, 0:9], (v, 3, 3))
        bias = raw[:, 9:12]
        return scale, bias

    # -- full forward -----------------------------------------------------------

    def reconstruct(self, frames: list[list[FrameBundle]], clip_start: float, clip_length: float) -> Prediction:
        cfg = self.config
        tokens, meta, rays = self.embed_inputs(frames, clip_start, clip_length)
        feats = self.encode(tokens)
        motion_f, sky_f, affine_f, frame_f = self.split_features(feats, len(meta))
        motion, vels = self.decode_motion(motion_f, frame_f)
        aff_s, aff_b = self.decode_affine(affine_f)
        gaussians = []
        for idx, (view, ti, t_abs) in enumerate(meta):
            dec = self.decode_gaussians(frame_f[idx], rays[idx])
            vel = vels[idx] * (0.0 if cfg.freeze_velocities else 1.0 / clip_length)  # m/s
            hw = cfg.image_height * cfg.image_width
            prov = np.stack([np.full(hw, view), np.full(hw, ti), np.arange(hw)], axis=1)
            gaussians.append(
                GaussianSet(
                    centers=dec["centers"],
                    quaternions=dec["quaternions"],
                    scales=dec["scales"],
                    opacities=dec["opacities"],
                    colors=dec["colors"],
                    velocities=vel,
                    source_time=np.full(hw, t_abs),
                    provenance=prov,
                )
            )
        return Prediction(
            gaussians=gaussians,
            motion=motion,
            sky_feature=tp.reshape(sky_f, (cfg.embed_dim,)),
            affine_scale=aff_s,
            affine_bias=aff_b,
            frame_meta=meta,
            clip_start=clip_start,
            clip_length=clip_length,
        )

    def render_at(self, pred: Prediction, camera: Camera, time: float, apply_affine: bool = True) -> RenderOutput:
        """Aggregate all per-frame Gaussians at ``time`` and render ``camera``."""
        cfg = self.config
        agg = dynamics.aggregate(pred.gaussians, time)
        proj = splatter.project(agg, camera, near=cfg.near)
        out = splatter.rasterize(proj, camera.height, camera.width)
        ray = make_rays(camera)
        sky_rgb = tp.reshape(self.decode_sky(pred.sky_feature, ray.directions), (camera.height, camera.width, 3))
        composed = splatter.composite_sky(out, sky_rgb)
        if apply_affine:
            v = camera.camera_index
            out.corrected = splatter.apply_affine(composed, pred.affine_scale[v], pred.affine_bias[v])
        else:
            out.corrected = composed
        return out
