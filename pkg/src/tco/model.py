"""A small multiview transformer with LoRA adapters on its shared decoder.

Pipeline: patchify -> per-view encoder -> decoder blocks alternating
intra-view and cross-view attention -> per-view heads for dense depth and
confidence, camera pose and focal length.  View 0 is the reference: its
tokens carry a reference embedding and its pose is pinned to the identity.

Parameters live in a flat ``dict[str, np.ndarray]``.  Names are prefixed by
group (``encoder.``, ``decoder.``, ``lora.``, ``head.``); during test-time
optimization only ``lora.`` tensors move.
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .geometry import Intrinsics, Pose, orthonormalize, quat_to_matrix

DEPTH_FLOOR = 1e-3
CKPT_MAGIC = b"TCOCKPT\x00"
CKPT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 32
    patch: int = 4
    dim: int = 48
    heads: int = 4
    blocks: int = 2
    ffn_mult: int = 2
    lora_rank: int = 4
    lora_targets: tuple[str, ...] = ("qkv", "ffn")
    max_views: int = 8
    depth_nominal: float = 3.0
    focal_nominal: float = 0.9  # in units of image width
    cam_cells: int = 2  # camera head pools tokens on a cam_cells x cam_cells grid

    def __post_init__(self):
        if self.lora_rank < 1:
            raise ValueError("LoRA rank must be >= 1")
        if self.dim % self.heads:
            raise ValueError("token dim must be divisible by the head count")
        if self.image_size % self.patch:
            raise ValueError("image size must be a multiple of the patch size")
        if self.cam_cells < 1 or (self.image_size // self.patch) % self.cam_cells:
            raise ValueError("camera pooling cells must divide the token grid")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch

    @property
    def tokens(self) -> int:
        return self.grid * self.grid


@dataclass
class Predictions:
    """Per-view outputs; every field is a Var with a leading view axis."""

    depth: ad.Var  # (N, H, W)
    confidence: ad.Var  # (N, H, W), > 1
    R: ad.Var  # (N, 3, 3) camera-to-world
    t: ad.Var  # (N, 3)
    fx: ad.Var  # (N,)
    fy: ad.Var  # (N,)

    @property
    def n_views(self) -> int:
        return self.depth.shape[0]

    def poses(self) -> list[Pose]:
        return [Pose(orthonormalize(R), t) for R, t in zip(self.R.value, self.t.value)]

    def intrinsics(self) -> list[Intrinsics]:
        H, W = self.depth.shape[1:]
        return [Intrinsics(float(fx), float(fy), W, H) for fx, fy in zip(self.fx.value, self.fy.value)]

    def detached(self) -> "Predictions":
        return Predictions(*(ad.const(getattr(self, k)) for k in ("depth", "confidence", "R", "t", "fx", "fy")))

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: getattr(self, k).value.copy() for k in ("depth", "confidence", "R", "t", "fx", "fy")}

    @classmethod
    def from_arrays(cls, d: dict) -> "Predictions":
        return cls(*(ad.const(np.asarray(d[k], float)) for k in ("depth", "confidence", "R", "t", "fx", "fy")))


N_SHIFT_FEATS = 4


def global_shift(images, max_frac: float = 0.375) -> np.ndarray:
    """Translation (dx, dy) in pixels that best maps view 0 onto each view.

    Minimizes the mean squared difference of the zero-mean gray images over
    the overlap, for integer shifts up to ``max_frac`` of the image size,
    then refines with a parabola through the neighbouring costs.  View 0
    gets (0, 0).  Correlations are evaluated for all shifts at once by FFT.
    """
    g = np.asarray(images, dtype=np.float64).mean(-1)
    g = g - g.mean(axis=(1, 2), keepdims=True)
    N, H, W = g.shape
    mx, my = int(max_frac * W), int(max_frac * H)
    shape = (2 * H, 2 * W)
    F = lambda a: np.fft.rfft2(a, shape)
    corr = lambda a, b: np.fft.irfft2(np.conj(F(a)) * F(b), shape)  # sum_p a(p) b(p + s)
    ones = np.ones((H, W))
    ref, ref2 = g[0], g[0] ** 2
    count = corr(ones, ones)
    out = np.zeros((N, 2))
    for k in range(1, N):
        b = g[k]
        # view k at p + s matches view 0 at p: E(s) = mean (b(p+s) - ref(p))^2 over the overlap
        sse = corr(ref2, ones) + corr(ones, b * b) - 2 * corr(ref, b)
        ys = np.r_[0:my + 1, -my:0]
        xs = np.r_[0:mx + 1, -mx:0]
        E = (sse / np.maximum(count, 1))[np.ix_(ys % shape[0], xs % shape[1])]
        E = np.fft.fftshift(E)  # rows/cols now run from -my..my, -mx..mx
        j, i = np.unravel_index(np.argmin(E), E.shape)
        out[k] = (i - mx + _parabola(E[j, i - 1:i + 2]) if 0 < i < 2 * mx else i - mx,
                  j - my + _parabola(E[j - 1:j + 2, i]) if 0 < j < 2 * my else j - my)
    return out


def _parabola(e) -> float:
    d = e[0] - 2 * e[1] + e[2]
    return 0.0 if d <= 0 else 0.5 * (e[0] - e[2]) / d


def _adapted_layers(cfg: ModelConfig) -> list[str]:
    names = []
    for b in range(cfg.blocks):
        if "qkv" in cfg.lora_targets:
            names += [f"decoder.{b}.intra.qkv", f"decoder.{b}.cross.qkv"]
        if "ffn" in cfg.lora_targets:
            names += [f"decoder.{b}.ffn.w1", f"decoder.{b}.ffn.w2"]
    return names


def init_params(cfg: ModelConfig, seed: int = 0) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(seed)
    D, P = cfg.dim, cfg.patch
    pdim = P * P * 3

    def lin(name, n_in, n_out, gain=1.0):
        params[name + ".w"] = rng.normal(0, gain / np.sqrt(n_in), (n_in, n_out))
        params[name + ".b"] = np.zeros(n_out)

    params: dict[str, np.ndarray] = {}
    lin("encoder.patch", pdim, D)
    lin("encoder.mix", D, D)
    params["encoder.pos"] = rng.normal(0, 0.5, (cfg.tokens, D))
    params["encoder.ref"] = rng.normal(0, 0.5, (D,))
    for b in range(cfg.blocks):
        for kind in ("intra", "cross"):
            lin(f"decoder.{b}.{kind}.qkv", D, 3 * D)
            lin(f"decoder.{b}.{kind}.out", D, D, gain=0.5)
        lin(f"decoder.{b}.ffn.w1", D, cfg.ffn_mult * D)
        lin(f"decoder.{b}.ffn.w2", cfg.ffn_mult * D, D, gain=0.5)
    lin("head.depth", D, P * P * 2, gain=0.1)
    lin("head.cam1", 2 * D * cfg.cam_cells ** 2 + N_SHIFT_FEATS, D)
    lin("head.cam2", D, 7, gain=0.1)
    params["head.cam2.b"][0] = 1.0  # identity quaternion
    params["head.camskip.w"] = np.zeros((N_SHIFT_FEATS, 7))  # linear path from the shift cue
    lin("head.focal1", D, D)
    lin("head.focal2", D, 2, gain=0.1)
    params.update(init_lora(cfg, seed + 1))
    return params


def init_lora(cfg: ModelConfig, seed: int = 0, shapes: dict | None = None) -> dict[str, np.ndarray]:
    """Fresh adapters: A ~ N(0, 1/in), B = 0, so the adapted model equals the base."""
    rng = np.random.default_rng(seed)
    D, r = cfg.dim, cfg.lora_rank
    out = {}
    for name in _adapted_layers(cfg):
        kind = name.rsplit(".", 1)[-1]
        n_in, n_out = {"qkv": (D, 3 * D), "w1": (D, cfg.ffn_mult * D), "w2": (cfg.ffn_mult * D, D)}[kind]
        out[f"lora.{name}.A"] = rng.normal(0, 1 / np.sqrt(n_in), (n_in, r))
        out[f"lora.{name}.B"] = np.zeros((r, n_out))
    return out


def _layer_norm(x, eps=1e-5):
    xc = x - ad.mean(x, axis=-1, keepdims=True)
    var = ad.mean(xc * xc, axis=-1, keepdims=True)
    return xc / ad.sqrt(var + eps)


class ToyMVT:
    """Parameters plus a pure forward function over them."""

    def __init__(self, cfg: ModelConfig = ModelConfig(), params: dict | None = None, seed: int = 0):
        self.cfg = cfg
        self.params = init_params(cfg, seed) if params is None else {k: np.array(v, float) for k, v in params.items()}

    # -- parameter groups ---------------------------------------------------
    def lora_names(self) -> list[str]:
        return sorted(k for k in self.params if k.startswith("lora."))

    def trainable_names(self, heads: tuple[str, ...] = ()) -> list[str]:
        """LoRA factors, optionally plus whole heads ('camera', 'depth')."""
        names = self.lora_names()
        prefixes = {"camera": ("head.cam", "head.focal"), "depth": ("head.depth",)}
        for h in heads:
            if h not in prefixes:
                raise ValueError(f"unknown head {h!r}")
            names += sorted(k for k in self.params if k.startswith(prefixes[h]))
        return names

    def frozen_names(self) -> list[str]:
        return sorted(k for k in self.params if not k.startswith("lora."))

    def reset_lora(self, seed: int = 0) -> None:
        self.params.update(init_lora(self.cfg, seed))

    def frozen_hash(self) -> str:
        h = hashlib.sha256()
        for k in self.frozen_names():
            h.update(k.encode())
            h.update(np.ascontiguousarray(self.params[k]).tobytes())
        return h.hexdigest()

    def copy(self) -> "ToyMVT":
        return ToyMVT(self.cfg, self.params)

    # -- forward ------------------------------------------------------------
    def forward(self, images, bound: dict | None = None) -> Predictions:
        """Predictions for (N, H, W, 3) images.

        ``bound`` maps parameter names to tape Vars that replace the stored
        arrays, which is how gradients reach selected tensors.
        """
        cfg = self.cfg
        imgs = np.asarray(images, dtype=np.float64)
        S, P = cfg.image_size, cfg.patch
        if imgs.ndim != 4 or imgs.shape[1:] != (S, S, 3):
            raise ValueError(f"expected images of shape (N, {S}, {S}, 3), got {imgs.shape}")
        N = imgs.shape[0]
        if not 2 <= N <= cfg.max_views:
            raise ValueError(f"need between 2 and {cfg.max_views} views, got {N}")
        p = dict(self.params)
        if bound:
            p.update(bound)
        g, T, D = cfg.grid, cfg.tokens, cfg.dim

        def linear(x, name, adapt=False):
            y = ad.matmul(x, p[name + ".w"]) + p[name + ".b"]
            if adapt and f"lora.{name}.A" in p:
                delta = ad.matmul(ad.matmul(x, p[f"lora.{name}.A"]), p[f"lora.{name}.B"])
                y = y + delta * (1.0 / cfg.lora_rank)
            return y

        patches = imgs.reshape(N, g, P, g, P, 3).transpose(0, 1, 3, 2, 4, 5).reshape(N, T, P * P * 3)
        x = ad.tanh(linear(patches - 0.5, "encoder.patch"))
        x = linear(x, "encoder.mix") + p["encoder.pos"]
        ref = np.zeros((N, 1, 1))
        ref[0] = 1.0
        x = x + ref * p["encoder.ref"]

        for b in range(cfg.blocks):
            x = x + self._attention(_layer_norm(x), f"decoder.{b}.intra", linear, (N, T))
            flat = ad.reshape(_layer_norm(x), (1, N * T, D))
            x = x + ad.reshape(self._attention(flat, f"decoder.{b}.cross", linear, (1, N * T)), (N, T, D))
            h = ad.tanh(linear(_layer_norm(x), f"decoder.{b}.ffn.w1", adapt=True))
            x = x + linear(h, f"decoder.{b}.ffn.w2", adapt=True)

        x = _layer_norm(x)
        raw = linear(x, "head.depth")  # (N, T, P*P*2)
        raw = ad.reshape(raw, (N, g, g, P, P, 2))
        raw = ad.reshape(ad.transpose(raw, (0, 1, 3, 2, 4, 5)), (N, S, S, 2))
        depth = ad.softplus(raw[..., 0]) * (cfg.depth_nominal / np.log(2.0)) + DEPTH_FLOOR
        conf = ad.exp(raw[..., 1]) + 1.0

        pooled = ad.mean(x, axis=1)  # (N, D)
        # camera head: coarse spatial pooling of view i next to that of view 0
        c = cfg.cam_cells
        cells = ad.reshape(x, (N, c, g // c, c, g // c, D))
        cells = ad.reshape(ad.mean(ad.mean(cells, axis=4), axis=2), (N, c * c * D))
        # fixed image-shift cue against view 0; scaled by the view's mean
        # predicted depth it approximates the lateral camera offset
        shift = global_shift(imgs) / S  # (N, 2)
        dbar = ad.expand_dims(ad.mean(ad.reshape(depth, (N, S * S)), axis=1), -1)
        feats = ad.concat([shift * dbar * (1.0 / cfg.focal_nominal), ad.const(shift)], axis=1)
        cam_in = ad.concat([cells, cells[:1] + np.zeros((N, 1)), feats], axis=1)
        cam = linear(ad.tanh(linear(cam_in, "head.cam1")), "head.cam2") + ad.matmul(feats, p["head.camskip.w"])
        R = quat_to_matrix(cam[:, :4])
        t = cam[:, 4:]
        R = ad.concat([np.eye(3)[None], R[1:]], axis=0)
        t = ad.concat([np.zeros((1, 3)), t[1:]], axis=0)
        foc = linear(ad.tanh(linear(pooled, "head.focal1")), "head.focal2")
        f0 = cfg.focal_nominal * S
        fx = ad.exp(foc[:, 0]) * f0
        fy = ad.exp(foc[:, 1]) * f0
        return Predictions(depth, conf, R, t, fx, fy)

    def _attention(self, x, name, linear, bt):
        cfg = self.cfg
        B, T = bt
        h, dh = cfg.heads, cfg.dim // cfg.heads
        qkv = linear(x, name + ".qkv", adapt=True)  # (B, T, 3D)
        qkv = ad.transpose(ad.reshape(qkv, (B, T, 3, h, dh)), (2, 0, 3, 1, 4))  # (3, B, h, T, dh)
        q, k, v = qkv[0], qkv[1], qkv[2]
        att = ad.softmax(ad.matmul(q, ad.swapaxes(k, -1, -2)) * (1.0 / np.sqrt(dh)), axis=-1)
        o = ad.matmul(att, v)  # (B, h, T, dh)
        o = ad.reshape(ad.transpose(o, (0, 2, 1, 3)), (B, T, cfg.dim))
        return linear(o, name + ".out")

    # -- persistence ----------------------------------------------------------
    def save(self, path, extra: dict | None = None) -> Path:
        return save_checkpoint(path, self.cfg, self.params, extra)

    @classmethod
    def load(cls, path) -> "ToyMVT":
        cfg, params, _ = load_checkpoint(path)
        return cls(cfg, params)


def save_checkpoint(path, cfg: ModelConfig, params: dict, extra: dict | None = None) -> Path:
    """Write a checkpoint.

    Layout (little-endian): 8-byte magic ``TCOCKPT\\0``, u32 version, u32
    header length, UTF-8 JSON header, then the raw ``<f8`` tensors in header
    order.  The header lists ``name``, ``dtype``, ``shape`` and byte
    ``offset`` of each tensor relative to the start of the data block.
    """
    path = Path(path)
    names = sorted(params)
    entries, offset = [], 0
    for k in names:
        a = np.ascontiguousarray(params[k], dtype="<f8")
        entries.append({"name": k, "dtype": "<f8", "shape": list(a.shape), "offset": offset})
        offset += a.nbytes
    cfg_d = asdict(cfg)
    cfg_d["lora_targets"] = list(cfg.lora_targets)
    header = json.dumps({"config": cfg_d, "tensors": entries, "extra": extra or {}}, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<II", CKPT_VERSION, len(header)))
        fh.write(header)
        for k in names:
            fh.write(np.ascontiguousarray(params[k], dtype="<f8").tobytes())
    return path


def load_checkpoint(path):
    data = Path(path).read_bytes()
    if data[:8] != CKPT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    version, hlen = struct.unpack("<II", data[8:16])
    if version != CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(data[16:16 + hlen])
    base = 16 + hlen
    params = {}
    for e in header["tensors"]:
        n = int(np.prod(e["shape"])) if e["shape"] else 1
        start = base + e["offset"]
        params[e["name"]] = np.frombuffer(data, dtype=e["dtype"], count=n, offset=start).reshape(e["shape"]).astype(np.float64)
    cfg_d = header["config"]
    cfg_d["lora_targets"] = tuple(cfg_d["lora_targets"])
    return ModelConfig(**cfg_d), params, header.get("extra", {})
