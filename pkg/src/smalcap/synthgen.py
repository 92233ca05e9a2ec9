"""Synthetic annotated dataset: random pose, shape, camera, appearance, background.

Each sample draws from its own generator ``default_rng([seed, index])`` so a
dataset is reproducible regardless of how many workers produce it.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
from matplotlib import colors as mcolors
from scipy import ndimage

from . import io
from .body_model import PoseState, pose_model, shape_displacement
from .camera import CameraParams, View, focal_feature, project
from .objectives import GaussianPosePrior, iou
from .render import (TextureAtlas, UVFlow, compute_uvflow, rasterize_hard, render_textured,
                     textel_map, textel_points)

log = logging.getLogger(__name__)

GAMMA_0 = (0.5, -0.1, 20.0)
REFERENCE_FOCAL = 4000.0
IMAGE_SIZE = 640


@dataclass
class GenConfig:
    n_subjects: int = 2
    images_per_subject: int = 50
    textures_per_subject: int = 1
    white_balance: bool = True          # adds a gray-world copy of every texture
    pool_size: int = 57
    use_gaussian: bool = True
    gaussian_fraction: float = 0.78     # share of Gaussian draws vs noised pool poses
    per_joint: bool = False             # block-diagonal pose covariance
    pose_scale: float = 1.0             # multiplies pose deviations from the mean
    pool_noise: float = 0.05            # rad, added to pool poses
    trans_sigma: tuple = (0.2, 0.1, 1.0)
    shape_sigma: float = 1.0            # subject spread on the active shape features
    shape_noise: float = 0.2            # per-image spread around the subject
    shape_active: int = 20
    focal_sigma: float = 0.05           # relative
    brightness: float = 0.15            # +- relative value change
    hue: float = 0.03                   # +- hue shift (turns)
    saturation: float = 0.2             # +- relative saturation change
    background_dir: str | None = None
    background_color: tuple = (0.55, 0.5, 0.38)
    background_variation: float = 0.04
    size: int = IMAGE_SIZE
    seed: int = 0
    max_attempts: int = 20

    def __post_init__(self):
        self.trans_sigma = tuple(float(t) for t in self.trans_sigma)
        self.background_color = tuple(float(c) for c in self.background_color)
        self.check()

    def check(self):
        for name in ("pose_scale", "pool_noise", "shape_sigma", "shape_noise", "focal_sigma",
                     "brightness", "hue", "saturation", "background_variation"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if len(self.trans_sigma) != 3 or min(self.trans_sigma) < 0:
            raise ValueError("trans_sigma must be three non-negative values")
        for name in ("n_subjects", "images_per_subject", "textures_per_subject", "pool_size", "size",
                     "max_attempts"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.pool_size < 2:
            raise ValueError("pool_size must be at least 2")
        if not 0 <= self.gaussian_fraction <= 1:
            raise ValueError("gaussian_fraction must lie in [0, 1]")
        if self.shape_active < 0:
            raise ValueError("shape_active must be non-negative")
        if self.background_dir is not None:
            if not background_files(self.background_dir):
                raise ValueError(f"background_dir '{self.background_dir}' has no images")
        return self

    @property
    def n_images(self):
        return self.n_subjects * self.images_per_subject

    def to_dict(self):
        d = asdict(self)
        d["trans_sigma"] = list(self.trans_sigma)
        d["background_color"] = list(self.background_color)
        return d

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown gen config field(s): {sorted(unknown)}")
        return cls(**d)


def background_files(directory):
    p = Path(directory)
    if not p.is_dir():
        return []
    return sorted(f for f in p.iterdir() if f.suffix.lower() in (".png", ".jpg", ".jpeg"))


# ----------------------------------------------------------------------
# poses


def _jid(model, name):
    return list(model.joint_names).index(name)


def default_pose_pool(model, n=57, seed=0):
    """Walk-cycle poses in profile (facing -u), with varied heading and head carriage."""
    rng = np.random.default_rng(seed)
    J = model.n_joints
    pool = np.zeros((n, J, 3))
    j = lambda name: _jid(model, name)  # noqa: E731
    for k in range(n):
        ph = 2 * np.pi * k / n
        th = pool[k]
        th[0] = [0.08 * np.sin(3 * ph + 1.0), np.pi / 2 + 0.45 * np.sin(5 * ph + 0.3), 0.04 * np.sin(ph)]
        for side, off in (("L", 0.0), ("R", np.pi)):
            a = ph + off
            th[j(f"shoulder_{side}")] = [0.35 * np.sin(a), 0, 0]
            th[j(f"elbow_{side}")] = [-0.25 * max(0.0, np.sin(a + 0.8)), 0, 0]
            th[j(f"carpus_{side}")] = [0.5 * max(0.0, np.sin(a + 1.2)), 0, 0]
            h = a + np.pi / 2
            th[j(f"hip_{side}")] = [0.3 * np.sin(h), 0, 0]
            th[j(f"stifle_{side}")] = [-0.3 * max(0.0, np.sin(h + 0.6)), 0, 0]
            th[j(f"hock_{side}")] = [0.35 * max(0.0, np.sin(h + 1.0)), 0, 0]
        th[j("neck0")] = [0.2 * np.sin(2 * ph + 0.5) + 0.1 * np.sin(7 * ph), 0.15 * np.sin(3 * ph), 0]
        th[j("neck1")] = [0.1 * np.sin(2 * ph), 0, 0]
        th[j("head")] = [0.15 * np.sin(4 * ph + 1.0), 0.1 * np.sin(ph), 0]
        th[j("jaw")] = [0.1 * max(0.0, np.sin(6 * ph)), 0, 0]
        for t in range(5):
            th[j(f"tail{t}")] = [0.1 * np.sin(2 * ph + t), 0.12 * np.sin(3 * ph + 0.5 * t), 0]
        th[1:5] += 0.03 * np.array([np.sin(2 * ph), np.sin(ph), 0.0])
        th[1:] += 0.01 * rng.standard_normal((J - 1, 3))
    return pool.reshape(n, -1)


def fit_pose_gaussian(pool, ridge=1e-4, per_joint=False):
    """Sample mean and covariance (+ ridge on the diagonal) of flat poses."""
    X = np.asarray(pool, dtype=np.float64).reshape(len(pool), -1)
    if len(X) < 2:
        raise ValueError("pose pool needs at least 2 poses")
    mean = X.mean(0)
    R = X - mean
    cov = R.T @ R / (len(X) - 1)
    if per_joint:
        block = np.kron(np.eye(X.shape[1] // 3), np.ones((3, 3)))
        cov = cov * block
    return mean, cov + ridge * np.eye(X.shape[1])


def pose_mirror_operator(model):
    """Signed permutation P with flat(mirrored theta) = P @ flat(theta)."""
    J = model.n_joints
    P = np.zeros((3 * J, 3 * J))
    sign = np.array([1.0, -1.0, -1.0])
    for j in range(J):
        src = model.joint_mirror[j]
        for c in range(3):
            P[3 * j + c, 3 * src + c] = sign[c]
    return P


def generator_pose_moments(mean, cov, pool, cfg):
    """Mean and covariance of the pose distribution ``sample_scene`` draws from."""
    X = np.asarray(pool, dtype=np.float64).reshape(len(pool), -1)
    D = X.shape[1]
    s2 = cfg.pose_scale ** 2
    dev = X - mean
    pool_cov = s2 * dev.T @ dev / len(X) + cfg.pool_noise ** 2 * np.eye(D)
    pool_mean = mean + cfg.pose_scale * dev.mean(0)
    fg = cfg.gaussian_fraction if cfg.use_gaussian else 0.0
    m = fg * mean + (1 - fg) * pool_mean
    C = fg * (s2 * cov + np.outer(mean - m, mean - m)) + (1 - fg) * (pool_cov + np.outer(pool_mean - m, pool_mean - m))
    return m, C


def make_pose_prior(model, mean, cov, ridge=1e-4):
    """Mirror-symmetric Gaussian prior over the non-root joints."""
    P = pose_mirror_operator(model)
    mm = P @ mean
    d = mean - mm
    m = 0.5 * (mean + mm)
    C = 0.5 * (cov + P @ cov @ P.T) + 0.25 * np.outer(d, d)
    roots = set(np.nonzero(np.asarray(model.parent) < 0)[0].tolist())
    joints = np.array([j for j in range(model.n_joints) if j not in roots], dtype=np.int64)
    sel = (3 * joints[:, None] + np.arange(3)).ravel()
    Cs = C[np.ix_(sel, sel)] + ridge * np.eye(len(sel))
    return GaussianPosePrior(m[sel], np.linalg.inv(Cs), joints)


def default_pose_prior(model, cfg=None):
    cfg = cfg or GenConfig()
    pool = default_pose_pool(model, cfg.pool_size, cfg.seed)
    mean, cov = fit_pose_gaussian(pool, per_joint=cfg.per_joint)
    return make_pose_prior(model, *generator_pose_moments(mean, cov, pool, cfg))


# ----------------------------------------------------------------------
# scenes


@dataclass
class Scene:
    theta: np.ndarray
    gamma: np.ndarray
    focal: float
    shape: np.ndarray
    subject: int = 0
    texture: int = 0
    jitter: dict = field(default_factory=lambda: {"brightness": 0.0, "hue": 0.0, "saturation": 0.0})
    background: int = 0                 # seed of the procedural background, or file index
    source: str = "reference"

    def to_dict(self):
        return {"theta": self.theta.ravel().tolist(), "gamma": self.gamma.tolist(), "focal": self.focal,
                "shape": self.shape.tolist(), "subject": self.subject, "texture": self.texture,
                "jitter": dict(self.jitter), "background": self.background, "source": self.source}

    def mirrored(self, model):
        st = PoseState(self.theta, self.gamma, 0.0, self.shape).mirrored(model)
        return Scene(st.theta, st.gamma, self.focal, self.shape.copy(), self.subject, self.texture,
                     dict(self.jitter), self.background, self.source)


def reference_scene(model, mean_pose=None):
    theta = np.zeros((model.n_joints, 3))
    theta[0] = [0.0, np.pi / 2, 0.0]
    if mean_pose is not None:
        theta = np.asarray(mean_pose, dtype=np.float64).reshape(-1, 3).copy()
    return Scene(theta, np.array(GAMMA_0), REFERENCE_FOCAL, np.zeros(model.n_features))


class SceneSampler:
    """Draws scenes for a dataset; holds the pose distribution and subject shapes."""

    def __init__(self, model, cfg, pool=None):
        self.model = model
        self.cfg = cfg
        self.pool = default_pose_pool(model, cfg.pool_size, cfg.seed) if pool is None else \
            np.asarray(pool, dtype=np.float64).reshape(len(pool), -1)
        self.mean, self.cov = fit_pose_gaussian(self.pool, per_joint=cfg.per_joint)
        w, U = np.linalg.eigh(self.cov)
        self._sqrt = U * np.sqrt(np.clip(w, 0.0, None))
        srng = np.random.default_rng([cfg.seed, 1 << 20])
        F = model.n_features
        active = min(cfg.shape_active, F)
        self.subject_shapes = np.zeros((cfg.n_subjects, F))
        self.subject_shapes[:, :active] = cfg.shape_sigma * srng.standard_normal((cfg.n_subjects, active))

    def prior(self):
        return make_pose_prior(self.model, *generator_pose_moments(self.mean, self.cov, self.pool, self.cfg))

    def sample(self, rng, subject=0):
        """One scene; every random quantity comes from ``rng``."""
        cfg, model = self.cfg, self.model
        D = self.mean.size
        gaussian = cfg.use_gaussian and rng.random() < cfg.gaussian_fraction
        if gaussian:
            theta = self.mean + cfg.pose_scale * (self._sqrt @ rng.standard_normal(D))
        else:
            k = int(rng.integers(len(self.pool)))
            theta = self.mean + cfg.pose_scale * (self.pool[k] - self.mean) + cfg.pool_noise * rng.standard_normal(D)
        gamma = np.array(GAMMA_0) + np.asarray(cfg.trans_sigma) * rng.standard_normal(3)
        # framing is resolution independent: the focal length scales with the image
        focal = REFERENCE_FOCAL * (cfg.size / IMAGE_SIZE) * (1.0 + cfg.focal_sigma * rng.standard_normal())
        active = min(cfg.shape_active, model.n_features)
        shape = self.subject_shapes[subject].copy()
        shape[:active] += cfg.shape_noise * rng.standard_normal(active)
        jit = {"brightness": float(rng.uniform(-1, 1) * cfg.brightness),
               "hue": float(rng.uniform(-1, 1) * cfg.hue),
               "saturation": float(rng.uniform(-1, 1) * cfg.saturation)}
        n_tex = cfg.textures_per_subject * (2 if cfg.white_balance else 1)
        texture = int(rng.integers(n_tex))
        background = int(rng.integers(2 ** 31))
        return Scene(theta.reshape(-1, 3), gamma, float(focal), shape, subject, texture, jit,
                     background, "gaussian" if gaussian else "pool")


def sample_scene(sampler, rng, subject=0):
    """Draw the next scene of ``subject`` from ``rng``."""
    return sampler.sample(rng, subject)


# ----------------------------------------------------------------------
# appearance


def _smooth_noise(rng, shape, scale):
    n = rng.standard_normal(shape)
    return ndimage.gaussian_filter(n, scale, mode="wrap") * scale


def procedural_atlas(model, rng, tint=None):
    """Zebra-like stripes defined on the template surface, quantized to 8 bits."""
    tmap = textel_map(model)
    P, rows, cols = textel_points(model, tmap, model.vertices)
    freq = rng.uniform(5.0, 8.0)
    wob = rng.uniform(0.5, 1.5)
    phase = rng.uniform(0, 2 * np.pi)
    s = np.sin(2 * np.pi * freq * (P[:, 2] + 0.25 * np.sin(wob * 2 * np.pi * P[:, 1]) + 0.1 * np.abs(P[:, 0]))
               + phase)
    band = 1.0 / (1.0 + np.exp(-1.5 * s))           # edges span ~3 textels: band-limited for the atlas grid
    dark = np.array([0.08, 0.07, 0.06]) + 0.04 * rng.random(3)
    light = np.array([0.85, 0.82, 0.76]) if tint is None else np.asarray(tint)
    light = np.clip(light + 0.05 * rng.standard_normal(3), 0.0, 1.0)
    belly = np.clip((P[:, 1] - P[:, 1].min()) / np.ptp(P[:, 1]), 0.0, 1.0)[:, None]
    col = dark + band[:, None] * (light - dark)
    col = col * (1.0 - 0.15 * belly) + 0.15 * belly * light
    S = model.atlas_size
    img = np.tile(col.mean(0), (S, S, 1))
    img[rows, cols] = col
    return TextureAtlas(quantize(img), model.region_layout)


def quantize(x):
    return np.round(np.clip(x, 0.0, 1.0) * 255.0) / 255.0


def white_balance_atlas(atlas):
    """Gray-world balance: rescale channels so their means are equal.

    The common target is the mean of the channel means, lowered if needed
    so that no value leaves [0, 1]; the equalization is then exact.
    """
    img = atlas.image if isinstance(atlas, TextureAtlas) else np.asarray(atlas, dtype=np.float64)
    means = img.reshape(-1, 3).mean(0)
    if np.any(means <= 0):
        warnings.warn("white balance of an atlas with an all-black channel; returned unchanged",
                      RuntimeWarning, stacklevel=2)
        out = img.copy()
    else:
        peak = img.reshape(-1, 3).max(0)
        target = min(means.mean(), float(np.min(means / peak)))
        out = np.clip(img * (target / means), 0.0, 1.0)
    return TextureAtlas(out, atlas.layout) if isinstance(atlas, TextureAtlas) else out


def subject_atlases(model, cfg, subject):
    """Texture set of one subject (with gray-world copies when enabled)."""
    out = []
    for t in range(cfg.textures_per_subject):
        a = procedural_atlas(model, np.random.default_rng([cfg.seed, 1 << 21, subject, t]))
        out.append(a)
        if cfg.white_balance:
            out.append(TextureAtlas(quantize(white_balance_atlas(a).image), a.layout))
    return out


def procedural_background(seed, size, base=(0.55, 0.5, 0.38), variation=0.04):
    """Low-contrast ground/sky style background: gradient plus smooth and fine noise."""
    rng = np.random.default_rng(seed)
    base = np.asarray(base) + variation * rng.standard_normal(3)
    yy, xx = np.mgrid[0:size, 0:size] / size
    ang = rng.uniform(0, 2 * np.pi)
    grad = (np.cos(ang) * (xx - 0.5) + np.sin(ang) * (yy - 0.5))[..., None] * rng.uniform(-0.1, 0.1, 3)
    small = size // 8
    coarse = np.stack([_smooth_noise(rng, (small, small), 3.0) for _ in range(3)], -1)
    coarse = ndimage.zoom(coarse, (size / small, size / small, 1), order=1)[:size, :size]
    fine = 0.015 * rng.standard_normal((size, size, 1))
    return np.clip(base + grad + 0.04 * coarse + fine, 0.0, 1.0)


def load_background(files, index, size):
    from PIL import Image
    with Image.open(files[index % len(files)]) as im:
        im = im.convert("RGB")
        w, h = im.size
        s = min(w, h)
        im = im.crop(((w - s) // 2, (h - s) // 2, (w - s) // 2 + s, (h - s) // 2 + s))
        return np.asarray(im.resize((size, size), Image.BILINEAR), dtype=np.float64) / 255.0


def photometric_jitter(image, jitter):
    """HSV jitter: hue shift (turns), relative saturation and brightness changes."""
    hsv = mcolors.rgb_to_hsv(np.clip(image, 0.0, 1.0))
    hsv[..., 0] = np.mod(hsv[..., 0] + jitter.get("hue", 0.0), 1.0)
    hsv[..., 1] = np.clip(hsv[..., 1] * (1.0 + jitter.get("saturation", 0.0)), 0.0, 1.0)
    hsv[..., 2] = np.clip(hsv[..., 2] * (1.0 + jitter.get("brightness", 0.0)), 0.0, 1.0)
    return mcolors.hsv_to_rgb(hsv)


# ----------------------------------------------------------------------
# samples


class SceneRejected(ValueError):
    pass


@dataclass
class AnnotationRecord:
    image: np.ndarray              # (H, W, 3)
    mask: np.ndarray               # (H, W) hard silhouette
    keypoints: np.ndarray          # (28, 2) pixels
    visibility: np.ndarray         # (28,) inside the frame
    occluded: np.ndarray           # (28,) hidden by the body
    atlas: TextureAtlas
    uvflow: UVFlow
    scene: Scene
    camera: CameraParams
    dv: np.ndarray                 # (V, 3) full-mesh shape displacement

    def state(self, fit_camera=None):
        cam = fit_camera or self.camera
        return PoseState(self.scene.theta, self.scene.gamma, focal_feature(cam, self.scene.focal),
                         self.scene.shape)

    @property
    def view(self):
        return View(self.scene.focal, tuple(self.camera.principal_point), self.camera.width, self.camera.height)


def synth_camera(size=IMAGE_SIZE):
    return CameraParams(f0=REFERENCE_FOCAL, f1=REFERENCE_FOCAL, width=size, height=size)


def generate_sample(model, atlas, scene, background, camera=None, check=True):
    """Render one annotated frame. Raises ``SceneRejected`` for unusable scenes."""
    camera = camera or synth_camera(np.shape(background)[0])
    view = View(scene.focal, tuple(camera.principal_point), camera.width, camera.height)
    posed = pose_model(model, scene.theta, scene.shape, scene.gamma)
    if np.any(posed.vertices[:, 2] <= 0.1):
        raise SceneRejected("mesh behind the camera")
    frags = rasterize_hard(posed.vertices, model.faces, view)
    mask = frags.mask
    if not mask.any():
        raise SceneRejected("empty silhouette")
    if mask[0].any() or mask[-1].any() or mask[:, 0].any() or mask[:, -1].any():
        raise SceneRejected("silhouette touches the frame border")
    kp = project(posed.landmarks, view.f, view.pp)
    vis = (kp[:, 0] >= 0) & (kp[:, 0] < view.width) & (kp[:, 1] >= 0) & (kp[:, 1] < view.height)
    ij = np.clip(np.floor(kp).astype(int), 0, [view.width - 1, view.height - 1])
    occluded = frags.depth[ij[:, 1], ij[:, 0]] < posed.landmarks[:, 2] - 0.05
    fg = render_textured(posed.vertices, model.faces, model.face_uvs, view, atlas).color
    bg = np.asarray(background, dtype=np.float64)
    img = np.where(mask[..., None], fg, bg)
    img = quantize(photometric_jitter(img, scene.jitter))
    flow = compute_uvflow(model, posed.vertices, view, frags)
    dv = shape_displacement(model, scene.shape)
    rec = AnnotationRecord(img, mask.astype(np.float64), kp, vis, occluded, atlas, flow, scene, camera, dv)
    if check:
        check_record(model, rec)
    return rec


def check_record(model, rec, min_iou=0.999, max_kp_px=0.5):
    """Re-render from the stored parameters and compare with the stored annotation."""
    sc = rec.scene
    posed = pose_model(model, np.asarray(sc.theta), np.asarray(sc.shape), np.asarray(sc.gamma))
    view = rec.view
    m = rasterize_hard(posed.vertices, model.faces, view).mask
    k = project(posed.landmarks, view.f, view.pp)
    i = iou(rec.mask, m)
    err = float(np.abs(k - rec.keypoints).max())
    if i < min_iou or err > max_kp_px:
        raise SceneRejected(f"re-render mismatch: IoU {i:.4f}, keypoint error {err:.3f} px")
    return i, err


class Generator:
    """Produces dataset samples by index; stateless between calls."""

    def __init__(self, model, cfg):
        self.model = model
        self.cfg = cfg
        self.sampler = SceneSampler(model, cfg)
        self.atlases = [subject_atlases(model, cfg, s) for s in range(cfg.n_subjects)]
        self.bg_files = background_files(cfg.background_dir) if cfg.background_dir else []
        self.camera = synth_camera(cfg.size)

    def background(self, scene):
        if self.bg_files:
            return load_background(self.bg_files, scene.background, self.cfg.size)
        return procedural_background(scene.background, self.cfg.size, self.cfg.background_color,
                                     self.cfg.background_variation)

    def sample(self, index):
        cfg = self.cfg
        subject = index // cfg.images_per_subject
        rng = np.random.default_rng([cfg.seed, index])
        for attempt in range(cfg.max_attempts):
            scene = self.sampler.sample(rng, subject)
            try:
                atlas = self.atlases[subject][scene.texture]
                return generate_sample(self.model, atlas, scene, self.background(scene), self.camera)
            except SceneRejected as exc:
                log.info("sample %d attempt %d rejected: %s", index, attempt, exc)
        raise SceneRejected(f"sample {index}: no valid scene in {cfg.max_attempts} attempts")


# ----------------------------------------------------------------------
# dataset files

SUBDIRS = ("images", "masks", "atlases", "uvflow", "annot")


def record_to_json(rec, sample_id, paths):
    return {"id": sample_id, **paths,
            "camera": rec.camera.to_dict(),
            "theta": rec.scene.theta.ravel().tolist(), "gamma": rec.scene.gamma.tolist(),
            "focal": rec.scene.focal, "shape": rec.scene.shape.tolist(), "dv": rec.dv.tolist(),
            "keypoints": rec.keypoints.tolist(), "visibility": rec.visibility.astype(int).tolist(),
            "occluded": rec.occluded.astype(int).tolist(),
            "scene": rec.scene.to_dict()}


def write_sample(root, index, rec):
    root = Path(root)
    sid = f"{index:06d}"
    paths = {"image": f"images/{sid}.png", "mask": f"masks/{sid}.png", "atlas": f"atlases/{sid}.png",
             "uvflow": f"uvflow/{sid}.flow", "annot": f"annot/{sid}.json"}
    io.write_image(root / paths["image"], rec.image)
    io.write_mask(root / paths["mask"], rec.mask)
    io.write_image(root / paths["atlas"], rec.atlas.image)
    rec.uvflow.save(root / paths["uvflow"])
    io.write_json(root / paths["annot"], record_to_json(rec, sid, paths))
    return sid, paths


def load_sample(root, sid):
    """Annotation dict plus decoded image, mask, atlas and uv-flow."""
    root = Path(root)
    ann = io.read_json(root / "annot" / f"{sid}.json")
    ann["image_data"] = io.read_image(root / ann["image"])
    ann["mask_data"] = io.read_mask(root / ann["mask"])
    ann["atlas_data"] = io.read_image(root / ann["atlas"])
    ann["uvflow_data"] = UVFlow.load(root / ann["uvflow"])
    return ann


_WORKER = {}


def _make_one(args):
    root, index = args
    rec = _WORKER["gen"].sample(index)
    sid, paths = write_sample(root, index, rec)
    return index, sid, paths, rec.scene.to_dict()


def _init_worker(model, cfg):
    _WORKER["gen"] = Generator(model, cfg)


def write_dataset(root, model, cfg, jobs=1, indices=None):
    """Generate the dataset tree and its manifest; returns the manifest dict."""
    root = Path(root)
    for d in SUBDIRS:
        (root / d).mkdir(parents=True, exist_ok=True)
    indices = list(range(cfg.n_images)) if indices is None else list(indices)
    gen = Generator(model, cfg)
    if jobs > 1:
        import multiprocessing as mp
        with mp.get_context("fork").Pool(jobs, _init_worker, (model, cfg)) as pool:
            results = pool.map(_make_one, [(root, i) for i in indices])
    else:
        _WORKER["gen"] = gen
        try:
            results = [_make_one((root, i)) for i in indices]
        finally:
            _WORKER.pop("gen", None)
    results.sort(key=lambda r: r[0])
    prior = gen.sampler.prior()
    io.write_json(root / "pose_prior.json", prior.to_dict())
    samples = []
    for index, sid, paths, scene in results:
        samples.append({"id": sid, "index": index, **paths,
                        "annot_sha256": io.file_hash(root / paths["annot"]),
                        "subject": scene["subject"], "source": scene["source"]})
    from . import __version__
    manifest = {"tool_version": __version__, "seed": cfg.seed, "config": cfg.to_dict(),
                "pose_prior": "pose_prior.json", "samples": samples}
    io.write_json(root / "manifest.json", manifest)
    return manifest
