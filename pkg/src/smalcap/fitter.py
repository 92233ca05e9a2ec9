"""Staged gradient-based model fitting and photometric refinement.

Fits run in a square crop around the subject, resampled to ``crop_size``;
the crop camera follows ``View.crop`` so the parameters stay those of the
full frame. Parameters are optimized as raw values: ``trans`` feeds
``effective_translation`` and ``focal`` is ``x`` in ``f = f0 + f1 x``.
"""

from __future__ import annotations

import csv
import logging
import time
import warnings
from dataclasses import dataclass, field, replace
from functools import lru_cache
from pathlib import Path

import numpy as np
from scipy import sparse

from . import io
from . import objectives as obj
from .body_model import PoseState, pose_model
from .camera import (CameraParams, View, effective_camera, effective_translation, mask_bounds,
                     point_bounds, project, project_vjp, raw_translation, square_box, to_normalized)
from .optim import AdamConfig, AdamState, adam_step
from .render import (TextureAtlas, bilinear_sample, rasterize_hard, rasterize_silhouette,
                     render_textured)

VARIABLES = ("theta", "trans", "focal", "shape", "dv", "texture")
TERMS = ("kp2d", "mask", "photo", "cam", "trans", "pose_prior", "shape_prior", "laplacian")
MIN_KEYPOINTS = 6

log = logging.getLogger(__name__)


@dataclass
class Stage:
    name: str
    variables: tuple
    losses: tuple
    iterations: int
    lr: dict                      # learning rate per variable
    keypoints: str = "all"        # "all" or "torso"
    decay: float = 0.1            # lr multiplier reached at the last iteration
    tol: float = 1e-12            # stop once the stage loss is at or below this

    def __post_init__(self):
        self.variables = tuple(self.variables)
        self.losses = tuple(self.losses)
        for v in self.variables:
            if v not in VARIABLES:
                raise ValueError(f"stage '{self.name}': unknown variable '{v}'")
        for t in self.losses:
            if t not in TERMS:
                raise ValueError(f"stage '{self.name}': unknown loss '{t}'")
        if self.iterations <= 0:
            raise ValueError(f"stage '{self.name}': iterations must be positive")
        missing = [v for v in self.variables if v not in self.lr]
        if missing:
            raise ValueError(f"stage '{self.name}': no learning rate for {missing}")
        if any(not lr > 0 for lr in self.lr.values()):
            raise ValueError(f"stage '{self.name}': learning rates must be positive")
        if self.keypoints not in ("all", "torso"):
            raise ValueError(f"stage '{self.name}': keypoints must be 'all' or 'torso'")
        if not 0 < self.decay <= 1:
            raise ValueError(f"stage '{self.name}': decay must lie in (0, 1]")
        if self.tol < 0:
            raise ValueError(f"stage '{self.name}': tol must be non-negative")

    def to_dict(self):
        return {"name": self.name, "variables": list(self.variables), "losses": list(self.losses),
                "iterations": self.iterations, "lr": dict(self.lr), "keypoints": self.keypoints,
                "decay": self.decay, "tol": self.tol}

    @classmethod
    def from_dict(cls, d):
        return cls(d["name"], d["variables"], d["losses"], int(d["iterations"]),
                   {k: float(v) for k, v in d["lr"].items()}, d.get("keypoints", "all"),
                   float(d.get("decay", 0.1)), float(d.get("tol", 1e-12)))


_LR = {"theta": 0.02, "trans": 0.05, "focal": 0.01, "shape": 0.05, "dv": 1e-3, "texture": 0.01}


def default_stages():
    return [
        Stage("camera", ("trans", "focal"), ("kp2d", "cam"), 60, dict(_LR), keypoints="torso"),
        Stage("pose", ("theta", "trans", "focal"), ("kp2d", "cam", "pose_prior"), 150, dict(_LR)),
        Stage("shape", ("theta", "trans", "focal", "shape"),
              ("kp2d", "mask", "cam", "pose_prior", "shape_prior"), 200, dict(_LR), decay=0.01),
    ]


def default_refine_stage(iterations=120):
    lr = {"theta": 0.005, "trans": 0.01, "focal": 0.002, "shape": 0.01, "texture": 0.01}
    return Stage("refine", ("theta", "trans", "focal", "shape"),
                 ("photo", "cam", "trans", "pose_prior", "shape_prior"), iterations, lr, decay=0.3)


@dataclass
class FitConfig:
    stages: list = field(default_factory=default_stages)
    refine: Stage = field(default_factory=default_refine_stage)
    adam: AdamConfig = field(default_factory=AdamConfig)
    weights: obj.LossWeights = field(default_factory=obj.LossWeights)
    camera: CameraParams = field(default_factory=CameraParams)
    crop_size: int = 256
    crop_margin: float = 0.1
    use_crop: bool = True
    sigma: float = 0.25
    photo_levels: int = 3
    pose_prior_weight: float = 0.01
    shape_prior_weight: float = 0.01
    laplacian_weight: float = 1.0
    free_dv: bool = False
    low_confidence_threshold: float = 0.02
    seed: int = 0

    def __post_init__(self):
        if not self.stages:
            raise ValueError("at least one stage is required")
        if self.crop_size <= 0:
            raise ValueError("crop_size must be positive")
        if self.sigma <= 0:
            raise ValueError("sigma must be positive")
        for name in ("pose_prior_weight", "shape_prior_weight", "laplacian_weight", "crop_margin"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")

    def to_dict(self):
        return {"stages": [s.to_dict() for s in self.stages], "refine": self.refine.to_dict(),
                "adam": vars(self.adam).copy(), "weights": self.weights.to_dict(),
                "camera": self.camera.to_dict(), "crop_size": self.crop_size,
                "crop_margin": self.crop_margin, "use_crop": self.use_crop, "sigma": self.sigma,
                "photo_levels": self.photo_levels, "pose_prior_weight": self.pose_prior_weight,
                "shape_prior_weight": self.shape_prior_weight,
                "laplacian_weight": self.laplacian_weight, "free_dv": self.free_dv,
                "low_confidence_threshold": self.low_confidence_threshold, "seed": self.seed}

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        kw = {}
        if "stages" in d:
            kw["stages"] = [Stage.from_dict(s) for s in d.pop("stages")]
        if "refine" in d:
            kw["refine"] = Stage.from_dict(d.pop("refine"))
        if "adam" in d:
            kw["adam"] = AdamConfig(**d.pop("adam"))
        if "weights" in d:
            kw["weights"] = obj.LossWeights.from_dict(d.pop("weights"))
        if "camera" in d:
            kw["camera"] = CameraParams.from_dict(d.pop("camera"))
        known = {"crop_size", "crop_margin", "use_crop", "sigma", "photo_levels", "pose_prior_weight",
                 "shape_prior_weight", "laplacian_weight", "free_dv", "low_confidence_threshold", "seed"}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown fit config field(s): {sorted(unknown)}")
        return cls(**kw, **d)


@dataclass
class Observation:
    """One image with its annotations, in full-frame pixels."""

    image: np.ndarray | None = None        # (H, W, 3)
    keypoints: np.ndarray | None = None    # (28, 2)
    visibility: np.ndarray | None = None   # (28,)
    mask: np.ndarray | None = None         # (H, W)
    width: int | None = None
    height: int | None = None

    def __post_init__(self):
        for src in (self.image, self.mask):
            if src is not None:
                h, w = np.shape(src)[:2]
                if self.width is None:
                    self.width, self.height = w, h
                elif (w, h) != (self.width, self.height):
                    raise ValueError("image and mask sizes differ")
        if self.width is None:
            raise ValueError("observation needs an image, a mask or an explicit size")
        if self.keypoints is not None:
            self.keypoints = np.asarray(self.keypoints, dtype=np.float64)
            if self.visibility is None:
                self.visibility = np.ones(len(self.keypoints), dtype=bool)
            self.visibility = np.asarray(self.visibility, dtype=bool)

    def mirrored(self, model):
        """The horizontally flipped observation, with left/right labels swapped."""
        kp = vis = None
        if self.keypoints is not None:
            lm = model.landmark_mirror
            kp = self.keypoints[lm].copy()
            kp[:, 0] = self.width - kp[:, 0]
            vis = self.visibility[lm].copy()
        return Observation(None if self.image is None else self.image[:, ::-1].copy(), kp, vis,
                           None if self.mask is None else self.mask[:, ::-1].copy(),
                           self.width, self.height)


@dataclass
class FitResult:
    state: PoseState
    traces: dict                      # stage name -> total loss per iteration
    terms: dict                       # final unweighted term values
    photo_trace: list = field(default_factory=list)
    best: dict | None = None          # {"iteration", "photo"} of the retained iterate
    wall_time: float = 0.0
    metrics: dict = field(default_factory=dict)
    low_confidence: bool = False
    crop: dict | None = None
    texture: np.ndarray | None = None

    def to_dict(self):
        return {"state": self.state.to_dict(), "traces": self.traces, "terms": self.terms,
                "photo_trace": self.photo_trace, "best": self.best, "wall_time": self.wall_time,
                "metrics": self.metrics, "low_confidence": self.low_confidence, "crop": self.crop}


# ----------------------------------------------------------------------
# parameter packing


def full_view(camera, f, width=None, height=None):
    width = camera.width if width is None else width
    height = camera.height if height is None else height
    cam = camera if (width, height) == (camera.width, camera.height) else replace(camera, width=width, height=height)
    return View(float(f), tuple(cam.principal_point), int(width), int(height))


def state_to_params(state, camera, model, free_dv=False):
    p = {"theta": state.theta.copy(),
         "trans": raw_translation(state.gamma, camera.gamma_z0),
         "focal": np.array([state.focal_x]),
         "shape": np.zeros(model.n_features) if state.shape is None else state.shape.copy()}
    if free_dv:
        p["dv"] = np.zeros((len(model.half_index), 3)) if state.dv is None else state.dv.copy()
    return p


def params_to_state(p, camera):
    return PoseState(p["theta"].copy(), effective_translation(p["trans"], camera.gamma_z0),
                     float(p["focal"][0]), p["shape"].copy(), None if "dv" not in p else p["dv"].copy())


def crop_window(obs, margin=0.1):
    """Square (origin, size) around the mask, or the visible keypoints without one."""
    if obs.mask is not None and np.any(np.asarray(obs.mask) > 0.5):
        lo, hi = mask_bounds(obs.mask)
    elif obs.keypoints is not None and obs.visibility.any():
        lo, hi = point_bounds(obs.keypoints[obs.visibility])
    else:
        raise ValueError("cannot place a crop without a mask or keypoints")
    return square_box(lo, hi, margin)


def resample_crop(image, origin, size, out):
    """Bilinear resample of the square window ``origin + [0, size)^2`` to ``out`` pixels."""
    c = (np.arange(out) + 0.5) * (size / out)
    xx, yy = np.meshgrid(origin[0] + c, origin[1] + c)
    img = np.asarray(image, dtype=np.float64)
    vals = bilinear_sample(img, xx.ravel(), yy.ravel())
    return vals.reshape((out, out) + img.shape[2:])


@lru_cache(maxsize=8)
def mesh_laplacian(model):
    """Uniform graph Laplacian (V, V) of the template connectivity."""
    f = model.faces
    i = np.concatenate([f[:, 0], f[:, 1], f[:, 2], f[:, 1], f[:, 2], f[:, 0]])
    j = np.concatenate([f[:, 1], f[:, 2], f[:, 0], f[:, 0], f[:, 1], f[:, 2]])
    V = model.n_vertices
    A = sparse.coo_matrix((np.ones(len(i)), (i, j)), shape=(V, V)).tocsr()
    A.data[:] = 1.0
    deg = np.asarray(A.sum(1)).ravel()
    return (sparse.eye(V) - sparse.diags(1.0 / deg) @ A).tocsr()


# ----------------------------------------------------------------------
# objective


class Problem:
    """Loss and gradient of one observation as a function of raw parameters."""

    def __init__(self, model, obs, config, prior=None, anchors=None, atlas=None, background=None,
                 crop=None):
        self.model = model
        self.obs = obs
        self.cfg = config
        self.prior = prior
        self.anchors = anchors or {}
        self.atlas = None if atlas is None else (atlas.image if isinstance(atlas, TextureAtlas)
                                                 else np.asarray(atlas, dtype=np.float64))
        self.background = None if background is None else np.asarray(background, dtype=np.float64)
        cam = config.camera
        self.camera = cam if (cam.width, cam.height) == (obs.width, obs.height) else \
            replace(cam, width=obs.width, height=obs.height)
        if config.use_crop:
            origin, size = crop if crop is not None else crop_window(obs, config.crop_margin)
            self.origin, self.size_in = np.asarray(origin, dtype=np.float64), float(size)
            self.out = config.crop_size
        else:
            self.origin, self.size_in = np.zeros(2), float(max(obs.width, obs.height))
            self.out = None
        self._prepare()

    def _prepare(self):
        obs = self.obs
        base = full_view(self.camera, 1.0)
        if self.out is None:
            self.scale = 1.0
            self.W, self.H = obs.width, obs.height
            self.pp = np.asarray(base.pp)
            self.image = None if obs.image is None else np.asarray(obs.image, dtype=np.float64)
            self.mask = None if obs.mask is None else np.asarray(obs.mask, dtype=np.float64)
            kp = obs.keypoints
        else:
            cv = base.crop(self.origin, self.size_in, self.out)
            self.scale = self.out / self.size_in
            self.W = self.H = self.out
            self.pp = np.asarray(cv.pp)
            self.image = None if obs.image is None else resample_crop(obs.image, self.origin, self.size_in, self.out)
            self.mask = None if obs.mask is None else resample_crop(obs.mask, self.origin, self.size_in, self.out)
            kp = None if obs.keypoints is None else (obs.keypoints - self.origin) * self.scale
        self.kp_norm = None if kp is None else to_normalized(kp, self.W, self.H)
        self.torso = np.zeros(len(self.model.landmark_vertices), dtype=bool)
        names = list(self.model.landmark_names)
        for n in self.model.torso_landmarks:
            self.torso[names.index(n)] = True

    @property
    def crop(self):
        return {"origin": self.origin.tolist(), "size": self.size_in, "out": self.out}

    def view(self, p):
        f = effective_camera(self.camera, p["focal"][0])
        return View(f * self.scale, tuple(self.pp), self.W, self.H), f

    def evaluate(self, p, losses, keypoints="all", need_grad=True):
        model, cfg, w = self.model, self.cfg, self.cfg.weights
        gamma = effective_translation(p["trans"], self.camera.gamma_z0)
        view, f_full = self.view(p)
        posed = pose_model(model, p["theta"], p["shape"], gamma, p.get("dv"))
        terms, total = {}, 0.0
        g_verts = np.zeros_like(posed.vertices)
        g_lm = np.zeros_like(posed.landmarks)
        g_fv = 0.0                                   # d / d(crop focal)
        g = {"theta": np.zeros_like(p["theta"]), "shape": np.zeros_like(p["shape"]),
             "trans": np.zeros(3), "focal": np.zeros(1)}
        g_full_f = 0.0                               # d / d(full-frame focal)
        render = None

        if "kp2d" in losses and w.kp2d > 0:
            if self.kp_norm is None:
                raise ValueError("keypoint loss needs keypoints")
            vis = self.obs.visibility & (self.torso if keypoints == "torso" else True)
            uv = project(posed.landmarks, view.f, view.pp)
            val, gn = obj.keypoint_loss(self.kp_norm, to_normalized(uv, self.W, self.H), vis, grad=True)
            terms["kp2d"] = val
            total += w.kp2d * val
            guv = w.kp2d * gn * np.array([2.0 / self.W, 2.0 / self.H])
            gp, gf = project_vjp(posed.landmarks, view.f, guv)
            g_lm += gp
            g_fv += gf

        if "mask" in losses and w.mask > 0:
            if self.mask is None:
                raise ValueError("mask loss needs a mask")
            sil = rasterize_silhouette(posed.vertices, model.faces, view, cfg.sigma)
            val, gA = obj.mask_loss(self.mask, sil.silhouette, grad=True)
            terms["mask"] = val
            total += w.mask * val
            if need_grad:
                gv, gf = sil.backward(w.mask * gA)
                g_verts += gv
                g_fv += gf

        if "photo" in losses and w.photo > 0:
            if self.image is None or self.atlas is None or self.background is None:
                raise ValueError("photometric loss needs an image, an atlas and a background")
            atlas = p.get("texture", self.atlas)
            render = render_textured(posed.vertices, model.faces, model.face_uvs, view, atlas,
                                     background=self.background, sigma=cfg.sigma)
            val, gc = obj.photometric_loss(self.image, render.color, cfg.photo_levels, grad=True)
            terms["photo"] = val
            total += w.photo * val
            if need_grad:
                gv, gf = render.geometry_vjp(w.photo * gc)
                g_verts += gv
                g_fv += gf
                if "texture" in p:
                    g["texture"] = render.texture_vjp(w.photo * gc)

        if "cam" in losses and w.cam > 0 and "focal" in self.anchors:
            val, gf = obj.cam_loss(self.anchors["focal"], f_full, grad=True)
            terms["cam"] = val
            total += w.cam * val
            g_full_f += w.cam * float(gf)

        if "trans" in losses and w.trans > 0 and "gamma" in self.anchors:
            val, gt = obj.trans_loss(self.anchors["gamma"], gamma, grad=True)
            terms["trans"] = val
            total += w.trans * val
            g["trans"] += w.trans * gt

        if "pose_prior" in losses and self.prior is not None and cfg.pose_prior_weight > 0:
            val, gp = self.prior(p["theta"], grad=True)
            terms["pose_prior"] = val
            total += cfg.pose_prior_weight * val
            g["theta"] += cfg.pose_prior_weight * gp

        if "shape_prior" in losses and cfg.shape_prior_weight > 0:
            val, gs = obj.shape_loss(np.zeros_like(p["shape"]), p["shape"], grad=True)
            terms["shape_prior"] = val
            total += cfg.shape_prior_weight * val
            g["shape"] += cfg.shape_prior_weight * gs

        if "laplacian" in losses and "dv" in p and cfg.laplacian_weight > 0:
            L = mesh_laplacian(model)
            full = model.reflect(p["dv"])
            lap = L @ full
            val = float(np.mean(lap ** 2))
            terms["laplacian"] = val
            total += cfg.laplacian_weight * val
            g["dv"] = model.reflect_vjp(L.T @ (2.0 * lap / lap.size)) * cfg.laplacian_weight

        if not need_grad:
            return total, None, terms, render
        back = posed.vjp(g_verts, g_lm)
        g["theta"] += back["theta"]
        g["shape"] += back["shape"]
        g["trans"] += back["gamma"]
        if "dv" in p:
            g["dv"] = g.get("dv", 0.0) + back["dv"]
        g_full_f += g_fv * self.scale
        g["focal"][0] = g_full_f * self.camera.f1
        return total, g, terms, render


# ----------------------------------------------------------------------
# drivers


def _run_stage(problem, p, stage, hyper, on_iter=None):
    state = AdamState()
    trace = []
    T = stage.iterations
    for it in range(T):
        total, g, terms, _ = problem.evaluate(p, stage.losses, stage.keypoints)
        if total <= stage.tol:
            break
        trace.append(total)
        if on_iter is not None:
            on_iter(it, p, total, terms)
        decay = stage.decay ** (it / max(T - 1, 1))
        lr = {k: stage.lr[k] * decay for k in stage.variables}
        p, state = adam_step(p, {k: g[k] for k in stage.variables if k in g}, state, hyper, lr)
        if "texture" in p:
            p["texture"] = np.clip(p["texture"], 0.0, 1.0)
    total, _, terms, _ = problem.evaluate(p, stage.losses, stage.keypoints, need_grad=False)
    trace.append(total)
    if on_iter is not None:
        on_iter(T, p, total, terms)
    return p, trace, terms


def _check_keypoints(obs):
    if obs.keypoints is None or int(obs.visibility.sum()) < MIN_KEYPOINTS:
        raise ValueError(f"fitting needs at least {MIN_KEYPOINTS} visible keypoints")


def initial_state(model, obs, config=None, prior=None, mean_pose=None):
    """A keypoint-based starting state when no initialization is available.

    The articulated joints take the prior mean (or ``mean_pose``); each of the
    two profile facings is placed by matching the visible keypoints' extent
    and centroid at the default focal length, and the better fit is kept.
    """
    cfg = config or FitConfig()
    _check_keypoints(obs)
    vis = obs.visibility
    k2 = obs.keypoints[vis]
    view = full_view(cfg.camera, effective_camera(cfg.camera, 0.0), obs.width, obs.height)
    f, pp = view.f, np.asarray(view.pp)
    theta = np.zeros((model.n_joints, 3))
    if mean_pose is not None:
        theta[:] = np.asarray(mean_pose, dtype=np.float64).reshape(-1, 3)
    elif prior is not None:
        theta[prior.joints] = prior.mean.reshape(-1, 3)
    side2 = max(float(np.ptp(k2, axis=0).max()), 1.0)
    best = None
    for yaw in (np.pi / 2, -np.pi / 2):
        th = theta.copy()
        th[0] = (0.0, yaw, 0.0)
        L = pose_model(model, th).landmarks[vis]
        depth = f * float(np.ptp(L[:, :2], axis=0).max()) / side2
        c3 = L.mean(0)
        gamma = np.empty(3)
        gamma[2] = depth - c3[2]
        gamma[:2] = (k2.mean(0) - pp) * depth / f - c3[:2]
        kp = project(L + gamma, f, pp)
        err = float(np.sum((kp - k2) ** 2))
        if best is None or err < best[0]:
            best = (err, PoseState(th, gamma, 0.0, np.zeros(model.n_features)))
    return best[1]


def fit_supervised(obs, model, init, config=None, prior=None, use_mask=True, crop=None):
    """Staged keypoint (+ silhouette) fit starting from ``init``."""
    cfg = config or FitConfig()
    _check_keypoints(obs)
    if use_mask and obs.mask is None:
        raise ValueError("mask-supervised fit needs a mask; pass use_mask=False for keypoints only")
    t0 = time.perf_counter()
    f_init = effective_camera(cfg.camera, init.focal_x)
    problem = Problem(model, obs, cfg, prior, anchors={"focal": f_init}, crop=crop)
    p = state_to_params(init, cfg.camera, model, cfg.free_dv)
    traces, terms = {}, {}
    for stage in cfg.stages:
        losses = tuple(t for t in stage.losses if use_mask or t != "mask")
        variables = tuple(v for v in stage.variables if v != "dv" or cfg.free_dv)
        if cfg.free_dv and "shape" in variables and "dv" not in variables:
            variables += ("dv",)
            losses += ("laplacian",)
            lr = dict(stage.lr)
            lr.setdefault("dv", _LR["dv"])
            stage = replace(stage, lr=lr)
        p, traces[stage.name], terms = _run_stage(problem, p, replace(stage, variables=variables, losses=losses),
                                                  cfg.adam)
    state = params_to_state(p, cfg.camera)
    return FitResult(state, traces, terms, wall_time=time.perf_counter() - t0, crop=problem.crop)


def refine_photometric(obs, model, init, atlas, background, config=None, prior=None,
                       optimize_texture=False, crop=None):
    """Photometric refinement anchored at the initial focal length and translation.

    Keeps the iterate with the lowest photometric loss. The result is flagged
    low-confidence when the relative photometric decrease is below
    ``config.low_confidence_threshold``.
    """
    if atlas is None:
        raise ValueError("photometric refinement needs a texture atlas")
    if background is None:
        raise ValueError("photometric refinement needs a background colour")
    if obs.image is None:
        raise ValueError("photometric refinement needs an image")
    cfg = config or FitConfig()
    init_state = init.state if isinstance(init, FitResult) else init
    if crop is None and isinstance(init, FitResult) and init.crop is not None and cfg.use_crop:
        crop = (np.asarray(init.crop["origin"]), init.crop["size"])
    if crop is None and obs.mask is None:
        crop = _crop_from_state(model, init_state, obs, cfg)
    t0 = time.perf_counter()
    anchors = {"focal": effective_camera(cfg.camera, init_state.focal_x), "gamma": init_state.gamma.copy()}
    problem = Problem(model, obs, cfg, prior, anchors, atlas, background, crop=crop)
    p = state_to_params(init_state, cfg.camera, model, cfg.free_dv)
    stage = cfg.refine
    variables = stage.variables
    if optimize_texture:
        p["texture"] = problem.atlas.copy()
        variables = tuple(variables) + ("texture",)
    stage = replace(stage, variables=variables)

    best = {"photo": np.inf, "iteration": -1, "params": None}
    photo_trace = []

    def keep_best(it, params, total, terms):
        photo = terms["photo"]
        photo_trace.append(photo)
        if photo < best["photo"]:
            best.update(photo=photo, iteration=it, params={k: np.array(v) for k, v in params.items()})

    _, trace, _ = _run_stage(problem, p, stage, cfg.adam, on_iter=keep_best)
    p_best = best["params"]
    _, _, terms, _ = problem.evaluate(p_best, stage.losses, need_grad=False)
    start = photo_trace[0]
    decrease = (start - best["photo"]) / start if start > 0 else 0.0
    res = FitResult(params_to_state(p_best, cfg.camera), {"refine": trace}, terms, photo_trace,
                    {"iteration": best["iteration"], "photo": best["photo"], "relative_decrease": decrease},
                    time.perf_counter() - t0, crop=problem.crop,
                    low_confidence=bool(decrease < cfg.low_confidence_threshold),
                    texture=p_best.get("texture"))
    return res


def _crop_from_state(model, state, obs, cfg):
    """Crop around the initial state's projected hard mask (no mask supplied)."""
    view = full_view(cfg.camera, effective_camera(cfg.camera, state.focal_x), obs.width, obs.height)
    posed = pose_model(model, state.theta, state.shape, state.gamma, state.dv)
    m = rasterize_hard(posed.vertices, model.faces, view).mask
    if not m.any():
        raise ValueError("initial state does not project into the image")
    lo, hi = mask_bounds(m)
    return square_box(lo, hi, cfg.crop_margin)


# ----------------------------------------------------------------------
# evaluation


def predict(model, state, camera, width, height):
    """Full-frame keypoints and hard mask of a state."""
    view = full_view(camera, effective_camera(camera, state.focal_x), width, height)
    posed = pose_model(model, state.theta, state.shape, state.gamma, state.dv)
    kp = project(posed.landmarks, view.f, view.pp)
    mask = rasterize_hard(posed.vertices, model.faces, view).mask
    return kp, mask, posed


def evaluate_state(model, state, obs, camera, taus=(0.05, 0.1)):
    """PCK at each tau and IoU against whatever annotations ``obs`` carries."""
    kp, mask, _ = predict(model, state, camera, obs.width, obs.height)
    out = {}
    if obs.keypoints is not None and obs.visibility.any():
        side = obj.bbox_max_side(obs.keypoints[obs.visibility], obs.mask) if obs.mask is not None \
            else obj.bbox_max_side(obs.keypoints[obs.visibility])
        for tau in taus:
            out[f"pck{int(round(tau * 100)):02d}"] = obj.pck(obs.keypoints, kp, side, tau, obs.visibility)
    if obs.mask is not None:
        out["iou"] = obj.iou(obs.mask, mask)
    return out


# ----------------------------------------------------------------------
# batch fitting

METRIC_COLUMNS = ("pck05", "pck10", "iou")


def _sample_ids(root):
    manifest = root / "manifest.json"
    if manifest.exists():
        return [s["id"] for s in io.read_json(manifest)["samples"]]
    return sorted(p.stem for p in (root / "annot").glob("*.json"))


def observation_from_annotation(root, ann):
    """Observation for a dataset annotation; the image and mask are optional."""
    root = Path(root)
    image = io.read_image(root / ann["image"]) if ann.get("image") and (root / ann["image"]).exists() else None
    mask = io.read_mask(root / ann["mask"]) if ann.get("mask") and (root / ann["mask"]).exists() else None
    size = ann.get("camera", {})
    return Observation(image, ann.get("keypoints"), ann.get("visibility"), mask,
                       size.get("width") if image is None and mask is None else None,
                       size.get("height") if image is None and mask is None else None)


def _annotated_state(ann, camera):
    f = float(ann["focal"])
    return PoseState(ann["theta"], ann["gamma"], (f - camera.f0) / camera.f1, ann.get("shape"))


def _fit_one(root, sid, model, cfg, prior, init):
    ann = io.read_json(Path(root) / "annot" / f"{sid}.json")
    obs = observation_from_annotation(root, ann)
    state0 = _annotated_state(ann, cfg.camera) if init == "annotation" else initial_state(model, obs, cfg, prior)
    res = fit_supervised(obs, model, state0, cfg, prior, use_mask=obs.mask is not None)
    res.metrics = evaluate_state(model, res.state, obs, cfg.camera)
    return res


_BATCH = {}


def _batch_worker(sid):
    root, model, cfg, prior, init = _BATCH["args"]
    try:
        res = _fit_one(root, sid, model, cfg, prior, init)
        return {"sample_id": sid, "ok": True, "metrics": res.metrics, "state": res.state.to_dict(),
                "terms": res.terms, "wall_time": res.wall_time}
    except Exception as exc:
        log.warning("sample %s failed: %s", sid, exc)
        return {"sample_id": sid, "ok": False, "error": f"{type(exc).__name__}: {exc}"}


def aggregate_metrics(rows):
    """Mean of each metric over the rows that report it."""
    out = {}
    for col in METRIC_COLUMNS:
        vals = [r["metrics"][col] for r in rows if r.get("ok") and col in r.get("metrics", {})]
        if vals:
            out[col] = float(np.mean(vals))
    return out


def metric_records(rows):
    """Per-sample metric records ``{sample_id, pck05, pck10, iou}`` (failed samples omitted)."""
    return [{"sample_id": r["sample_id"], **{c: r["metrics"][c] for c in METRIC_COLUMNS if c in r["metrics"]}}
            for r in rows if r.get("ok")]


def batch_fit(directory, model, config=None, prior=None, jobs=1, init="auto", out=None):
    """Fit every sample of a dataset directory; failures are recorded, not raised.

    ``init`` is ``"auto"`` (keypoint-based start) or ``"annotation"`` (the
    stored parameters). With ``out`` the table is written as
    ``batch.json`` and ``batch.csv``.
    """
    root = Path(directory)
    cfg = config or FitConfig()
    if init not in ("auto", "annotation"):
        raise ValueError("init must be 'auto' or 'annotation'")
    if prior is None and (root / "pose_prior.json").exists():
        prior = obj.GaussianPosePrior.from_dict(io.read_json(root / "pose_prior.json"))
    ids = _sample_ids(root) if root.is_dir() else []
    if not ids:
        warnings.warn(f"no samples found in {root}")
    _BATCH["args"] = (root, model, cfg, prior, init)
    try:
        if jobs > 1 and len(ids) > 1:
            import multiprocessing as mp
            with mp.get_context("fork").Pool(jobs) as pool:
                rows = pool.map(_batch_worker, ids)
        else:
            rows = [_batch_worker(sid) for sid in ids]
    finally:
        _BATCH.pop("args", None)
    table = {"samples": rows, "aggregate": aggregate_metrics(rows),
             "n_ok": sum(r["ok"] for r in rows), "n_failed": sum(not r["ok"] for r in rows)}
    if out is not None:
        write_batch_table(out, table)
    return table


def write_batch_table(out, table):
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    io.write_json(out / "batch.json", table)
    with open(out / "batch.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("sample_id", "ok") + METRIC_COLUMNS + ("error",))
        for r in table["samples"]:
            m = r.get("metrics", {})
            w.writerow([r["sample_id"], int(r["ok"])] + [repr(m[c]) if c in m else "" for c in METRIC_COLUMNS]
                       + [r.get("error", "")])
