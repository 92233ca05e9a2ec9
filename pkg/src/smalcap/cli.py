"""Command-line entry points.

Every subcommand writes a ``run.json`` manifest next to its outputs listing
the command, the effective configuration, input hashes, output paths and
timing. Configuration layers as defaults < ``--config`` file < flags.
Exit codes: 0 success, 1 invalid input or configuration, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import __version__, io
from . import objectives as obj
from .body_model import BodyModel, PoseState, export_obj, pose_model
from .camera import CameraParams, effective_camera, project
from .fitter import (FitConfig, Observation, aggregate_metrics, batch_fit, evaluate_state,
                     fit_supervised, full_view, initial_state, metric_records, refine_photometric,
                     write_batch_table)
from .render import (TextureAtlas, apply_uvflow, compute_uvflow, estimate_background, rasterize_hard,
                     render_textured)
from .synthgen import GenConfig, default_pose_prior, write_dataset
from .toy import ToyConfig, make_toy_model

log = logging.getLogger("smalcap")

EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME = 0, 1, 2


class ValidationError(ValueError):
    pass


# ----------------------------------------------------------------------
# run manifest


@dataclass
class RunManifest:
    command: str
    config: dict
    seed: int
    tool_version: str = __version__
    inputs: dict = field(default_factory=dict)     # path -> sha256
    outputs: list = field(default_factory=list)
    timing: dict = field(default_factory=dict)

    def add_input(self, path):
        if path is not None:
            self.inputs[str(path)] = io.file_hash(path)

    def add_output(self, path):
        self.outputs.append(str(path))
        return path

    def write(self, path):
        missing = [p for p in self.outputs if not Path(p).exists()]
        if missing:
            raise RuntimeError(f"outputs missing at exit: {missing}")
        io.write_json(path, {"command": self.command, "config": self.config, "seed": self.seed,
                             "tool_version": self.tool_version, "inputs": self.inputs,
                             "outputs": self.outputs, "timing": self.timing})


# ----------------------------------------------------------------------
# loading helpers


def _load_json(path, what):
    try:
        return io.read_json(path)
    except FileNotFoundError:
        raise ValidationError(f"{what} not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{what} is not valid JSON: {path} ({exc})") from None


def _require(path, what):
    if path is None:
        raise ValidationError(f"missing {what}")
    if not Path(path).exists():
        raise ValidationError(f"{what} not found: {path}")
    return Path(path)


def load_model(path):
    if path is None:
        return make_toy_model()
    return BodyModel.load(_require(path, "model"))


def load_fit_config(args):
    d = _load_json(args.config, "config") if args.config else {}
    if args.seed is not None:
        d["seed"] = args.seed
    try:
        return FitConfig.from_dict(d)
    except (TypeError, ValueError) as exc:
        raise ValidationError(f"invalid fit config: {exc}") from None


def load_keypoints(path):
    d = _load_json(_require(path, "keypoints"), "keypoints")
    if "keypoints" not in d:
        raise ValidationError(f"{path}: no 'keypoints' entry")
    kp = np.asarray(d["keypoints"], dtype=np.float64)
    if kp.ndim != 2 or kp.shape[1] != 2:
        raise ValidationError(f"{path}: keypoints must be an (n, 2) list")
    vis = np.asarray(d.get("visibility", np.ones(len(kp))), dtype=bool)
    return kp, vis


def load_prior(path, model):
    if path is None:
        return default_pose_prior(model)
    return obj.GaussianPosePrior.from_dict(_load_json(path, "pose prior"))


def params_doc(state, camera, width, height, crop=None):
    f = effective_camera(camera, state.focal_x)
    return {"state": state.to_dict(), "camera": camera.to_dict(), "focal": f,
            "width": int(width), "height": int(height), "crop": crop}


def _params_path(path):
    if path is None:
        return None
    p = Path(path)
    return p / "params.json" if p.is_dir() else p


def load_params(path):
    p = _params_path(path)
    d = _load_json(_require(p, "params"), "params")
    try:
        state = PoseState.from_dict(d["state"])
        camera = CameraParams.from_dict(d["camera"])
    except (KeyError, TypeError, ValueError) as exc:
        raise ValidationError(f"{p}: malformed params ({exc})") from None
    return state, camera, d


def outline(mask, width=1):
    m = np.asarray(mask) > 0.5
    return m & ~ndimage.binary_erosion(m, iterations=width)


def overlay_image(image, mask, style="outline", color=(1.0, 0.1, 0.1), alpha=0.45):
    img = np.array(image, dtype=np.float64)
    if style == "outline":
        img[outline(mask, 2)] = color
    elif style == "alpha":
        m = (np.asarray(mask) > 0.5)[..., None]
        img = np.where(m, (1 - alpha) * img + alpha * np.asarray(color), img)
    else:
        raise ValidationError(f"unknown overlay style '{style}'")
    return img


def _write_fit_outputs(out, man, model, state, camera, obs, crop, image, overlay_style, metrics):
    out.mkdir(parents=True, exist_ok=True)
    view = full_view(camera, effective_camera(camera, state.focal_x), obs.width, obs.height)
    posed = pose_model(model, state.theta, state.shape, state.gamma, state.dv)
    io.write_json(man.add_output(out / "params.json"), params_doc(state, camera, obs.width, obs.height, crop))
    export_obj(man.add_output(out / "mesh.obj"), posed.vertices, model.faces)
    mask = rasterize_hard(posed.vertices, model.faces, view).mask
    base = image if image is not None else np.zeros((obs.height, obs.width, 3))
    io.write_image(man.add_output(out / "overlay.png"), overlay_image(base, mask, overlay_style))
    io.write_json(man.add_output(out / "metrics.json"), metrics)


def _observation(args, need_image=False):
    image = io.read_image(_require(args.image, "image")) if (args.image or need_image) else None
    mask = io.read_mask(_require(args.mask, "mask")) if args.mask else None
    kp, vis = load_keypoints(args.keypoints) if args.keypoints else (None, None)
    size = (None, None)
    if image is None and mask is None:
        if args.width is None or args.height is None:
            raise ValidationError("without an image or mask, --width and --height are required")
        size = (args.width, args.height)
    try:
        return Observation(image, kp, vis, mask, *size)
    except ValueError as exc:
        raise ValidationError(str(exc)) from None


def _metrics_doc(sample_id, metrics, **extra):
    """metrics.json layout shared by all commands: per-sample records plus the aggregate."""
    return {"samples": [{"sample_id": sample_id, **metrics}], "aggregate": dict(metrics), **extra}


def _sample_id(args):
    src = next((p for p in (args.image, args.keypoints, args.mask) if p), None)
    return Path(src).stem if src else "sample"


def _metrics_for(model, state, obs, camera):
    m = evaluate_state(model, state, obs, camera)
    if obs.mask is None:
        warnings.warn("no mask given: IoU omitted")
    if obs.keypoints is None:
        warnings.warn("no keypoints given: PCK omitted")
    return m


# ----------------------------------------------------------------------
# subcommands


def cmd_make_model(args, man):
    d = _load_json(args.config, "toy config") if args.config else {}
    if args.seed is not None:
        d["seed"] = args.seed
    try:
        cfg = ToyConfig(**d)
        cfg.check()
    except (TypeError, ValueError) as exc:
        raise ValidationError(f"invalid toy config: {exc}") from None
    man.config, man.seed = vars(cfg).copy(), cfg.seed
    model = make_toy_model(cfg)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    model.save(man.add_output(out))
    return out.parent / (out.stem + ".run.json")


def cmd_synth(args, man):
    d = _load_json(args.config, "gen config") if args.config else {}
    if args.seed is not None:
        d["seed"] = args.seed
    for name in ("n_subjects", "images_per_subject", "size"):
        if getattr(args, name) is not None:
            d[name] = getattr(args, name)
    try:
        cfg = GenConfig.from_dict(d)
    except (TypeError, ValueError) as exc:
        raise ValidationError(f"invalid gen config: {exc}") from None
    model = load_model(args.model)
    man.add_input(args.model)
    man.config, man.seed = cfg.to_dict(), cfg.seed
    root = Path(args.out)
    manifest = write_dataset(root, model, cfg, jobs=args.jobs or os.cpu_count() or 1)
    man.add_output(root / "manifest.json")
    man.add_output(root / "pose_prior.json")
    for s in manifest["samples"]:
        for key in ("image", "mask", "atlas", "uvflow", "annot"):
            man.add_output(root / s[key])
    log.info("wrote %d samples to %s", len(manifest["samples"]), root)
    return root / "run.json"


def cmd_fit(args, man):
    cfg = load_fit_config(args)
    man.config, man.seed = cfg.to_dict(), cfg.seed
    model = load_model(args.model)
    man.add_input(args.model)
    out = Path(args.out)
    if args.dataset:
        prior = load_prior(args.prior, model) if args.prior else None
        root = _require(args.dataset, "dataset directory")
        table = batch_fit(root, model, cfg, prior, jobs=args.jobs or os.cpu_count() or 1, init=args.init_mode)
        write_batch_table(out, table)
        man.add_output(out / "batch.json")
        man.add_output(out / "batch.csv")
        io.write_json(man.add_output(out / "metrics.json"), {"samples": metric_records(table["samples"]),
                                                              "aggregate": table["aggregate"]})
        return out / "run.json"

    obs = _observation(args)
    man.config["inputs"] = {"image": args.image, "keypoints": args.keypoints, "mask": args.mask}
    for p in (args.image, args.keypoints, args.mask, _params_path(args.init), args.prior):
        man.add_input(p)
    prior = load_prior(args.prior, model)
    try:
        init = load_params(args.init)[0] if args.init else initial_state(model, obs, cfg, prior)
        res = fit_supervised(obs, model, init, cfg, prior, use_mask=obs.mask is not None)
    except ValueError as exc:
        raise ValidationError(str(exc)) from None
    metrics = _metrics_doc(_sample_id(args), _metrics_for(model, res.state, obs, cfg.camera))
    _write_fit_outputs(out, man, model, res.state, cfg.camera, obs, res.crop, obs.image,
                       args.overlay, metrics)
    io.write_json(man.add_output(out / "fit.json"), {k: v for k, v in res.to_dict().items() if k != "wall_time"})
    man.timing["fit"] = res.wall_time
    return out / "run.json"


def _background_color(args, image, model, state, camera):
    if args.background:
        d = _load_json(_require(args.background, "background"), "background")
        color = d.get("color") if isinstance(d, dict) else d
        color = np.asarray(color, dtype=np.float64)
        if color.shape != (3,):
            raise ValidationError("background JSON must hold a 3-vector 'color'")
        return color
    h, w = image.shape[:2]
    view = full_view(camera, effective_camera(camera, state.focal_x), w, h)
    posed = pose_model(model, state.theta, state.shape, state.gamma, state.dv)
    return estimate_background(image, rasterize_hard(posed.vertices, model.faces, view).mask)


def cmd_refine(args, man):
    cfg = load_fit_config(args)
    man.config, man.seed = cfg.to_dict(), cfg.seed
    model = load_model(args.model)
    init_dir = _require(args.init, "init result")
    state, camera, doc = load_params(init_dir)
    cfg = FitConfig.from_dict({**cfg.to_dict(), "camera": camera.to_dict()})
    if args.image is None:
        prev = _load_json(Path(init_dir) / "run.json", "init run manifest") if Path(init_dir).is_dir() else {}
        args.image = prev.get("config", {}).get("inputs", {}).get("image")
    obs = _observation(args, need_image=True)
    for p in (args.model, _params_path(init_dir), args.image, args.keypoints, args.mask, args.atlas,
              args.background, args.prior):
        man.add_input(p)
    prior = load_prior(args.prior, model)
    if args.atlas:
        atlas = TextureAtlas(io.read_image(_require(args.atlas, "atlas")))
    elif args.extract_atlas:
        view = full_view(camera, effective_camera(camera, state.focal_x), obs.width, obs.height)
        posed = pose_model(model, state.theta, state.shape, state.gamma, state.dv)
        atlas = TextureAtlas(apply_uvflow(obs.image, compute_uvflow(model, posed.vertices, view)))
    else:
        raise ValidationError("refinement needs --atlas (or --extract-atlas)")
    bg = _background_color(args, obs.image, model, state, camera)
    crop = doc.get("crop")
    crop = (np.asarray(crop["origin"]), crop["size"]) if crop else None
    res = refine_photometric(obs, model, state, atlas, bg, cfg, prior,
                             optimize_texture=args.optimize_texture, crop=crop)
    if res.low_confidence:
        log.warning("refinement flagged low-confidence: photometric decrease %.4f",
                    res.best["relative_decrease"])
    m = _metrics_for(model, res.state, obs, camera) if (obs.keypoints is not None or obs.mask is not None) else {}
    metrics = _metrics_doc(_sample_id(args), m, refine={"low_confidence": res.low_confidence, **res.best})
    out = Path(args.out)
    _write_fit_outputs(out, man, model, res.state, camera, obs, res.crop, obs.image, args.overlay, metrics)
    io.write_json(man.add_output(out / "fit.json"), {k: v for k, v in res.to_dict().items() if k != "wall_time"})
    if res.texture is not None:
        io.write_image(man.add_output(out / "atlas.png"), res.texture)
    man.timing["refine"] = res.wall_time
    return out / "run.json"


def cmd_render(args, man):
    model = load_model(args.model)
    state, camera, doc = load_params(args.params)
    man.add_input(args.model)
    man.add_input(_params_path(args.params))
    w = args.width or doc.get("width") or camera.width
    h = args.height or doc.get("height") or camera.height
    man.config, man.seed = {"width": w, "height": h, "overlay": args.overlay}, args.seed or 0
    view = full_view(camera, effective_camera(camera, state.focal_x), w, h)
    posed = pose_model(model, state.theta, state.shape, state.gamma, state.dv)
    frags = rasterize_hard(posed.vertices, model.faces, view)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    io.write_mask(man.add_output(out / "silhouette.png"), frags.mask)
    if args.atlas:
        man.add_input(args.atlas)
        atlas = TextureAtlas(io.read_image(_require(args.atlas, "atlas")))
        color = render_textured(posed.vertices, model.faces, model.face_uvs, view, atlas).color
        io.write_image(man.add_output(out / "color.png"), color)
        io.write_image(man.add_output(out / "atlas.png"), atlas.image)
        base = color
    else:
        log.info("no atlas: writing silhouette outputs only")
        base = np.repeat(frags.mask[..., None].astype(np.float64), 3, -1) * 0.5
    if args.image:
        man.add_input(args.image)
        base = io.read_image(args.image)
    io.write_image(man.add_output(out / "overlay.png"), overlay_image(base, frags.mask, args.overlay))
    kp = project(posed.landmarks, view.f, view.pp)
    io.write_json(man.add_output(out / "keypoints.json"),
                  {"keypoints": kp, "visibility": ((kp >= 0) & (kp < [w, h])).all(1).astype(int)})
    return out / "run.json"


def _eval_dataset(args, man, model):
    root = _require(args.dataset, "dataset directory")
    pred = Path(args.pred) if args.pred else root
    states = {}
    if (pred / "batch.json").exists() or pred.suffix == ".json":
        table = _load_json(pred if pred.suffix == ".json" else pred / "batch.json", "batch table")
        states = {r["sample_id"]: PoseState.from_dict(r["state"]) for r in table["samples"] if r.get("ok")}
        cam = None
    else:
        cam = "annotation"
    from .fitter import _annotated_state, _sample_ids, observation_from_annotation
    cfg = load_fit_config(args)
    rows = []
    for sid in _sample_ids(root):
        ann = io.read_json(root / "annot" / f"{sid}.json")
        obs = observation_from_annotation(root, ann)
        if cam == "annotation":
            camera = CameraParams.from_dict(ann["camera"])
            state = _annotated_state(ann, camera)
        elif sid in states:
            camera, state = cfg.camera, states[sid]
        else:
            warnings.warn(f"no prediction for sample {sid}")
            rows.append({"sample_id": sid, "ok": False, "error": "no prediction"})
            continue
        rows.append({"sample_id": sid, "ok": True, "metrics": evaluate_state(model, state, obs, camera)})
    if not rows:
        warnings.warn(f"no samples found in {root}")
    return {"samples": metric_records(rows), "aggregate": aggregate_metrics(rows)}


def cmd_eval(args, man):
    model = load_model(args.model)
    man.add_input(args.model)
    man.config, man.seed = {}, args.seed or 0
    if args.dataset:
        metrics = _eval_dataset(args, man, model)
    else:
        state, camera, doc = load_params(_require(args.pred, "prediction"))
        if args.width is None and args.image is None and args.mask is None:
            args.width, args.height = doc["width"], doc["height"]
        obs = _observation(args)
        for p in (args.image, args.keypoints, args.mask):
            man.add_input(p)
        m = _metrics_for(model, state, obs, camera)
        metrics = _metrics_doc(Path(args.pred).stem, m)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    io.write_json(man.add_output(out / "metrics.json"), metrics)
    return out / "run.json"


# ----------------------------------------------------------------------
# argument parsing


def _globals(parser, suppress):
    d = argparse.SUPPRESS if suppress else None
    parser.add_argument("--seed", type=int, default=d, help="seed for all randomness")
    parser.add_argument("--jobs", type=int, default=d, help="parallel workers for batch commands")
    parser.add_argument("--config", default=d, help="JSON configuration file")
    parser.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS if suppress else False)


def build_parser():
    ap = argparse.ArgumentParser(prog="smalcap", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=__version__)
    _globals(ap, False)
    sub = ap.add_subparsers(dest="command", required=True)
    common = argparse.ArgumentParser(add_help=False)
    _globals(common, True)

    p = sub.add_parser("make-model", parents=[common], help="build the procedural toy model")
    p.add_argument("--out", required=True, help="model JSON path")
    p.set_defaults(func=cmd_make_model)

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic dataset")
    p.add_argument("--model")
    p.add_argument("--out", required=True, help="dataset directory")
    p.add_argument("--n-subjects", dest="n_subjects", type=int)
    p.add_argument("--images-per-subject", dest="images_per_subject", type=int)
    p.add_argument("--size", type=int)
    p.set_defaults(func=cmd_synth)

    def annotations(p):
        p.add_argument("--model")
        p.add_argument("--image")
        p.add_argument("--keypoints", help="JSON with 'keypoints' (n, 2) and optional 'visibility'")
        p.add_argument("--mask")
        p.add_argument("--width", type=int)
        p.add_argument("--height", type=int)
        p.add_argument("--out", required=True)

    p = sub.add_parser("fit", parents=[common], help="keypoint and silhouette fit")
    annotations(p)
    p.add_argument("--init", help="params.json (or result directory) to start from")
    p.add_argument("--prior", help="pose prior JSON (default: the generator's prior)")
    p.add_argument("--dataset", help="fit every sample of a dataset directory")
    p.add_argument("--init-mode", dest="init_mode", choices=("auto", "annotation"), default="auto")
    p.add_argument("--overlay", choices=("outline", "alpha"), default="outline")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("refine", parents=[common], help="photometric refinement of a fit")
    annotations(p)
    p.add_argument("--init", required=True, help="result directory or params.json")
    p.add_argument("--atlas", help="texture atlas PNG")
    p.add_argument("--extract-atlas", action="store_true", help="build the atlas from the image via uv-flow")
    p.add_argument("--background", help="JSON with the background 'color'; estimated when absent")
    p.add_argument("--prior")
    p.add_argument("--optimize-texture", action="store_true")
    p.add_argument("--overlay", choices=("outline", "alpha"), default="outline")
    p.set_defaults(func=cmd_refine)

    p = sub.add_parser("render", parents=[common], help="render a parameter file")
    p.add_argument("--model")
    p.add_argument("--params", required=True)
    p.add_argument("--atlas")
    p.add_argument("--image", help="draw the overlay on this image")
    p.add_argument("--width", type=int)
    p.add_argument("--height", type=int)
    p.add_argument("--overlay", choices=("outline", "alpha"), default="outline")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("eval", parents=[common], help="PCK and IoU of predictions")
    annotations(p)
    p.add_argument("--pred", help="params.json, result directory or batch table")
    p.add_argument("--dataset", help="evaluate against every sample of a dataset")
    p.set_defaults(func=cmd_eval)
    return ap


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    logging.captureWarnings(True)
    argv = sys.argv[1:] if argv is None else list(argv)
    man = RunManifest(args.command, {}, args.seed if args.seed is not None else 0)
    t0 = time.perf_counter()
    try:
        man.add_input(args.config)
        run_path = args.func(args, man)
        man.timing["total"] = time.perf_counter() - t0
        man.config = {"argv": argv, **man.config}
        man.write(run_path)
    except ValidationError as exc:
        log.error("%s", exc)
        return EXIT_VALIDATION
    except Exception as exc:
        log.error("%s: %s", type(exc).__name__, exc)
        if args.verbose:
            raise
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
