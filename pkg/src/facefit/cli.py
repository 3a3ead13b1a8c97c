"""Command-line entry point: ``facefit <command> [options]``.

Exit status is 0 on success, 2 for usage errors and 1 for runtime errors.
Logs go to stderr; artifacts go under ``--out``.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import numpy as np

from . import io
from .fitter import FitError, finetune_model, fit_joint, reconstruct, retarget, track
from .metrics import evaluate
from .model import compute_attention_masks
from .shading import Camera
from .toy import CLASS_NAMES, make_toy_head, random_corrections, synth_scene

log = logging.getLogger("facefit")

TOY_BLENDSHAPES = 56


class UsageError(Exception):
    pass


def _resolution(text):
    try:
        h, w = text.lower().split("x")
        h, w = int(h), int(w)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected HEIGHTxWIDTH, got {text!r}") from None
    if w < 1 or h < 1:
        raise argparse.ArgumentTypeError("resolution must be positive")
    return h, w


def _positive(text):
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return v


def build_parser():
    p = argparse.ArgumentParser(prog="facefit", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", required=True, metavar="COMMAND")

    def common(sp, template=True, scene=False, config=True):
        sp.add_argument("--out", required=True, help="output directory")
        if template:
            sp.add_argument("--template", help="template (or fitted model) container directory")
        if scene:
            sp.add_argument("--scene", required=True, help="scene bundle directory")
        if config:
            sp.add_argument("--config", help="INI file with [camera], [weights], [fit] sections")
        sp.add_argument("--seed", type=int, help="random seed (overrides the config)")
        sp.add_argument("--resolution", type=_resolution, help="image size HxW")
        sp.add_argument("--uv-res", type=_positive, help="UV resolution of masks and corrections")

    sp = sub.add_parser("masks", help="compute attention masks for a template")
    common(sp, config=False)

    sp = sub.add_parser("synth", help="render a synthetic scene with known parameters")
    common(sp)
    sp.add_argument("--frames", type=_positive, default=4)
    sp.add_argument("--active", type=_positive, default=3, help="active blendshapes")
    sp.add_argument("--max-angle", type=float, default=20.0, help="max |euler| in degrees")
    sp.add_argument("--with-corrections", action="store_true",
                    help="render with random nonzero blendshape corrections")
    sp.add_argument("--blendshapes", type=_positive, default=TOY_BLENDSHAPES,
                    help="blendshape count of the built-in toy head (no --template)")

    sp = sub.add_parser("fit", help="fit model corrections and tracking to a scene")
    common(sp, scene=True)
    sp.add_argument("--stage2", action="store_true", help="also run the model fine-tuning stage")

    sp = sub.add_parser("track", help="track a scene with a fixed model")
    common(sp, scene=True)

    sp = sub.add_parser("render", help="render frames from a model and parameters")
    common(sp)
    sp.add_argument("--params", required=True, help="tracking parameters (JSON lines)")
    sp.add_argument("--scene", help="take the camera from this scene bundle")

    sp = sub.add_parser("retarget", help="drive a target model with tracked coefficients")
    common(sp)
    sp.add_argument("--params", required=True, help="source tracking parameters (JSON lines)")
    sp.add_argument("--scene", help="take the camera from this scene bundle")
    sp.add_argument("--transfer-pose", action="store_true")
    sp.add_argument("--transfer-lighting", action="store_true")

    sp = sub.add_parser("eval", help="losses, photometric error and NME of a fit")
    common(sp, scene=True)
    sp.add_argument("--params", required=True, help="tracking parameters (JSON lines)")
    sp.add_argument("--gt", help="ground-truth parameters for coefficient MAE "
                                 "(default: the scene's gt_params.jsonl if present)")
    return p


# ---------------------------------------------------------------------------


def _setup(args):
    camera, config = (io.load_config(args.config) if getattr(args, "config", None)
                      else (Camera(), None))
    from .fitter import FitConfig
    config = config or FitConfig()
    if args.seed is not None:
        config.seed = args.seed
    if args.resolution:
        camera = camera.resized(*args.resolution)
    return camera, config


def _need(args, name):
    if not getattr(args, name, None):
        raise UsageError(f"--{name.replace('_', '-')} is required for '{args.command}'")
    return getattr(args, name)


def _model(args):
    template, corrections = io.load_model(_need(args, "template"))
    res = args.uv_res or (corrections.resolution if corrections is not None
                          else template.resolution)
    if corrections is not None and corrections.resolution != res:
        raise UsageError(f"--uv-res {res} disagrees with the model's corrections "
                         f"({corrections.resolution})")
    if corrections is not None and corrections.n_blendshapes != template.n_blendshapes:
        raise io.FormatError("corrections and template disagree on the blendshape count")
    return template, corrections, compute_attention_masks(template, resolution=res)


def _scene_camera(args, camera):
    if getattr(args, "scene", None) and not args.config:
        camera = io.load_camera(os.path.join(args.scene, "camera.cfg"))
        if args.resolution:
            camera = camera.resized(*args.resolution)
    return camera


def _load_scene(args, camera):
    scene = io.load_scene(args.scene)
    cam = scene.camera
    if args.config or args.resolution:
        cam = camera
    if cam.size != scene.camera.size:
        raise UsageError(f"scene frames are {scene.camera.width}x{scene.camera.height}, "
                         f"but the camera is {cam.width}x{cam.height}")
    return scene, cam


def cmd_masks(args):
    template = io.load_template(_need(args, "template"))
    masks = compute_attention_masks(template, resolution=args.uv_res)
    io.save_masks(args.out, masks)
    log.info("wrote %d masks to %s", len(masks), args.out)


def cmd_synth(args):
    camera, config = _setup(args)
    if args.template:
        template_dir = args.template
    else:
        template_dir = os.path.join(args.out, "template")
        io.save_template(template_dir, make_toy_head(n_blendshapes=args.blendshapes))
        log.info("wrote toy template to %s", template_dir)
    # reload so the scene is rendered from exactly what is on disk
    template = io.load_template(template_dir)
    masks = compute_attention_masks(template, resolution=args.uv_res)
    if args.active > template.n_blendshapes:
        raise UsageError(f"--active {args.active} exceeds {template.n_blendshapes} blendshapes")
    corrections = None
    if args.with_corrections:
        corrections = io.round_corrections(random_corrections(template, masks, seed=config.seed))
    frames, params = synth_scene(template, masks, seed=config.seed, n_frames=args.frames,
                                 n_active=args.active, cam=camera, corrections=corrections,
                                 max_angle_deg=args.max_angle)
    names = template.manifest.get("class_names") or (
        CLASS_NAMES if template.n_classes == len(CLASS_NAMES) else None)
    io.save_scene(args.out, io.SceneBundle(frames, camera, params, corrections, names))
    log.info("wrote %d frames to %s", len(frames), args.out)


def cmd_fit(args):
    camera, config = _setup(args)
    template, corrections, masks = _model(args)
    scene, camera = _load_scene(args, camera)
    if len(scene) < 2:
        raise FitError("fitting model corrections needs at least 2 frames; use 'track'")
    res = fit_joint(scene.frames, template, masks, config, camera, corrections=corrections)
    if args.stage2:
        res = finetune_model(scene.frames, template, masks, res, config, camera)
    io.save_model(os.path.join(args.out, "model"), template, res.corrections)
    io.save_params(os.path.join(args.out, "params.jsonl"), res.params)
    io.save_trace(os.path.join(args.out, "trace.csv"), res.trace)
    log.info("final loss %.6g", float(res.final.total) if res.final else float("nan"))


def cmd_track(args):
    camera, config = _setup(args)
    template, corrections, masks = _model(args)
    scene, camera = _load_scene(args, camera)
    params, traces = track(scene.frames, template, masks, corrections, config, camera)
    io.save_params(os.path.join(args.out, "params.jsonl"), params)
    for i, tr in enumerate(traces):
        io.save_trace(os.path.join(args.out, "traces", f"{i:04d}.csv"), tr)


def cmd_render(args):
    camera, _ = _setup(args)
    camera = _scene_camera(args, camera)
    template, corrections, masks = _model(args)
    params = io.load_params(args.params)
    _check_counts(params, template)
    for i, p in enumerate(params):
        r = reconstruct(template, corrections, masks, p, camera)
        io.write_png(os.path.join(args.out, "frames", f"{i:04d}.png"), r["image"])
    log.info("rendered %d frames", len(params))


def _check_counts(params, template):
    for i, p in enumerate(params):
        if len(p.logits) != template.n_blendshapes:
            raise io.FormatError(f"params record {i} has {len(p.logits)} coefficients, "
                                 f"model has {template.n_blendshapes}")


def cmd_retarget(args):
    camera, _ = _setup(args)
    camera = _scene_camera(args, camera)
    template, corrections, masks = _model(args)
    source = io.load_params(args.params)
    shapes, images = retarget(source, template, corrections, masks, camera,
                              transfer_pose=args.transfer_pose,
                              transfer_lighting=args.transfer_lighting)
    for i, img in enumerate(images):
        io.write_png(os.path.join(args.out, "frames", f"{i:04d}.png"), img)
    io.save_params(os.path.join(args.out, "params.jsonl"), source)
    np.save(os.path.join(args.out, "shapes.npy"), np.array(shapes))


def cmd_eval(args):
    camera, config = _setup(args)
    template, corrections, masks = _model(args)
    scene, camera = _load_scene(args, camera)
    params = io.load_params(args.params)
    _check_counts(params, template)
    gt = io.load_params(args.gt) if args.gt else scene.gt_params
    report = evaluate(scene.frames, template, masks, corrections, params, camera,
                      config.weights, gt)
    out = report.to_dict()
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "report.json"), "w") as fh:
        json.dump(out, fh, indent=2)
    summary = {k: v for k, v in out.items() if k != "frames"}
    print(json.dumps(summary, indent=2))


COMMANDS = {"masks": cmd_masks, "synth": cmd_synth, "fit": cmd_fit, "track": cmd_track,
            "render": cmd_render, "retarget": cmd_retarget, "eval": cmd_eval}


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        COMMANDS[args.command](args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"facefit {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError, FitError, FloatingPointError) as exc:
        log.error("%s", exc)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
