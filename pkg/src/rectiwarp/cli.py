"""Command line entry point: ``rectiwarp {distort,synth,rectify,eval,route,replay}``."""
from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from rectiwarp import __version__
from rectiwarp.errors import DegenerateError, RectiwarpError
from rectiwarp.fitter import FitConfig, fit_from_flow, fit_rectification
from rectiwarp.geometry import DistortionParams, distortion_flow
from rectiwarp.imaging import (
    Task,
    atomic_write_bytes,
    psnr,
    read_flow,
    read_image,
    read_mask,
    ssim,
    write_flow,
    write_grid,
    write_image,
    write_mask,
)
from rectiwarp.objective import LossWeights, build_level_set
from rectiwarp.smoe import heuristic_scores, topk_softmax
from rectiwarp.synthesis import PARAM_RANGES, distort_image, sample_task_params, synthesize
from rectiwarp.tps import ControlGrid, rp_tps_apply

IMAGE_SUFFIXES = (".png", ".pgm", ".ppm", ".pnm")


class CliError(Exception):
    pass


@dataclass
class RunManifest:
    command: str
    argv: list
    inputs: dict = field(default_factory=dict)
    outputs: dict = field(default_factory=dict)
    params: dict = field(default_factory=dict)
    seed: int | None = None
    version: str = __version__

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)


def _json_arg(text: str):
    """Parse inline JSON, or read it from a file when ``text`` names one."""
    path = Path(text)
    if not text.lstrip().startswith(("{", "[")):
        if not path.is_file():
            raise CliError(f"no such JSON file: {text}")
        text = path.read_text()
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise CliError(f"invalid JSON: {exc}") from None


def _sibling(out: Path, tag: str, suffix: str) -> Path:
    return out.with_name(f"{out.stem}_{tag}{suffix}")


def _write_json(path: Path, payload) -> None:
    text = payload if isinstance(payload, str) else json.dumps(payload, indent=2, sort_keys=True)
    atomic_write_bytes(path, (text + "\n").encode())


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("RECTIWARP_THREADS", "1")))
    except ValueError:
        return 1


def cmd_distort(args, argv) -> None:
    params = DistortionParams.from_dict(_json_arg(args.params))
    image = read_image(args.input)
    h, w = image.shape[:2]
    distorted, valid = distort_image(image, params)
    out = Path(args.out)
    outputs = {"image": str(out), "mask": str(_sibling(out, "mask", ".png"))}
    flow = None
    if args.flow_out:
        flow = distortion_flow(params, w, h)
        outputs["flow"] = args.flow_out
    write_image(out, distorted)
    write_mask(outputs["mask"], valid)
    if flow is not None:
        write_flow(args.flow_out, flow)
    manifest = RunManifest("distort", argv, {"image": args.input}, outputs, params.to_dict())
    _write_json(_sibling(out, "manifest", ".json"), manifest.to_json())


def _clean_files(clean_dir: Path) -> list:
    if not clean_dir.is_dir():
        raise CliError(f"no such directory: {clean_dir}")
    return sorted(p for p in clean_dir.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


def cmd_synth(args, argv) -> None:
    task = Task.parse(args.task)
    if args.n < 0:
        raise CliError("--n must be non-negative")
    files = _clean_files(Path(args.clean_dir))
    if args.n > 0 and not files:
        raise CliError(f"no clean images in {args.clean_dir}")
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(args.seed)
    # every random draw happens here, in order, before any parallel work
    jobs = []
    for i in range(args.n):
        src = files[int(rng.integers(len(files)))]
        jobs.append((i, src, sample_task_params(task, rng)))

    def run(job):
        i, src, params = job
        distorted, prompt, flow = synthesize(read_image(src), task, params)
        stem = out_dir / f"{i:04d}"
        write_image(f"{stem}_distorted.png", distorted)
        write_mask(f"{stem}_mask.png", prompt)
        write_flow(f"{stem}_flow.flo", flow)
        return {"index": i, "clean": src.name, "params": params.to_dict(),
                "distorted": f"{stem.name}_distorted.png", "mask": f"{stem.name}_mask.png",
                "flow": f"{stem.name}_flow.flo"}

    with ThreadPoolExecutor(max_workers=_threads()) as pool:
        samples = list(pool.map(run, jobs))
    ranges = {k: list(v) for k, v in PARAM_RANGES[task].items()}
    manifest = RunManifest("synth", argv, {"clean_dir": args.clean_dir},
                           {"out_dir": str(out_dir), "samples": samples},
                           {"task": task.value, "ranges": ranges}, seed=args.seed)
    _write_json(out_dir / "manifest.json", manifest.to_json())


def _rectify_config(raw: dict):
    unknown = set(raw) - {"fit", "weights", "task"}
    if unknown:
        raise CliError(f"unknown config keys: {sorted(unknown)}")
    fit = dict(raw.get("fit", {}))
    if "task" in raw and "boundary_changing" not in fit:
        fit["boundary_changing"] = Task.parse(raw["task"]).boundary_changing
    return FitConfig.from_dict(fit), LossWeights(**raw.get("weights", {}))


def cmd_rectify(args, argv) -> None:
    cfg, weights = _rectify_config(_json_arg(args.config) if args.config else {})
    x0 = read_image(args.input)
    m0 = read_mask(args.mask)
    if m0.shape != x0.shape[:2]:
        raise CliError(f"mask {m0.shape} does not match image {x0.shape[:2]}")
    reference = None
    if args.ref:
        reference = read_image(args.ref)
        if reference.shape != x0.shape:
            raise CliError(f"reference {reference.shape} does not match image {x0.shape}")
    init = None
    if args.flow:
        flow = read_flow(args.flow)
        if (flow.height, flow.width) != x0.shape[:2]:
            raise CliError("flow dimensions do not match the image")
        init = fit_from_flow(flow, (cfg.cols, cfg.rows), lam=cfg.lam)
    ls = None
    if cfg.boundary_changing:
        try:
            ls = build_level_set(m0)
        except DegenerateError:
            ls = None  # all-valid prompt: no boundary to attract to
    result = fit_rectification(x0, m0, reference, ls, weights, cfg, init=init)
    c0 = ControlGrid.basic(cfg.cols, cfg.rows)
    applied = rp_tps_apply(x0, m0, c0, result.c1.points - c0.points,
                           result.c2.points - result.c1.points, cfg.lam)
    out = Path(args.out)
    outputs = {
        "image": str(out),
        "mask": str(_sibling(out, "mask", ".png")),
        "c1": str(_sibling(out, "c1", ".tpsg")),
        "c2": str(_sibling(out, "c2", ".tpsg")),
        "report": str(_sibling(out, "report", ".json")),
    }
    write_image(out, applied.xd)
    write_mask(outputs["mask"], applied.md)
    write_grid(outputs["c1"], applied.c1)
    write_grid(outputs["c2"], applied.c2)
    _write_json(Path(outputs["report"]), result.to_json())
    inputs = {"image": args.input, "mask": args.mask, "ref": args.ref, "flow": args.flow}
    manifest = RunManifest("rectify", argv, inputs, outputs,
                           {"fit": asdict(cfg), "weights": asdict(weights)}, seed=cfg.seed)
    _write_json(_sibling(out, "manifest", ".json"), manifest.to_json())


def cmd_eval(args, argv) -> None:
    a = read_image(args.result)
    b = read_image(args.reference)
    if a.shape != b.shape:
        raise CliError(f"result {a.shape} and reference {b.shape} differ in shape")
    mask = read_mask(args.mask) if args.mask else None
    print(json.dumps({"psnr": psnr(a, b, mask), "ssim": ssim(a, b, mask=mask)}))


def cmd_route(args, argv) -> None:
    if args.scores is not None:
        scores = _json_arg(args.scores)
    elif args.input:
        scores = heuristic_scores(read_image(args.input)).tolist()
    else:
        raise CliError("route needs --scores or --in")
    gates = topk_softmax(scores, args.k)
    payload = gates.to_dict()
    payload["scores"] = list(map(float, scores))
    print(json.dumps(payload))


def cmd_replay(args, argv) -> None:
    manifest = _json_arg(args.manifest)
    if not isinstance(manifest, dict) or "argv" not in manifest:
        raise CliError("manifest has no recorded argv")
    code = main(list(manifest["argv"]))
    if code:
        raise CliError(f"replayed command exited with status {code}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rectiwarp", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("distort", help="apply the general distortion model to an image")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--params", required=True, help="JSON file or inline JSON")
    p.add_argument("--flow-out")
    p.set_defaults(func=cmd_distort)

    p = sub.add_parser("synth", help="synthesize distorted/prompt/flow triplets")
    p.add_argument("--clean-dir", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--task", required=True, choices=[t.value for t in Task])
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("rectify", help="fit RP-TPS control points and rectify")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--mask", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--ref")
    p.add_argument("--flow")
    p.add_argument("--config", help="JSON file or inline JSON with fit/weights/task")
    p.set_defaults(func=cmd_rectify)

    p = sub.add_parser("eval", help="PSNR/SSIM of a result against a reference")
    p.add_argument("--result", required=True)
    p.add_argument("--reference", required=True)
    p.add_argument("--mask")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("route", help="top-k softmax gate over expert scores")
    p.add_argument("--in", dest="input")
    p.add_argument("--scores", help="JSON list (inline or file)")
    p.add_argument("--k", type=int, default=1)
    p.set_defaults(func=cmd_route)

    p = sub.add_parser("replay", help="re-run the command recorded in a manifest")
    p.add_argument("manifest")
    p.set_defaults(func=cmd_replay)
    return parser


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        args.func(args, argv)
    except (CliError, RectiwarpError, FileNotFoundError, OSError, ValueError, TypeError) as exc:
        print(f"rectiwarp {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
