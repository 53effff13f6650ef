"""Distort a checkerboard, fit RP-TPS control points back, and report warp error and PSNR.

    python3 scripts/roundtrip_experiment.py --size 256 --k2 0.05 --iters 4
"""
import argparse
import time

import numpy as np

from rectiwarp.fitter import FitConfig, fit_from_flow, fit_rectification
from rectiwarp.geometry import DistortionParams, distortion_flow
from rectiwarp.imaging import checkerboard, psnr, ssim, write_image
from rectiwarp.synthesis import distort_image
from rectiwarp.tps import ControlGrid, TpsBasis, normalized_to_pixel, rp_tps_apply


def warp_error(points, flow, size):
    c0 = ControlGrid.basic()
    fitted = normalized_to_pixel(TpsBasis(c0, size, size).grid(points), size, size)
    v, u = np.mgrid[0:size, 0:size]
    return np.hypot(*(fitted - (np.stack([u, v], -1) + flow.vectors)).transpose(2, 0, 1))


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--size", type=int, default=256)
    ap.add_argument("--k2", type=float, default=0.05)
    ap.add_argument("--iters", type=int, default=4)
    ap.add_argument("--method", choices=["coordinate", "gradient"], default="coordinate")
    ap.add_argument("--no-warm-start", action="store_true")
    ap.add_argument("--save", help="write distorted/rectified PNGs with this prefix")
    args = ap.parse_args()

    n = args.size
    clean = checkerboard(n, n, max(4, n // 8))
    params = DistortionParams(radial_coeffs=(1.0, args.k2))
    distorted, valid = distort_image(clean, params)
    flow = distortion_flow(params, n, n)
    crop = slice(int(0.1 * n) + 1, n - int(0.1 * n) - 1)

    t = time.perf_counter()
    init = None if args.no_warm_start else fit_from_flow(flow, (12, 10))
    t_flow = time.perf_counter() - t
    cfg = FitConfig(max_iters=args.iters, boundary_changing=False, method=args.method)
    result = fit_rectification(distorted, valid, clean, None, cfg=cfg, init=init)
    t_fit = time.perf_counter() - t - t_flow
    c0 = ControlGrid.basic()
    rect = rp_tps_apply(distorted, valid, c0, result.c1.points - c0.points,
                        result.c2.points - result.c1.points)

    if init is not None:
        print(f"flow fit      median crop error {np.median(warp_error(init.points, flow, n)[crop, crop]):.4f} px"
              f"  ({t_flow:.1f}s)")
    print(f"descent       median crop error {np.median(warp_error(result.c2.points, flow, n)[crop, crop]):.4f} px"
          f"  ({t_fit:.1f}s, sweeps {result.iterations})")
    print(f"loss          {result.initial_loss:.5f} -> stage 1 {result.stage_finals[0]:.5f}"
          f" -> stage 2 {result.stage_finals[1]:.5f}")
    print(f"PSNR full     {psnr(distorted, clean):.2f} -> {psnr(rect.xd, clean):.2f} dB")
    print(f"PSNR crop     {psnr(distorted[crop, crop], clean[crop, crop]):.2f} -> "
          f"{psnr(rect.xd[crop, crop], clean[crop, crop]):.2f} dB")
    print(f"SSIM full     {ssim(distorted, clean):.4f} -> {ssim(rect.xd, clean):.4f}")
    if args.save:
        write_image(f"{args.save}_distorted.png", distorted)
        write_image(f"{args.save}_rectified.png", rect.xd)


if __name__ == "__main__":
    main()
