"""Target-view PSNR of fits with and without the reprojection loss.

    python3 scripts/ablation_reprojection.py --lambda3 0 1 10
"""

import argparse

import numpy as np

from satmpi.fit import fit, scene_config
from satmpi.io import load_scene
from satmpi.objective import LossWeights, psnr
from satmpi.synth import fixture_spec, make_scene
from satmpi.warp import coverage_mask, target_warp_field, warp_src_to_tgt


def target_psnr(scene, mpi):
    vals = []
    for rgb, rpc in scene.targets:
        _, r = warp_src_to_tgt(mpi, scene.rpc, rpc, scene.geo_ref)
        mask = coverage_mask(target_warp_field(mpi.heights, scene.rpc, scene.size, rpc, scene.size))
        vals.append(psnr(r.rgb, rgb, mask=mask))
    return float(np.mean(vals))


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--kind", choices=("flat", "ramp", "hill"), default="flat")
    p.add_argument("--lambda3", type=float, nargs="+", default=[0.0, 10.0])
    p.add_argument("--out", default="runs/ablation_reprojection")
    args = p.parse_args()
    make_scene(fixture_spec(args.kind), args.out)
    scene = load_scene(f"{args.out}/manifest.json")
    print("lambda3  target_psnr  source_psnr")
    for lam in args.lambda3:
        trace = fit(scene, scene_config(weights=LossWeights(lambda3=lam)))
        print(f"{lam:7g}  {target_psnr(scene, trace.mpi):11.2f}  {trace.psnr_src[-1][1]:11.2f}")


if __name__ == "__main__":
    main()
