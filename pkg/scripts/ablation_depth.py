"""DSM error and source PSNR with and without depth supervision from the oracle DSM.

    python3 scripts/ablation_depth.py --lambda-depth 0 0.1 1
"""

import argparse

from satmpi.fit import fit, scene_config
from satmpi.io import dsm_from_altitude, load_scene
from satmpi.objective import LossWeights, mae
from satmpi.synth import fixture_spec, make_scene


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--kind", choices=("flat", "ramp", "hill"), default="flat")
    p.add_argument("--lambda-depth", type=float, nargs="+", default=[0.0, 1.0])
    p.add_argument("--out", default="runs/ablation_depth")
    args = p.parse_args()
    make_scene(fixture_spec(args.kind), args.out)
    scene = load_scene(f"{args.out}/manifest.json")
    truth, grid = scene.truth_dsm
    print("lambda_depth  dsm_mae  source_psnr")
    for lam in args.lambda_depth:
        trace = fit(scene, scene_config(weights=LossWeights(lambda_depth=lam)))
        dsm = dsm_from_altitude(trace.render, scene.rpc, grid)
        err = mae(dsm.values, truth.values, dsm.mask & truth.mask)
        print(f"{lam:12g}  {err:7.3f}  {trace.psnr_src[-1][1]:11.2f}")


if __name__ == "__main__":
    main()
