"""Write a large random checkpoint for render benchmarks.

    python3 scripts/make_bench_cloud.py --gaussians 100000 --out bench.ckpt
    deblur-splat bench --checkpoint bench.ckpt --frames 20
"""

import argparse

from deblur_splat.checkpoint import save_checkpoint
from deblur_splat.scene import ToySceneConfig, toy_ground_truth


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--gaussians", type=int, default=100_000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--width", type=int, default=800)
    p.add_argument("--height", type=int, default=600)
    p.add_argument("--out", required=True)
    a = p.parse_args()
    # footprints of 1.5-4 px at the bench resolution, like a trained scene's fine detail
    cfg = ToySceneConfig(width=a.width, height=a.height, focal=0.8 * a.width)
    cloud = toy_ground_truth(a.seed, a.gaussians, cfg)
    save_checkpoint(a.out, cloud)
    print(f"wrote {len(cloud)} Gaussians to {a.out}")


if __name__ == "__main__":
    main()
