"""Train an SRCNN on natural photographs to serve as base weights for TL and FT.

Uses the grayscale sample images shipped with scikit-image, so no download
is needed. The result plays the role of an off-the-shelf model.
"""
import argparse

import numpy as np
from skimage import color, data

from irissr import srcnn

SAMPLES = ("camera", "astronaut", "coffee", "chelsea", "rocket", "brick", "grass", "gravel", "moon", "page")


def natural_images():
    out = []
    for name in SAMPLES:
        img = getattr(data, name)()
        if img.ndim == 3:
            img = color.rgb2gray(img[..., :3])
        img = np.asarray(img, np.float64)
        out.append(img / 255 if img.max() > 1 else img)
    return out


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--factor", type=int, default=2)
    ap.add_argument("--iterations", type=int, default=2000)
    ap.add_argument("--patch-stride", type=int, default=21)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", required=True)
    args = ap.parse_args(argv)

    pairs = srcnn.make_training_set(natural_images(), args.factor, args.patch_stride)
    cfg = srcnn.desk_config(iterations=args.iterations, seed=args.seed)
    model = srcnn.build_default(args.factor, seed=args.seed, init_std=srcnn.DESK_INIT)
    model, history = srcnn.train(model, pairs, srcnn.TrainRegime("FS", args.factor, cfg))
    model.save(args.out)
    print(f"{len(pairs)} patches, final mse {history[-1][1]:.5f}, wrote {args.out}")


if __name__ == "__main__":
    main()
