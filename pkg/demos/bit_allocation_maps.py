"""Write scale-factor and bit-allocation heatmaps for one image.

Uses a trained model archive when given, otherwise a fresh one (whose scale
maps are all exactly 1)::

    python3 demos/bit_allocation_maps.py [model.npz]
"""

import sys

import torch

from sigvic import SigVIC, load_model
from sigvic.data import list_images, make_desk_corpus, read_image
from sigvic.evaluation import dump_maps


def main(model_path: str | None = None) -> None:
    _, test_dir = make_desk_corpus("desk_corpus")
    x = read_image(list_images(test_dir)[0])
    if model_path:
        model = load_model(model_path)
    else:
        torch.manual_seed(0)
        model = SigVIC()
    for lam in (0.0016, 0.045):
        bundle = dump_maps(model, x, lam, "maps")
        sf = bundle.encoder_scales[0]
        print(f"lambda {lam:g}: {bundle.total_bits:.0f} bits, stage-1 scale in [{sf.min():.3f}, {sf.max():.3f}], "
              f"{len(bundle.files)} files under maps/")


if __name__ == "__main__":
    main(*sys.argv[1:2])
