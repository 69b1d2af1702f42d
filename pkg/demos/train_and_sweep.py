"""Train a desk-scale codec briefly, then sweep it over the lambda grid.

The default budget here is small (a few minutes) so the script finishes
quickly; pass an iteration count to train longer. The acceptance runs use
the 20k-iteration schedule from ``smoke_configs``::

    python3 demos/train_and_sweep.py [iters]
"""

import dataclasses
import sys

import torch

from sigvic import SigVIC
from sigvic.data import list_images, make_desk_corpus, read_image
from sigvic.evaluation import plot_rd_curves, sweep_rd
from sigvic.training import smoke_configs, train

LAMBDAS = [0.0016, 0.003, 0.0075, 0.015, 0.045]


def main(iters: int = 500) -> None:
    train_dir, test_dir = make_desk_corpus("desk_corpus")
    train_images = [read_image(p) for p in list_images(train_dir)]
    test_images = [read_image(p) for p in list_images(test_dir)]
    codec, cfg = smoke_configs()
    cfg = dataclasses.replace(cfg, iters=iters, log_every=max(1, iters // 10))

    torch.manual_seed(cfg.seed)
    model = SigVIC(codec)
    train(model, train_images, cfg, progress=lambda r: r.iter % cfg.log_every == 0 and print(
        f"iter {r.iter:6d}  lambda {r.lam:.4f}  loss {r.loss:8.3f}  bpp {r.bpp:.3f}"))

    curve = sweep_rd(model, test_images, LAMBDAS, label=f"{iters} iterations")
    for p in curve.points:
        print(f"lambda {p.lam:<7g} {p.bpp:.4f} bpp  {p.quality:.2f} dB")
    plot_rd_curves([curve], "rd_curve.png")
    print("wrote rd_curve.png")


if __name__ == "__main__":
    main(*(int(v) for v in sys.argv[1:2]))
