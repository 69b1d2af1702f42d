"""Compress one image at three rate points with a freshly initialised codec.

Without a model archive a fresh codec is used. That is enough to show the
container round trip, but every rate point then gives the same stream, since
an untrained codec ignores lambda. Usage::

    python3 demos/compress_one_image.py [image.png] [model.npz]
"""

import sys

import torch

from sigvic import CodecConfig, SigVIC, compress, decompress, load_model
from sigvic.bitstream import Bitstream
from sigvic.data import make_desk_corpus, list_images, read_image
from sigvic.metrics import psnr


def main(path: str | None = None, model_path: str | None = None) -> None:
    if not path:
        _, test_dir = make_desk_corpus("desk_corpus")
        path = str(list_images(test_dir)[0])
    x = read_image(path)
    if model_path:
        model = load_model(model_path).eval()
    else:
        torch.manual_seed(0)
        model = SigVIC(CodecConfig(N=32, K=8, sffm_width=16, reduction=4)).eval()
    h, w = x.shape[-2:]
    print(f"{path}: {w}x{h}")
    for lam in (0.0016, 0.0075, 0.045):
        blob = compress(x, lam, model)
        header = Bitstream.from_bytes(blob)
        x_hat = decompress(blob, model)
        print(f"  lambda {lam:<7g} {len(blob):6d} bytes  {8 * len(blob) / (h * w):.3f} bpp  "
              f"{psnr(x, x_hat):.2f} dB  (header {header.width}x{header.height}, K={header.K})")


if __name__ == "__main__":
    main(*sys.argv[1:3])
