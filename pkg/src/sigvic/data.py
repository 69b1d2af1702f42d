"""Image I/O and the desk-scale corpus.

Images are float tensors ``(3, H, W)`` in [0, 1].  PNG and binary PPM (P6)
are read through Pillow; grayscale inputs are replicated to three channels.

The desk corpus is cut from the photographs bundled with scikit-image: the
left three quarters of every source feed training crops, the right quarter
feeds the held-out test images, so no test pixel is ever seen in training.
"""

from __future__ import annotations

import os
import queue
import threading
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
import torch
from PIL import Image

IMAGE_SUFFIXES = (".png", ".ppm", ".pnm")

# files in scikit-image's bundled data directory
_SOURCES = (
    "astronaut.png", "chelsea.png", "coffee.png", "rocket.jpg", "hubble_deep_field.jpg",
    "ihc.png", "retina.jpg", "motorcycle_left.png", "camera.png", "brick.png",
    "grass.png", "gravel.png", "moon.png", "coins.png", "page.png", "text.png",
)


def read_image(path: str | os.PathLike) -> torch.Tensor:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    return torch.from_numpy(arr).permute(2, 0, 1).contiguous()


def to_uint8(x: torch.Tensor) -> np.ndarray:
    arr = x.detach().clamp(0, 1).permute(1, 2, 0).cpu().numpy()
    return np.round(arr * 255.0).astype(np.uint8)


def write_png(x: torch.Tensor, path: str | os.PathLike) -> None:
    Image.fromarray(to_uint8(x)).save(path, format="PNG")


def list_images(directory: str | os.PathLike) -> list[Path]:
    return sorted(p for p in Path(directory).iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


def _source_arrays() -> list[np.ndarray]:
    import skimage

    root = Path(skimage.__file__).parent / "data"
    out = []
    for name in _SOURCES:
        with Image.open(root / name) as im:
            out.append(np.asarray(im.convert("RGB")))
    return out


def make_desk_corpus(
    root: str | os.PathLike,
    n_train: int = 400,
    n_test: int = 20,
    train_size: int = 96,
    seed: int = 0,
) -> tuple[Path, Path]:
    """Write ``root/train`` and ``root/test`` PNG sets; reuses existing ones.

    Test images have varied sizes between 48 and 128 pixels per side, most of
    them not multiples of 16.
    """
    root = Path(root)
    train_dir, test_dir = root / "train", root / "test"
    if train_dir.is_dir() and test_dir.is_dir():
        if len(list_images(train_dir)) == n_train and len(list_images(test_dir)) == n_test:
            return train_dir, test_dir
    train_dir.mkdir(parents=True, exist_ok=True)
    test_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    sources = _source_arrays()
    for i in range(n_train):
        src = sources[i % len(sources)]
        h, w = src.shape[:2]
        split = (3 * w) // 4
        # a random downscale adds scale diversity to the few sources
        scale = rng.uniform(0.35, 1.0)
        side = int(round(train_size / scale))
        side = min(side, h, split)
        top = rng.integers(0, h - side + 1)
        left = rng.integers(0, split - side + 1)
        crop = Image.fromarray(src[top:top + side, left:left + side])
        crop = crop.resize((train_size, train_size), Image.BICUBIC)
        crop.save(train_dir / f"train_{i:04d}.png")
    for i in range(n_test):
        src = sources[i % len(sources)]
        h, w = src.shape[:2]
        split = (3 * w) // 4
        th = int(rng.integers(48, 129))
        tw = int(rng.integers(48, min(129, w - split + 1)))
        top = rng.integers(0, h - th + 1)
        left = rng.integers(split, w - tw + 1)
        Image.fromarray(src[top:top + th, left:left + tw]).save(test_dir / f"test_{i:02d}.png")
    return train_dir, test_dir


class CropSampler:
    """Random crops with horizontal flips from an in-memory image list."""

    def __init__(self, images: Sequence[torch.Tensor], crop: int, seed: int = 0):
        self.images = [im for im in images if min(im.shape[-2:]) >= crop]
        if not self.images:
            raise ValueError(f"no image is at least {crop}x{crop}")
        self.crop = crop
        self.rng = np.random.default_rng(seed)

    def batch(self, size: int) -> torch.Tensor:
        out = []
        for _ in range(size):
            im = self.images[self.rng.integers(len(self.images))]
            h, w = im.shape[-2:]
            top = self.rng.integers(0, h - self.crop + 1)
            left = self.rng.integers(0, w - self.crop + 1)
            patch = im[:, top:top + self.crop, left:left + self.crop]
            if self.rng.random() < 0.5:
                patch = patch.flip(-1)
            out.append(patch)
        return torch.stack(out)


def prefetch(sampler: CropSampler, batch_size: int, count: int, depth: int = 4) -> Iterator[torch.Tensor]:
    """Produce ``count`` batches from a background thread through a bounded queue.

    Batches arrive in generation order, so the stream is as reproducible as
    the sampler's seed.
    """
    q: queue.Queue = queue.Queue(maxsize=depth)
    stop = threading.Event()

    def work():
        for _ in range(count):
            if stop.is_set():
                return
            q.put(sampler.batch(batch_size))
        q.put(None)

    t = threading.Thread(target=work, daemon=True)
    t.start()
    try:
        while (item := q.get()) is not None:
            yield item
    finally:
        stop.set()
        while t.is_alive():
            try:
                q.get_nowait()
            except queue.Empty:
                t.join(timeout=0.01)
