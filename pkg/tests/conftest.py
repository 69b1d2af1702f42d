import os
import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from sigvic.data import list_images, make_desk_corpus, read_image  # noqa: E402

CACHE = Path(os.environ.get("SIGVIC_CACHE", Path(__file__).resolve().parent.parent / ".cache"))


@pytest.fixture(scope="session")
def cache_dir() -> Path:
    CACHE.mkdir(parents=True, exist_ok=True)
    return CACHE


@pytest.fixture(scope="session")
def desk_corpus(cache_dir):
    return make_desk_corpus(cache_dir / "desk")


@pytest.fixture(scope="session")
def train_images(desk_corpus):
    return [read_image(p) for p in list_images(desk_corpus[0])]


@pytest.fixture(scope="session")
def test_images(desk_corpus):
    return [read_image(p) for p in list_images(desk_corpus[1])]
