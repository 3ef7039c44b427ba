"""Dataset ingestion: image/mask pairs on disk, seeded splits and batching.

Expected layout::

    root/
      images/<id>.png | <id>.jpg
      masks/<id>.png

Masks are 8-bit rasters; anything above 127 is foreground.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg")
MASK_SUFFIXES = (".png",)
MASK_THRESHOLD = 127


class DatasetError(Exception):
    pass


class MissingMask(DatasetError):
    def __init__(self, sample_id: str):
        super().__init__(f"no mask found for image {sample_id!r}")
        self.sample_id = sample_id


class EmptyDataset(DatasetError):
    pass


class DecodeError(DatasetError):
    pass


class InvalidSplit(DatasetError):
    pass


@dataclass(frozen=True)
class DatasetIndex:
    root: Path
    entries: tuple[str, ...]
    split: str | None = None
    seed: int | None = None

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def image_path(self, sample_id: str) -> Path:
        return _find_file(self.root / "images", sample_id, IMAGE_SUFFIXES)

    def mask_path(self, sample_id: str) -> Path:
        return _find_file(self.root / "masks", sample_id, MASK_SUFFIXES)

    def subset(self, ids, split: str | None = None) -> "DatasetIndex":
        return replace(self, entries=tuple(ids), split=split)

    def digest(self) -> str:
        """sha256 over the newline-joined ids; identifies a split manifest."""
        return hashlib.sha256("\n".join(self.entries).encode()).hexdigest()


@dataclass
class SamplePair:
    id: str
    image: np.ndarray
    mask: np.ndarray


def _find_file(directory: Path, stem: str, suffixes) -> Path:
    for suffix in suffixes:
        for candidate in (directory / f"{stem}{suffix}", directory / f"{stem}{suffix.upper()}"):
            if candidate.is_file():
                return candidate
    raise FileNotFoundError(f"{stem} not found in {directory}")


def _stems(directory: Path, suffixes) -> dict[str, Path]:
    if not directory.is_dir():
        return {}
    found = {}
    for path in directory.iterdir():
        if path.is_file() and path.suffix.lower() in suffixes:
            found.setdefault(path.stem, path)
    return found


def image_files(root) -> dict[str, Path]:
    """``{id: path}`` for every image under ``root/images``, byte-wise sorted by id."""
    images = _stems(Path(root) / "images", IMAGE_SUFFIXES)
    return {sid: images[sid] for sid in sorted(images, key=lambda s: s.encode("utf-8"))}


def scan_dataset(root) -> DatasetIndex:
    """Index every image under ``root/images`` that has a mask under ``root/masks``.

    Ids are sorted byte-wise so the order is the same on every platform.
    Raises :class:`MissingMask` for the first (sorted) image without a mask and
    :class:`EmptyDataset` when nothing matches.
    """
    root = Path(root)
    images = _stems(root / "images", IMAGE_SUFFIXES)
    masks = _stems(root / "masks", MASK_SUFFIXES)
    ids = sorted(images, key=lambda s: s.encode("utf-8"))
    for sample_id in ids:
        if sample_id not in masks:
            raise MissingMask(sample_id)
    if not ids:
        raise EmptyDataset(f"no image/mask pairs under {root}")
    return DatasetIndex(root=root, entries=tuple(ids))


def _open_raster(path) -> Image.Image:
    try:
        img = Image.open(path)
        img.load()
    except (UnidentifiedImageError, OSError, ValueError) as exc:
        raise DecodeError(f"cannot decode {path}: {exc}") from exc
    return img


def load_image(path) -> np.ndarray:
    """Decode an image as a 2-D grayscale array (uint8, or uint16 for 16-bit PNGs)."""
    img = _open_raster(path)
    if img.mode in ("I;16", "I;16B", "I;16L", "I"):
        arr = np.asarray(img, dtype=np.int64)
        return np.clip(arr, 0, 65535).astype(np.uint16)
    if img.mode != "L":
        img = img.convert("L")
    return np.asarray(img, dtype=np.uint8).copy()


def load_mask(path) -> np.ndarray:
    img = _open_raster(path)
    if img.mode != "L":
        img = img.convert("L")
    return (np.asarray(img) > MASK_THRESHOLD).astype(np.uint8)


def save_mask(mask: np.ndarray, path) -> None:
    mask = np.asarray(mask)
    if not np.isin(mask, (0, 1)).all():
        raise ValueError("mask must contain only 0 and 1")
    Image.fromarray((mask * 255).astype(np.uint8), mode="L").save(path)


def save_image(pixels: np.ndarray, path) -> None:
    """Write a [0,1] float image or an integer image as 8-bit grayscale PNG."""
    pixels = np.asarray(pixels)
    if pixels.dtype.kind == "f":
        pixels = np.round(np.clip(pixels, 0.0, 1.0) * 255.0)
    Image.fromarray(pixels.astype(np.uint8), mode="L").save(path)


def load_pair(index: DatasetIndex, sample_id: str) -> SamplePair:
    return SamplePair(
        id=sample_id,
        image=load_image(index.image_path(sample_id)),
        mask=load_mask(index.mask_path(sample_id)),
    )


def split_dataset(index: DatasetIndex, test_count: int, seed: int) -> tuple[DatasetIndex, DatasetIndex]:
    n = len(index)
    if not 0 < test_count < n:
        raise InvalidSplit(f"test_count must be in (0, {n}), got {test_count}")
    order = np.random.default_rng(seed).permutation(n)
    test_pos = set(order[:test_count].tolist())
    # both halves keep the index's sorted order
    train = [sid for i, sid in enumerate(index.entries) if i not in test_pos]
    test = [sid for i, sid in enumerate(index.entries) if i in test_pos]
    return (
        replace(index, entries=tuple(train), split="train", seed=seed),
        replace(index, entries=tuple(test), split="test", seed=seed),
    )


def make_batches(index, batch_size: int, seed: int, epoch: int) -> list[list[str]]:
    """Shuffle ids with a generator keyed on ``(seed, epoch)`` and chunk them."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    ids = list(index.entries if isinstance(index, DatasetIndex) else index)
    rng = np.random.default_rng([seed, epoch])
    order = rng.permutation(len(ids))
    shuffled = [ids[i] for i in order]
    return [shuffled[i : i + batch_size] for i in range(0, len(shuffled), batch_size)]


def write_split_manifest(index: DatasetIndex, path) -> None:
    Path(path).write_text("".join(f"{sid}\n" for sid in index.entries))


def read_split_manifest(root, path, split: str | None = None) -> DatasetIndex:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"split manifest {path} does not exist")
    ids = [line.strip() for line in path.read_text().splitlines() if line.strip()]
    if not ids:
        raise EmptyDataset(f"split manifest {path} is empty")
    index = DatasetIndex(root=Path(root), entries=tuple(ids), split=split or path.stem)
    for sid in ids:
        try:
            index.image_path(sid)
        except FileNotFoundError:
            raise DatasetError(f"id {sid!r} from {path} has no image under {root}") from None
        try:
            index.mask_path(sid)
        except FileNotFoundError:
            raise MissingMask(sid) from None
    return index
