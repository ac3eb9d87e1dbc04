"""ROSE-style dataset layout: ``<root>/<split>/{img,gt_pixel,gt_centerline}/<stem>.png``."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from ..config import dump_config, load_config
from ..core import AnnotationSet, ConfigError, DataError, RasterImage
from ..io import load_image, load_mask, save_image, save_mask

SUBSETS = {
    "rose1-svc": "dual",
    "rose1-svc+dvc": "dual",
    "rose1-dvc": "centerline-only",
    "rose2": "centerline-only",
    "synthetic": "dual",
}
# evaluation convention: centerline-only subsets are scored with a distance tolerance
TOLERANCE_SUBSETS = {"rose1-dvc", "rose2"}
DEFAULT_SPLITS = {"rose1": (90, 27), "rose2": (90, 22)}
DIRS = ("img", "gt_pixel", "gt_centerline")
IMAGE_SUFFIXES = (".png", ".tif", ".tiff", ".bmp", ".jpg", ".gif")


@dataclass
class Sample:
    name: str
    image: RasterImage
    annotations: AnnotationSet


@dataclass
class DatasetManifest:
    root: Path
    subset: str = "synthetic"
    train: Optional[list] = None  # stems; None -> discover from disk
    test: Optional[list] = None
    dirs: dict = field(default_factory=lambda: {d: d for d in DIRS})

    def __post_init__(self):
        self.root = Path(self.root)
        if self.subset not in SUBSETS:
            raise ConfigError(f"unknown subset {self.subset!r}; choose from {sorted(SUBSETS)}")
        if self.train and self.test and set(self.train) & set(self.test):
            raise ConfigError("train and test lists overlap")

    @property
    def mode(self) -> str:
        return SUBSETS[self.subset]

    @property
    def tolerance_mode(self) -> bool:
        return self.subset in TOLERANCE_SUBSETS

    @classmethod
    def from_file(cls, path) -> "DatasetManifest":
        """Read a manifest; a relative ``root`` resolves against the manifest's folder."""
        path = Path(path)
        cfg = load_config(path)
        if "root" not in cfg:
            raise ConfigError(f"{path}: manifest needs a 'root' entry")
        root = Path(str(cfg["root"]))
        if not root.is_absolute():
            root = path.parent / root
        dirs = {d: str(cfg.get(f"dir.{d}", d)) for d in DIRS}

        def stems(key):
            v = cfg.get(key)
            if v is None:
                return None
            return [str(s) for s in (v if isinstance(v, list) else [v])]

        return cls(root, str(cfg.get("subset", "synthetic")), stems("train"), stems("test"), dirs)

    def write(self, path) -> None:
        path = Path(path)
        try:
            root = self.root.resolve().relative_to(path.parent.resolve())
        except ValueError:
            root = self.root.resolve()
        cfg = {"root": str(root), "subset": self.subset}
        if self.train is not None:
            cfg["train"] = list(self.train)
        if self.test is not None:
            cfg["test"] = list(self.test)
        for d, name in self.dirs.items():
            if name != d:
                cfg[f"dir.{d}"] = name
        Path(path).write_text(dump_config(cfg))

    def folder(self, split: str, kind: str) -> Path:
        return self.root / split / self.dirs[kind]

    def stems(self, split: str) -> list[str]:
        listed = self.train if split == "train" else self.test
        if listed is not None:
            return sorted(listed)
        folder = self.folder(split, "img")
        if not folder.is_dir():
            return []
        return sorted({p.stem for p in folder.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES})


def _find(folder: Path, stem: str) -> Optional[Path]:
    for suffix in IMAGE_SUFFIXES:
        for cand in (folder / f"{stem}{suffix}", folder / f"{stem}{suffix.upper()}"):
            if cand.exists():
                return cand
    return None


def load_dataset(manifest: DatasetManifest, split: str = "train") -> list[Sample]:
    """Load one split in lexicographic stem order.

    All problems are collected and reported together.
    """
    stems = manifest.stems(split)
    if not stems:
        raise DataError(f"empty dataset: no images under {manifest.folder(split, 'img')}")
    need = ["gt_centerline"] if manifest.mode == "centerline-only" else ["gt_pixel", "gt_centerline"]
    samples, errors = [], []
    for stem in stems:
        paths = {k: _find(manifest.folder(split, k), stem) for k in ["img", *need]}
        missing = [k for k, p in paths.items() if p is None]
        if missing:
            errors.append(f"{stem}: missing {', '.join(missing)}")
            continue
        try:
            img = load_image(paths["img"])
            masks = {k: load_mask(paths[k]) for k in need}
            for k, m in masks.items():
                if m.shape != img.shape:
                    raise DataError(f"{k} shape {m.shape} differs from image {img.shape}")
            ann = AnnotationSet(masks.get("gt_pixel"), masks.get("gt_centerline"))
        except DataError as exc:
            errors.append(f"{stem}: {exc}")
            continue
        samples.append(Sample(stem, img, ann))
    if errors:
        raise DataError("dataset load failed:\n  " + "\n  ".join(errors))
    return samples


def write_samples(root, split: str, samples) -> None:
    """Write samples in the canonical layout (PNG, masks as 0/255)."""
    root = Path(root)
    for d in DIRS:
        (root / split / d).mkdir(parents=True, exist_ok=True)
    for s in samples:
        save_image(root / split / "img" / f"{s.name}.png", s.image)
        if s.annotations.pixel_mask is not None:
            save_mask(root / split / "gt_pixel" / f"{s.name}.png", s.annotations.pixel_mask)
        if s.annotations.centerline_mask is not None:
            save_mask(root / split / "gt_centerline" / f"{s.name}.png", s.annotations.centerline_mask)
