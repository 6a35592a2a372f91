"""Dataset ingestion: validated per-domain indexes over the directory layout
data/<domain>/{images,masks,keypoints,structures}/."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import pngio
from .degrade import Keypoints2D
from .structure import StructureMap
from .synthetic import load_keypoints

DOMAIN_TAGS = ("A1", "A2", "B", "B_tilde", "S", "pairs", "unlabeled")


class DataError(RuntimeError):
    pass


@dataclass
class DatasetEntry:
    stem: str
    image: Path | None
    structure: Path | None = None
    mask: Path | None = None
    keypoints: Path | None = None
    clean: Path | None = None  # paired clean counterpart (B_tilde layout)


@dataclass
class DomainDataset:
    root: Path
    tag: str
    entries: list[DatasetEntry]
    warnings: list[str] = field(default_factory=list)

    def __len__(self):
        return len(self.entries)

    def load_image(self, i: int) -> np.ndarray:
        return pngio.load_image(self.entries[i].image)

    def load_mask(self, i: int) -> np.ndarray | None:
        e = self.entries[i]
        return pngio.load_mask(e.mask) if e.mask else None

    def load_structure(self, i: int, kind: str = "normal") -> StructureMap | None:
        e = self.entries[i]
        if not e.structure:
            return None
        values = pngio.load_structure_png(e.structure, kind)
        if kind == "normal":
            fg = np.linalg.norm(values, axis=0) > 0.5
            values = np.where(fg, values, 0.0).astype(np.float32)
        else:
            fg = np.abs(values).sum(axis=0) > 1e-4
        return StructureMap(values=values, kind=kind, background_mask=~fg)

    def load_keypoints(self, i: int) -> Keypoints2D | None:
        e = self.entries[i]
        return load_keypoints(e.keypoints) if e.keypoints else None


def _decodes(path: Path) -> bool:
    try:
        pngio.load_image(path)
        return True
    except pngio.PngError:
        return False


def ingest_dataset(root: str | Path, tag: str, kind: str = "normal") -> DomainDataset:
    """Build a validated index. Malformed files are reported in .warnings and
    excluded; an empty result is an error. For B_tilde, images/ holds the
    degraded files and clean/ their bare counterparts paired by stem."""
    if tag not in DOMAIN_TAGS:
        raise DataError(f"unknown domain tag {tag!r}")
    root = Path(root)
    warnings_list: list[str] = []
    entries: list[DatasetEntry] = []

    if tag == "S":
        sdir = root / "structures" / kind
        if not sdir.is_dir():
            raise DataError(f"{sdir} does not exist")
        for p in sorted(sdir.glob("*.png")):
            try:
                pngio.load_structure_png(p, kind)
            except pngio.PngError:
                warnings_list.append(f"undecodable structure map: {p}")
                continue
            entries.append(DatasetEntry(stem=p.stem, image=None, structure=p))
    else:
        idir = root / "images"
        if not idir.is_dir():
            raise DataError(f"{idir} does not exist")
        for p in sorted(idir.glob("*.png")):
            if not _decodes(p):
                warnings_list.append(f"undecodable image: {p}")
                continue
            e = DatasetEntry(stem=p.stem, image=p)
            for sub, attr in (("structures", "structure"), ("masks", "mask")):
                q = root / sub / f"{p.stem}.png"
                if q.exists():
                    setattr(e, attr, q)
            q = root / "keypoints" / f"{p.stem}.txt"
            if q.exists():
                e.keypoints = q
            if tag == "B_tilde":
                clean = root / "clean" / f"{p.stem}.png"
                if not clean.exists():
                    raise DataError(
                        f"B_tilde stem {p.stem!r} has no clean counterpart"
                    )
                e.clean = clean
            entries.append(e)

    if not entries:
        raise DataError(f"dataset {root} ({tag}) is empty")
    return DomainDataset(root=root, tag=tag, entries=entries, warnings=warnings_list)


def load_image_stack(ds: DomainDataset, limit: int | None = None) -> np.ndarray:
    n = len(ds) if limit is None else min(limit, len(ds))
    return np.stack([ds.load_image(i) for i in range(n)])


def load_mask_stack(ds: DomainDataset, limit: int | None = None) -> np.ndarray:
    n = len(ds) if limit is None else min(limit, len(ds))
    out = []
    for i in range(n):
        m = ds.load_mask(i)
        if m is None:
            raise DataError(f"{ds.root}: entry {ds.entries[i].stem} has no mask")
        out.append(m)
    return np.stack(out)


def load_structure_stack(ds: DomainDataset, kind: str = "normal",
                         limit: int | None = None) -> np.ndarray:
    n = len(ds) if limit is None else min(limit, len(ds))
    out = []
    for i in range(n):
        s = ds.load_structure(i, kind)
        if s is None:
            raise DataError(f"{ds.root}: entry {ds.entries[i].stem} has no structure")
        out.append(s.values)
    return np.stack(out)
