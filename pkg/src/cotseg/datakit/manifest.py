"""Sample manifests: one JSON record per line."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np
from PIL import Image

from ..errors import CodecError, InvalidInputError
from .rle import decode_mask, encode_mask


class Category(str, Enum):
    SEMANTIC = "semantic"
    REFERRING = "referring"
    REASONING = "reasoning"


@dataclass
class SampleRecord:
    sample_id: str
    image: str
    mask: dict
    category: Category
    text: str
    description: str | None = None
    image_id: str | None = None
    references: list[str] = field(default_factory=list)
    root: Path | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self.category = Category(self.category)
        if not self.text or not self.text.strip():
            raise InvalidInputError(f"{self.sample_id}: empty text payload")
        if self.image_id is None:
            self.image_id = self.sample_id
        if "counts" not in self.mask and "path" not in self.mask:
            raise CodecError(f"{self.sample_id}: mask needs inline 'counts' or a 'path'")

    def image_path(self) -> Path:
        return (self.root or Path(".")) / self.image

    def load_image(self) -> np.ndarray:
        with Image.open(self.image_path()) as im:
            return np.asarray(im.convert("RGB"))

    def load_mask(self) -> np.ndarray:
        if "counts" in self.mask:
            return decode_mask(self.mask)
        with Image.open((self.root or Path(".")) / self.mask["path"]) as im:
            return (np.asarray(im.convert("L")) > 127).astype(np.uint8)

    def to_json(self) -> dict:
        d = asdict(self)
        d.pop("root")
        d["category"] = self.category.value
        if not d["references"]:
            d.pop("references")
        if d["description"] is None:
            d.pop("description")
        return d


def inline_mask(bitmap) -> dict:
    return encode_mask(bitmap)


def load_manifest(path) -> list[SampleRecord]:
    path = Path(path)
    records = []
    with path.open() as fh:
        for line_no, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                payload = json.loads(line)
            except json.JSONDecodeError as exc:
                raise InvalidInputError(f"{path}:{line_no}: {exc}") from exc
            records.append(SampleRecord(**payload, root=path.parent))
    return records


def write_manifest(path, records) -> None:
    path = Path(path)
    with path.open("w") as fh:
        for rec in records:
            fh.write(json.dumps(rec.to_json(), sort_keys=True) + "\n")


def validate_split(train, eval_) -> dict:
    """Report image ids shared between training and evaluation manifests.

    Accepts record lists or lists of record lists (one per manifest).
    """
    train_ids = {r.image_id for r in _flatten(train)}
    eval_ids = {r.image_id for r in _flatten(eval_)}
    overlap = sorted(train_ids & eval_ids)
    return {
        "train_images": len(train_ids),
        "eval_images": len(eval_ids),
        "overlap": overlap,
        "ok": not overlap,
    }


def _flatten(manifests):
    for item in manifests:
        if isinstance(item, SampleRecord):
            yield item
        else:
            yield from item
