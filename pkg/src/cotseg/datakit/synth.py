"""Synthetic attribute benchmark: coloured shapes on textured backgrounds.

Each scene holds two or three shapes. Most scenes contain a second shape of
the target's kind in another colour, so the target's name alone is ambiguous
and only its colour and position identify it. Alongside the images and
manifest the generator writes a backend script containing the language
model side of every conversation.
"""
from __future__ import annotations

import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from ..backend import BackendDescriptor, RecordingBackend, ScriptedBackend, SequenceBackend
from ..orchestrator import ChainMode, run_chain
from ..validation import check_random_state
from .manifest import Category, SampleRecord, inline_mask, write_manifest
from .qa import DEFAULT_QA_TEMPLATES, simulate_step1

COLORS = {
    "red": (215, 45, 40),
    "green": (45, 165, 70),
    "blue": (45, 85, 215),
    "yellow": (230, 205, 40),
}
COLOR_CLUES = {
    "red": "has the colour of a ripe tomato",
    "green": "has the colour of fresh grass",
    "blue": "has the colour of a clear sky",
    "yellow": "has the colour of a banana",
}
SHAPES = ("circle", "square", "triangle")
SHAPE_CLUES = {
    "circle": ("shaped like a coin", "a coin is round"),
    "square": ("shaped like a box", "a box has four equal sides"),
    "triangle": ("shaped like a slice of pizza", "a slice of pizza has three corners"),
}
SHAPE_ADJ = {"circle": "round", "square": "boxy", "triangle": "pointed"}


@dataclass(frozen=True)
class SceneObject:
    shape: str
    color: str
    cy: int
    cx: int
    radius: int

    def position(self, size: int) -> str:
        vert = "upper" if self.cy < size / 2 else "lower"
        horiz = "left" if self.cx < size / 2 else "right"
        return f"{vert} {horiz}"

    def mask(self, size: int) -> np.ndarray:
        yy, xx = np.mgrid[0:size, 0:size]
        dy, dx = yy - self.cy, xx - self.cx
        r = self.radius
        if self.shape == "circle":
            m = dy**2 + dx**2 <= r**2
        elif self.shape == "square":
            m = (np.abs(dy) <= r * 0.85) & (np.abs(dx) <= r * 0.85)
        else:
            # apex up; base at cy + r
            m = (dy <= r) & (dy >= -r) & (np.abs(dx) <= (dy + r) / 2.0)
        return m.astype(np.uint8)


def _background(size: int, rng: np.random.Generator) -> np.ndarray:
    base = rng.uniform(90, 160)
    coarse = rng.normal(0, 14, size=(size // 8, size // 8, 3))
    coarse = np.kron(coarse, np.ones((8, 8, 1)))
    fine = rng.normal(0, 6, size=(size, size, 3))
    return base + coarse + fine


def _place(rng, size, n, shapes, colors, ambiguous: bool):
    target_shape = shapes[int(rng.integers(len(shapes)))]
    target_color = colors[int(rng.integers(len(colors)))]
    specs = [(target_shape, target_color)]
    if ambiguous:
        other = [c for c in colors if c != target_color]
        specs.append((target_shape, other[int(rng.integers(len(other)))]))
    while len(specs) < n:
        s = shapes[int(rng.integers(len(shapes)))]
        c = colors[int(rng.integers(len(colors)))]
        if (s, c) in specs or (not ambiguous and s == target_shape):
            continue
        specs.append((s, c))
    objs: list[SceneObject] = []
    for shape, color in specs:
        for _ in range(200):
            r = int(rng.integers(size // 10, size // 6 + 1))
            cy = int(rng.integers(r + 1, size - r - 1))
            cx = int(rng.integers(r + 1, size - r - 1))
            if all((cy - o.cy) ** 2 + (cx - o.cx) ** 2 > (r + o.radius + 3) ** 2 for o in objs):
                objs.append(SceneObject(shape, color, cy, cx, r))
                break
        else:
            return None
    return objs


def render_scene(objs, size: int, rng: np.random.Generator) -> np.ndarray:
    img = _background(size, rng)
    for o in objs:
        m = o.mask(size).astype(bool)
        shade = np.array(COLORS[o.color], dtype=float) + rng.normal(0, 8, size=(size, size, 3))
        img[m] = shade[m]
    return np.clip(img, 0, 255).astype(np.uint8)


def chain_texts(objs, target_idx: int, size: int) -> dict:
    """Scripted language-model responses for one scene."""
    t = objs[target_idx]
    shape_clue, shape_fact = SHAPE_CLUES[t.shape]
    query = f"{shape_clue} and {COLOR_CLUES[t.color]}"
    others = [f"a {o.color} {o.shape}" for i, o in enumerate(objs) if i != target_idx]
    reason = (
        f"It is the {t.shape}. Because {shape_fact}, the answer is the {t.shape}. "
        f"The image also shows {' and '.join(others)}."
    )
    target = f"The user wants the {t.shape} from the image."
    attributes = (
        f"The {t.shape} can be discriminated by its {t.color} color and its {SHAPE_ADJ[t.shape]} shape. "
        f"It is located in the {t.position(size)} part of the image."
    )
    return {"query": query, "reason": reason, "target": target, "attributes": attributes}


def qa_rng(seed: int, sample_id: str) -> np.random.Generator:
    return np.random.default_rng([seed, zlib.crc32(sample_id.encode())])


def script_sample(script: ScriptedBackend, image, texts: dict, simulated=None) -> None:
    """Record the responses of ``texts`` for both chain modes."""
    width = script.embedding_width
    rec = RecordingBackend(SequenceBackend([], width), script)
    merged = ([] if simulated else [texts["reason"]]) + [texts["target"] + " " + texts["attributes"]]
    rec.inner = SequenceBackend(merged, width)
    run_chain(image, texts["query"], rec, ChainMode.MERGED, simulated_step1=simulated)
    separate = ([] if simulated else [texts["reason"]]) + [texts["target"], texts["attributes"]]
    rec.inner = SequenceBackend(separate, width)
    run_chain(image, texts["query"], rec, ChainMode.SEPARATE, simulated_step1=simulated)


def make_synthetic(
    out_dir,
    count: int,
    *,
    image_size: int = 64,
    seed: int = 0,
    colors=tuple(COLORS),
    shapes=SHAPES,
    ambiguous_fraction: float = 0.8,
    referring_fraction: float = 0.0,
    embedding_width: int = 64,
    id_prefix: str = "syn",
    qa_seed: int = 0,
) -> list[SampleRecord]:
    """Write ``count`` scenes plus ``manifest.jsonl``, ``script.json`` and
    ``backend.json`` under ``out_dir``."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    rng = check_random_state(seed)
    colors, shapes = list(colors), list(shapes)
    script = ScriptedBackend(embedding_width=embedding_width, model="synthetic-script")
    records = []
    while len(records) < count:
        ambiguous = rng.random() < ambiguous_fraction
        n = int(rng.integers(2, 4))
        objs = _place(rng, image_size, n, shapes, colors, ambiguous)
        if objs is None:
            continue
        image = render_scene(objs, image_size, rng)
        texts = chain_texts(objs, 0, image_size)
        sid = f"{id_prefix}{len(records):05d}"
        rel = f"images/{sid}.png"
        Image.fromarray(image).save(out / rel)
        mask = objs[0].mask(image_size)
        referring = rng.random() < referring_fraction
        t = objs[0]
        record = SampleRecord(
            sample_id=sid,
            image=rel,
            mask=inline_mask(mask),
            category=Category.REFERRING if referring else Category.REASONING,
            text=f"the {t.color} {t.shape}" if referring else texts["query"],
            description=f"the {t.color} {t.shape} in the {t.position(image_size)} part",
            references=[texts["reason"]],
            root=out,
        )
        simulated = simulate_step1(record, DEFAULT_QA_TEMPLATES, qa_rng(qa_seed, sid)) if referring else None
        script_sample(script, image, texts, simulated)
        records.append(record)
    write_manifest(out / "manifest.jsonl", records)
    script.save(out / "script.json")
    BackendDescriptor("scripted", "script.json", embedding_width, "synthetic-script").dump(out / "backend.json")
    return records


def fire_pit_scene(size: int = 64, seed: int = 7) -> tuple[np.ndarray, np.ndarray]:
    """A grey stone ring with an orange flame in the middle."""
    rng = np.random.default_rng(seed)
    img = _background(size, rng) * 0.6 + np.array([40, 50, 30])
    yy, xx = np.mgrid[0:size, 0:size]
    cy, cx = size * 0.55, size / 2
    d = np.sqrt((yy - cy) ** 2 + (xx - cx) ** 2)
    ring = (d > size * 0.2) & (d < size * 0.3)
    img[ring] = np.array([130, 130, 125]) + rng.normal(0, 10, size=(int(ring.sum()), 3))
    flame = (((xx - cx) / (size * 0.13)) ** 2 + ((yy - cy + size * 0.04) / (size * 0.18)) ** 2) <= 1.0
    img[flame] = np.array([245, 140, 30]) + rng.normal(0, 10, size=(int(flame.sum()), 3))
    return np.clip(img, 0, 255).astype(np.uint8), flame.astype(np.uint8)


FIRE_PIT = {
    "query": "What is the object or part that is hot in this image?",
    "reason": "It is fire in the fire pit. The fire is hot and gives off light and heat for the campers.",
    "target": "The user wants the fire from the image.",
    "attributes": (
        "The fire can be discriminated from the image by its bright orange color and the fact that it is "
        "emitting heat and light. The fire is surrounded by the grey stones of the pit."
    ),
}


def make_fire_pit_bundle(out_dir, embedding_width: int = 64) -> dict:
    """Demo inputs: image, ground-truth mask, script and backend descriptor."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    image, mask = fire_pit_scene()
    Image.fromarray(image).save(out / "fire_pit.png")
    Image.fromarray(mask * 255).save(out / "fire_pit_mask.png")
    script = ScriptedBackend(embedding_width=embedding_width, model="demo-script")
    script_sample(script, image, FIRE_PIT)
    script.save(out / "script.json")
    BackendDescriptor("scripted", "script.json", embedding_width, "demo-script").dump(out / "backend.json")
    return {"image": out / "fire_pit.png", "mask": out / "fire_pit_mask.png", "backend": out / "backend.json", "query": FIRE_PIT["query"]}
