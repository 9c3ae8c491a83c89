"""Synthetic scenes: symbolic SceneSpec, deterministic generation and integer rasterization."""
from __future__ import annotations
import hashlib
import json
from typing import List, Literal, Tuple

import numpy as np
from PIL import Image, ImageDraw
from pydantic import BaseModel, ConfigDict, model_validator

from svlb.errors import ConfigurationError

PALETTE = {
    "red": (220, 40, 40),
    "green": (40, 170, 60),
    "blue": (40, 80, 220),
    "yellow": (235, 215, 40),
    "purple": (150, 60, 190),
    "orange": (245, 140, 30),
    "cyan": (40, 200, 210),
    "white": (250, 250, 250),
}
SHAPES = ("square", "circle", "triangle")
BACKGROUND = (128, 128, 128)

Color = Literal["red", "green", "blue", "yellow", "purple", "orange", "cyan", "white"]
Shape = Literal["square", "circle", "triangle"]


class SceneObject(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)
    shape: Shape
    color: Color
    cell: Tuple[int, int]
    size: int

    @property
    def row(self) -> int:
        return self.cell[0]

    @property
    def col(self) -> int:
        return self.cell[1]

    @property
    def name(self) -> str:
        return f"{self.color} {self.shape}"


class SceneConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")
    canvas: int = 256
    rows: int = 4
    cols: int = 4
    max_objects: int = 4
    min_objects: int = 1

    @model_validator(mode="after")
    def _feasible(self) -> "SceneConfig":
        if not 1 <= self.min_objects <= self.max_objects <= self.rows * self.cols:
            raise ValueError(f"need 1 <= min_objects <= max_objects <= rows*cols, got "
                             f"{self.min_objects}, {self.max_objects}, {self.rows * self.cols}")
        if self.max_objects > len(PALETTE) * len(SHAPES):
            raise ValueError(f"at most {len(PALETTE) * len(SHAPES)} distinguishable objects per scene")
        if min(self.canvas // self.rows, self.canvas // self.cols) < 6:
            raise ValueError("placement cells must be at least 6 pixels wide")
        return self


class SceneSpec(BaseModel):
    model_config = ConfigDict(extra="forbid")
    canvas: Tuple[int, int]
    rows: int
    cols: int
    objects: List[SceneObject]
    seed: int

    @model_validator(mode="after")
    def _valid(self) -> "SceneSpec":
        cells = [o.cell for o in self.objects]
        if len(set(cells)) != len(cells):
            raise ValueError("at most one object per cell")
        ch, cw = self.cell_size
        for o in self.objects:
            if not (0 <= o.row < self.rows and 0 <= o.col < self.cols):
                raise ValueError(f"cell {o.cell} outside the {self.rows}x{self.cols} grid")
            if not 1 <= o.size <= min(ch, cw):
                raise ValueError(f"object size {o.size} does not fit a {cw}x{ch} cell")
        return self

    @property
    def cell_size(self) -> Tuple[int, int]:
        return self.canvas[0] // self.rows, self.canvas[1] // self.cols

    def box(self, obj: SceneObject) -> Tuple[int, int, int, int]:
        """Pixel box (x0, y0, x1, y1), end-exclusive, centred in the object's cell."""
        ch, cw = self.cell_size
        x0 = obj.col * cw + (cw - obj.size) // 2
        y0 = obj.row * ch + (ch - obj.size) // 2
        return x0, y0, x0 + obj.size, y0 + obj.size


def gen_scene(seed: int, config: SceneConfig) -> SceneSpec:
    if not isinstance(config, SceneConfig):
        raise ConfigurationError("gen_scene needs a SceneConfig")
    rng = np.random.default_rng(seed)
    n = int(rng.integers(config.min_objects, config.max_objects + 1))
    cells = rng.choice(config.rows * config.cols, size=n, replace=False)
    kinds = rng.choice(len(PALETTE) * len(SHAPES), size=n, replace=False)
    cell = min(config.canvas // config.rows, config.canvas // config.cols)
    lo, hi = max(4, cell // 2), cell - 2
    colors = list(PALETTE)
    objects = []
    for c, k in zip(cells, kinds):
        objects.append(SceneObject(
            shape=SHAPES[int(k) % len(SHAPES)],
            color=colors[int(k) // len(SHAPES)],
            cell=(int(c) // config.cols, int(c) % config.cols),
            size=int(rng.integers(lo, hi + 1)),
        ))
    objects.sort(key=lambda o: o.cell)
    return SceneSpec(canvas=(config.canvas, config.canvas), rows=config.rows, cols=config.cols,
                     objects=objects, seed=int(seed))


def render(scene: SceneSpec) -> np.ndarray:
    """H x W x 3 uint8 raster: mid-gray background, solid shapes."""
    h, w = scene.canvas
    img = Image.new("RGB", (w, h), BACKGROUND)
    draw = ImageDraw.Draw(img)
    for obj in scene.objects:
        x0, y0, x1, y1 = scene.box(obj)
        fill = PALETTE[obj.color]
        if obj.shape == "square":
            draw.rectangle([x0, y0, x1 - 1, y1 - 1], fill=fill)
        elif obj.shape == "circle":
            draw.ellipse([x0, y0, x1 - 1, y1 - 1], fill=fill)
        else:
            draw.polygon([((x0 + x1 - 1) // 2, y0), (x0, y1 - 1), (x1 - 1, y1 - 1)], fill=fill)
    return np.array(img, dtype=np.uint8)


def to_unit(image: np.ndarray) -> np.ndarray:
    return np.asarray(image, dtype=np.float64) / 255.0


def mirror_scene(scene: SceneSpec) -> SceneSpec:
    objects = [o.model_copy(update={"cell": (o.row, scene.cols - 1 - o.col)}) for o in scene.objects]
    objects.sort(key=lambda o: o.cell)
    return scene.model_copy(update={"objects": objects})


def scene_hash(scene: SceneSpec) -> str:
    """Content hash; the seed is excluded so identical layouts collide."""
    body = scene.model_dump(mode="json", exclude={"seed"})
    return hashlib.sha256(json.dumps(body, sort_keys=True, separators=(",", ":")).encode("utf-8")).hexdigest()


def write_ppm(path: str, image: np.ndarray) -> bytes:
    """Binary P6, 8-bit, no comments. Returns the bytes written."""
    image = np.ascontiguousarray(image, dtype=np.uint8)
    h, w, _ = image.shape
    data = f"P6\n{w} {h}\n255\n".encode("ascii") + image.tobytes()
    with open(path, "wb") as f:
        f.write(data)
    return data


def read_ppm(path: str) -> np.ndarray:
    with Image.open(path) as img:
        return np.array(img.convert("RGB"), dtype=np.uint8)
