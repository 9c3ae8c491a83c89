"""Question/answer templates over a SceneSpec, with a predicate trace per answer."""
from __future__ import annotations
import logging
from enum import Enum
from typing import Any, Dict, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict

from svlb.scene import PALETTE, SHAPES, SceneSpec
from svlb.vocab import plural

logger = logging.getLogger(__name__)


class Category(str, Enum):
    RELATION_LR = "relation_lr"
    RELATION_AB = "relation_ab"
    COUNT = "count"
    EXISTENCE = "existence"


CATEGORIES = list(Category)


class QAExample(BaseModel):
    model_config = ConfigDict(extra="forbid")
    scene: SceneSpec
    category: Category
    question: str
    answer: str
    derivation: Dict[str, Any]


def caption(scene: SceneSpec) -> str:
    """Declarative restatement, e.g. "red square at 0 1 ; blue circle at 2 3"."""
    return " ; ".join(f"{o.color} {o.shape} at {o.row} {o.col}" for o in scene.objects)


def _relation(scene: SceneSpec, rng: np.random.Generator, axis: int, words) -> Optional[QAExample]:
    objs = scene.objects
    # ordered by name so the choice survives a mirror of the layout
    pairs = sorted(((i, j) for i in range(len(objs)) for j in range(len(objs))
                    if i != j and objs[i].cell[axis] != objs[j].cell[axis]),
                   key=lambda ij: (objs[ij[0]].name, objs[ij[1]].name))
    if not pairs:
        return None
    i, j = pairs[int(rng.integers(len(pairs)))]
    a, b = objs[i], objs[j]
    lhs, rhs = a.cell[axis], b.cell[axis]
    answer = words[0] if lhs < rhs else words[1]
    if axis == 1:
        question = f"is the {a.name} left or right of the {b.name} ?"
    else:
        question = f"is the {a.name} above or below the {b.name} ?"
    trace = {"predicate": "col_lt" if axis == 1 else "row_lt", "a": a.name, "b": b.name,
             "lhs": lhs, "rhs": rhs, "holds": lhs < rhs}
    category = Category.RELATION_LR if axis == 1 else Category.RELATION_AB
    return QAExample(scene=scene, category=category, question=question, answer=answer, derivation=trace)


def _count(scene: SceneSpec, rng: np.random.Generator) -> Optional[QAExample]:
    if not scene.objects:
        return None
    filters = sorted({("shape", o.shape) for o in scene.objects} | {("color", o.color) for o in scene.objects})
    attr, value = filters[int(rng.integers(len(filters)))]
    matches = [o.name for o in scene.objects if getattr(o, attr) == value]
    if attr == "shape":
        question = f"how many {plural(value)} are there ?"
    else:
        question = f"how many {value} objects are there ?"
    trace = {"predicate": "count", "filter": {attr: value}, "matches": matches}
    return QAExample(scene=scene, category=Category.COUNT, question=question,
                     answer=str(len(matches)), derivation=trace)


def _existence(scene: SceneSpec, rng: np.random.Generator) -> Optional[QAExample]:
    present = sorted(o.name for o in scene.objects)
    absent = [f"{c} {s}" for c in PALETTE for s in SHAPES if f"{c} {s}" not in present]
    want = bool(rng.integers(2))
    pool = present if want else absent
    if not pool:
        pool, want = (absent, False) if want else (present, True)
    name = pool[int(rng.integers(len(pool)))]
    trace = {"predicate": "exists", "object": name, "holds": name in present}
    return QAExample(scene=scene, category=Category.EXISTENCE, question=f"is there a {name} ?",
                     answer="yes" if want else "no", derivation=trace)


def gen_qa(scene: SceneSpec, category: Category, seed: int) -> Optional[QAExample]:
    """One example for `category`, or None when the scene cannot support it."""
    rng = np.random.default_rng(seed)
    category = Category(category)
    if category == Category.RELATION_LR:
        qa = _relation(scene, rng, 1, ("left", "right"))
    elif category == Category.RELATION_AB:
        qa = _relation(scene, rng, 0, ("above", "below"))
    elif category == Category.COUNT:
        qa = _count(scene, rng)
    else:
        qa = _existence(scene, rng)
    if qa is None:
        logger.debug("scene %d cannot support %s", scene.seed, category.value)
    return qa
