"""Train/eval split generation: JSONL records plus one PPM per example."""
from __future__ import annotations
import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Dict, Iterator, List, Optional, Set

import numpy as np
from pydantic import BaseModel, ConfigDict

from svlb.errors import ContractError, MissingArtifactError
from svlb.qa import CATEGORIES, Category, QAExample, gen_qa
from svlb.scene import SceneConfig, SceneSpec, gen_scene, read_ppm, render, scene_hash, write_ppm
from svlb.storage import ensure_dir, write_file

logger = logging.getLogger(__name__)

SPLITS = ("train", "eval")
# eval seeds live in the upper half of each 32-bit block
_EVAL_OFFSET = 1 << 31


class DatasetRecord(BaseModel):
    model_config = ConfigDict(extra="forbid")
    scene: SceneSpec
    category: Category
    question: str
    answer: str
    image_path: str


@dataclass
class SplitFiles:
    jsonl: Dict[str, str]
    images: Dict[str, List[str]]
    counts: Dict[str, int]


def worker_count() -> int:
    try:
        return max(1, int(os.getenv("SVLB_THREADS", "1")))
    except ValueError:
        return 1


def split_seeds(seed: int, split: str) -> Iterator[int]:
    """Disjoint, unbounded scene-seed streams per split."""
    base = (int(seed) & 0xFFFFFFFF) << 32
    if split == "eval":
        base |= _EVAL_OFFSET
    k = 0
    while True:
        yield base + k
        k += 1


def _draw(n: int, seed: int, split: str, config: SceneConfig, forbidden: Set[str]) -> List[QAExample]:
    seeds = split_seeds(seed, split)
    out: List[QAExample] = []
    for i in range(n):
        category = CATEGORIES[i % len(CATEGORIES)]
        while True:
            s = next(seeds)
            scene = gen_scene(s, config)
            if scene_hash(scene) in forbidden:
                logger.debug("%s seed %d collides with another split, regenerating", split, s)
                continue
            qa = gen_qa(scene, category, s)
            if qa is not None:
                out.append(qa)
                break
    return out


def record_line(record: DatasetRecord) -> str:
    body = {
        "scene": record.scene.model_dump(mode="json"),
        "category": record.category.value,
        "question": record.question,
        "answer": record.answer,
        "image_path": record.image_path,
    }
    return json.dumps(body, ensure_ascii=False, separators=(",", ":"))


def make_splits(n_train: int, n_eval: int, seed: int, out_dir: str,
                config: Optional[SceneConfig] = None, threads: Optional[int] = None) -> SplitFiles:
    """Write train.jsonl / eval.jsonl and images/<split>/<index>.ppm under out_dir.

    Category i % 4 is assigned round-robin, so every split is balanced to within one.
    Eval scenes whose content hash occurs in train are regenerated with the next seed.
    """
    config = config or SceneConfig()
    threads = threads or worker_count()
    train = _draw(n_train, seed, "train", config, set())
    train_hashes = {scene_hash(qa.scene) for qa in train}
    evals = _draw(n_eval, seed, "eval", config, train_hashes)

    files = SplitFiles(jsonl={}, images={}, counts={})
    for split, examples in zip(SPLITS, (train, evals)):
        img_dir = os.path.join(out_dir, "images", split)
        ensure_dir(img_dir)
        rels = [f"images/{split}/{i:06d}.ppm" for i in range(len(examples))]

        def _write(job):
            qa, rel = job
            write_ppm(os.path.join(out_dir, rel), render(qa.scene))
            return os.path.join(out_dir, rel)

        with ThreadPoolExecutor(max_workers=threads) as pool:
            paths = list(pool.map(_write, zip(examples, rels)))

        lines = [record_line(DatasetRecord(scene=qa.scene, category=qa.category, question=qa.question,
                                           answer=qa.answer, image_path=rel))
                 for qa, rel in zip(examples, rels)]
        path = os.path.join(out_dir, f"{split}.jsonl")
        write_file(path, "".join(line + "\n" for line in lines).encode("utf-8"))
        files.jsonl[split] = path
        files.images[split] = paths
        files.counts[split] = len(examples)
        logger.info("wrote %d %s examples to %s", len(examples), split, path)
    return files


def load_split(path: str) -> List[DatasetRecord]:
    if not os.path.exists(path):
        raise MissingArtifactError(f"dataset file not found: {path}")
    with open(path, "r", encoding="utf-8") as f:
        return [DatasetRecord.model_validate_json(line) for line in f if line.strip()]


def load_images(records: List[DatasetRecord], root: str, threads: Optional[int] = None) -> List[np.ndarray]:
    """uint8 rasters in record order."""
    def _read(rec: DatasetRecord) -> np.ndarray:
        path = os.path.join(root, rec.image_path)
        if not os.path.exists(path):
            raise MissingArtifactError(f"image not found: {path}")
        return read_ppm(path)

    with ThreadPoolExecutor(max_workers=threads or worker_count()) as pool:
        return list(pool.map(_read, records))


def iterate_batches(n: int, batch: int, steps: int, rng: np.random.Generator) -> Iterator[np.ndarray]:
    """`steps` index batches; each epoch is a fresh permutation and batches never straddle epochs."""
    if steps and n == 0:
        raise ContractError("cannot draw batches from an empty training set")
    batch = min(batch, n)
    perm, pos = rng.permutation(n), 0
    for _ in range(steps):
        if pos + batch > n:
            perm, pos = rng.permutation(n), 0
        yield perm[pos:pos + batch]
        pos += batch
