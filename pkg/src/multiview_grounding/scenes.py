"""Synthetic 3D scenes and templated referring utterances.

A scene is a set of axis-aligned boxes on the floor of a square room
centered at the origin, each with a category, an RGB color signature, and a
point cloud sampled inside the box (columns r, g, b, x, y, z). Utterances
follow a "the <target> that is <relation> the <anchor>" template. Relations
split into view-dependent ones (left/right/front/behind), judged in a frame
rotated by a hidden speaker angle, and view-independent ones judged by
center distances.

The speaker angle is drawn per utterance and never appears in the tokens:
the grounding model has to cope with not knowing the frame the relation was
judged in, which is exactly what multi-view encoding is for.
"""

from __future__ import annotations

import base64
import colorsys
import json
import math
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from .geometry import rotation_matrix, view_angles

VIEW_DEPENDENT_RELATIONS = ("left-of", "right-of", "in-front-of", "behind")
VIEW_INDEPENDENT_RELATIONS = ("nearest-to", "farthest-from", "closest-to-center")
RELATIONS = VIEW_DEPENDENT_RELATIONS + VIEW_INDEPENDENT_RELATIONS

RELATION_WORDS = {
    "left-of": ("left", "of"),
    "right-of": ("right", "of"),
    "in-front-of": ("in", "front", "of"),
    "behind": ("behind",),
    "nearest-to": ("nearest", "to"),
    "farthest-from": ("farthest", "from"),
}

DEFAULT_CATEGORIES = (
    "chair", "table", "sofa", "bed", "lamp", "desk", "shelf", "cabinet",
    "pillow", "monitor", "plant", "sink", "door", "window", "rug", "stool",
    "bench", "dresser", "mirror", "vase",
)

MIN_EXTENT = 1e-3


class GenerationError(RuntimeError):
    """Rejection sampling exhausted its retry budget."""


@dataclass
class DatasetConfig:
    categories: tuple = DEFAULT_CATEGORIES
    min_objects: int = 10
    max_objects: int = 12
    points_per_object: int = 128
    room_size: float = 6.0              # square room, centered at the origin
    extent_range: tuple = (0.3, 0.9)    # per-axis box size, meters
    color_noise: float = 0.05           # per-point sigma around the category color
    ambiguity_margin: float = 0.15      # meters between best and runner-up
    duplicate_weights: tuple = (0.0, 0.10, 0.30, 0.35, 0.25)  # P(category repeated 1..5 times)
    duplicate_target_bias: float = 0.65  # how strongly utterances favor the repeated category
    view_dependent_fraction: float = 0.30
    min_view_dep_distractors: int = 1   # view-dep referents must have rivals of their class
    reject_frame_ambiguous: bool = True  # drop view-dep samples whose answer flips category-mates across grid frames
    train_size: int = 2000
    eval_size: int = 500
    placement_retries: int = 200
    scene_retries: int = 20
    utterance_retries: int = 40
    clearance: float = 0.05             # extra spacing beyond box separation

    def to_dict(self):
        d = asdict(self)
        d["categories"] = list(self.categories)
        d["extent_range"] = list(self.extent_range)
        d["duplicate_weights"] = list(self.duplicate_weights)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        for key in ("categories", "extent_range", "duplicate_weights"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


@dataclass
class ObjectInstance:
    category_id: int
    center: np.ndarray      # (3,)
    extent: np.ndarray      # (3,) per-axis box size
    color_signature: np.ndarray  # (3,) rgb in [0, 1]
    points: np.ndarray      # (P, 6) columns r, g, b, x, y, z


@dataclass
class Scene:
    scene_id: str
    objects: list


@dataclass
class Utterance:
    tokens: list
    target_index: int
    view_dependent: bool
    distractor_count: int
    relation: str
    anchor_index: int | None
    speaker_angle: float


@dataclass
class Sample:
    scene: Scene
    utterance: Utterance

    @property
    def difficulty(self) -> str:
        return "hard" if self.utterance.distractor_count > 2 else "easy"

    @property
    def view_tag(self) -> str:
        return "dep" if self.utterance.view_dependent else "indep"


@dataclass
class DatasetSplit:
    samples: list = field(default_factory=list)

    def __len__(self):
        return len(self.samples)

    def tag_counts(self):
        counts = {"easy": 0, "hard": 0, "dep": 0, "indep": 0}
        for s in self.samples:
            counts[s.difficulty] += 1
            counts[s.view_tag] += 1
        return counts


def category_palette(n: int) -> np.ndarray:
    """Deterministic, well-separated RGB signature per category."""
    colors = np.empty((n, 3))
    for i in range(n):
        hue = (i * 0.6180339887498949) % 1.0
        value = 0.9 if i % 2 == 0 else 0.55
        colors[i] = colorsys.hsv_to_rgb(hue, 0.65, value)
    return colors


def _boxes_separated(c1, e1, c2, e2, clearance=0.0) -> bool:
    gap = np.abs(c1 - c2) - (e1 + e2) / 2.0
    return bool((gap >= clearance).any())


def _sample_object(rng, config, category_id, palette) -> ObjectInstance:
    lo, hi = config.extent_range
    extent = rng.uniform(lo, hi, size=3)
    half_room = config.room_size / 2.0
    cx, cy = rng.uniform(-half_room + extent[0] / 2.0, half_room - extent[0] / 2.0), rng.uniform(
        -half_room + extent[1] / 2.0, half_room - extent[1] / 2.0
    )
    center = np.array([cx, cy, extent[2] / 2.0])  # resting on the floor
    color = palette[category_id]
    xyz = rng.uniform(center - extent / 2.0, center + extent / 2.0, size=(config.points_per_object, 3))
    rgb = np.clip(color + rng.normal(0.0, config.color_noise, size=(config.points_per_object, 3)), 0.0, 1.0)
    return ObjectInstance(
        category_id=int(category_id),
        center=center,
        extent=extent,
        color_signature=np.array(color),
        points=np.concatenate([rgb, xyz], axis=1),
    )


def generate_scene(rng, config: DatasetConfig, scene_id: str = "scene") -> Scene:
    """Sample a scene with non-overlapping boxes and one repeated category.

    One category is instantiated up to five times (the future distractor
    group); every other category appears once. Placement is rejection
    sampling: objects must be separated along some axis by at least half the
    sum of their extents plus the configured clearance.
    """
    palette = category_palette(len(config.categories))
    for _ in range(config.scene_retries):
        n_objects = int(rng.integers(config.min_objects, config.max_objects + 1))
        weights = np.array(config.duplicate_weights, dtype=np.float64)
        n_dup = int(rng.choice(np.arange(1, len(weights) + 1), p=weights / weights.sum()))
        n_dup = min(n_dup, n_objects - 1)  # leave room for at least one other category
        order = rng.permutation(len(config.categories))
        dup_category = int(order[0])
        categories = [dup_category] * n_dup + [int(c) for c in order[1 : 1 + n_objects - n_dup]]

        objects = []
        ok = True
        for cat in categories:
            placed = None
            for _ in range(config.placement_retries):
                cand = _sample_object(rng, config, cat, palette)
                if all(
                    _boxes_separated(cand.center, cand.extent, o.center, o.extent, config.clearance)
                    for o in objects
                ):
                    placed = cand
                    break
            if placed is None:
                ok = False
                break
            objects.append(placed)
        if ok:
            return Scene(scene_id=scene_id, objects=objects)
    raise GenerationError(f"could not place {config.max_objects} boxes after retries")


def relation_oracle(scene: Scene, relation: str, anchor_index, speaker_angle: float,
                    margin: float = 0.15):
    """Ground-truth referent for a relation, or ``None`` when ambiguous.

    View-dependent relations are judged on centers rotated into the
    speaker's frame: left/right rank by signed x offset from the anchor,
    front/behind by signed y (front means toward the speaker, i.e. smaller
    y). View-independent relations rank by center distance; ``closest-to-
    center`` uses horizontal distance to the room origin and needs no
    anchor. The best candidate wins only if it is on the claimed side and
    beats the runner-up by ``margin`` meters.
    """
    if relation not in RELATIONS:
        raise ValueError(f"unknown relation {relation!r}")
    anchored = relation != "closest-to-center"
    if anchored and anchor_index is None:
        raise ValueError(f"relation {relation!r} needs an anchor object")

    centers = np.array([o.center for o in scene.objects])
    rotated = centers @ rotation_matrix(speaker_angle).T
    if anchored:
        anchor = rotated[anchor_index]

    require_positive = relation in VIEW_DEPENDENT_RELATIONS
    if relation == "left-of":
        scores = anchor[0] - rotated[:, 0]
    elif relation == "right-of":
        scores = rotated[:, 0] - anchor[0]
    elif relation == "in-front-of":
        scores = anchor[1] - rotated[:, 1]
    elif relation == "behind":
        scores = rotated[:, 1] - anchor[1]
    elif relation == "nearest-to":
        scores = -np.linalg.norm(rotated - anchor, axis=1)
    elif relation == "farthest-from":
        scores = np.linalg.norm(rotated - anchor, axis=1)
    else:  # closest-to-center
        scores = -np.linalg.norm(rotated[:, :2], axis=1)

    candidates = [i for i in range(len(scene.objects)) if not (anchored and i == anchor_index)]
    ranked = sorted(candidates, key=lambda i: -scores[i])
    best = ranked[0]
    if require_positive and scores[best] <= 0.0:
        return None
    if len(ranked) > 1 and scores[best] - scores[ranked[1]] < margin:
        return None
    return best


def _sample_speaker_angle(rng) -> float:
    base = float(rng.choice(view_angles(4)))
    return base + float(rng.uniform(-math.pi / 8.0, math.pi / 8.0))


def generate_utterance(rng, scene: Scene, config: DatasetConfig, view_dependent=None):
    """Build a templated utterance with an oracle-verified target.

    Returns ``None`` when no unambiguous relation is found within the retry
    budget (callers resample the scene). Anchors are restricted to objects
    whose category is unique in the scene so the anchor phrase itself cannot
    be ambiguous. Attempts are biased toward targets in the repeated
    category so that distractor-heavy ("hard") samples actually occur.

    ``view_dependent`` commits the relation family up front; leaving it
    unset draws the commitment from the configured mixture. Rejected
    attempts never fall back to the other family, so the emitted mixture
    matches the configuration.
    """
    counts = np.bincount([o.category_id for o in scene.objects], minlength=len(config.categories))
    unique_idx = [i for i, o in enumerate(scene.objects) if counts[o.category_id] == 1]
    want_dup_target = rng.random() < config.duplicate_target_bias
    view_dep = (rng.random() < config.view_dependent_fraction
                if view_dependent is None else bool(view_dependent))

    for attempt in range(config.utterance_retries):
        relation = str(rng.choice(VIEW_DEPENDENT_RELATIONS if view_dep else VIEW_INDEPENDENT_RELATIONS))
        speaker_angle = _sample_speaker_angle(rng) if view_dep else 0.0
        if relation == "closest-to-center":
            anchor_index = None
        else:
            if not unique_idx:
                return None
            anchor_index = int(rng.choice(unique_idx))
        target = relation_oracle(scene, relation, anchor_index, speaker_angle,
                                 margin=config.ambiguity_margin)
        if target is None:
            continue
        distractors = int(counts[scene.objects[target].category_id] - 1)
        # the category word alone must never resolve a view-dependent query
        if view_dep and distractors < config.min_view_dep_distractors:
            continue
        if view_dep and config.reject_frame_ambiguous:
            category = scene.objects[target].category_id
            alternates = {
                relation_oracle(scene, relation, anchor_index, angle,
                                margin=config.ambiguity_margin)
                for angle in view_angles(4)
            }
            alternates.discard(None)
            alternates.discard(target)
            if any(scene.objects[z].category_id == category for z in alternates):
                continue
        # hold out for a distractor-rich target during the first attempts
        if want_dup_target and distractors == 0 and attempt < config.utterance_retries // 2:
            continue
        target_word = config.categories[scene.objects[target].category_id]
        if relation == "closest-to-center":
            tokens = ["the", target_word, "that", "is", "closest", "to", "the", "center"]
        else:
            anchor_word = config.categories[scene.objects[anchor_index].category_id]
            tokens = ["the", target_word, "that", "is", *RELATION_WORDS[relation], "the", anchor_word]
        return Utterance(
            tokens=tokens,
            target_index=int(target),
            view_dependent=view_dep,
            distractor_count=distractors,
            relation=relation,
            anchor_index=anchor_index,
            speaker_angle=float(speaker_angle),
        )
    return None


def generate_sample(rng, config: DatasetConfig, scene_id: str) -> Sample:
    view_dep = rng.random() < config.view_dependent_fraction
    for _ in range(config.scene_retries):
        scene = generate_scene(rng, config, scene_id=scene_id)
        utterance = generate_utterance(rng, scene, config, view_dependent=view_dep)
        if utterance is not None:
            return Sample(scene=scene, utterance=utterance)
    raise GenerationError("could not produce an unambiguous utterance")


def build_dataset(config: DatasetConfig, seed: int) -> dict:
    """Generate {train, eval} splits with disjoint scene ids."""
    rng = np.random.default_rng(seed)
    splits = {}
    counter = 0
    for name, size in (("train", config.train_size), ("eval", config.eval_size)):
        samples = []
        for _ in range(size):
            samples.append(generate_sample(rng, config, scene_id=f"scene-{counter:05d}"))
            counter += 1
        splits[name] = DatasetSplit(samples=samples)
    return splits


def rotate_scene(scene: Scene, angle: float) -> Scene:
    """Rotate every center and point cloud about the world z-axis.

    Extents are kept verbatim: the model only consumes their norm, which a
    rigid rotation cannot change.
    """
    rot = rotation_matrix(angle)
    objects = []
    for o in scene.objects:
        points = o.points.copy()
        points[:, 3:6] = points[:, 3:6] @ rot.T
        objects.append(
            ObjectInstance(
                category_id=o.category_id,
                center=o.center @ rot.T,
                extent=o.extent.copy(),
                color_signature=o.color_signature.copy(),
                points=points,
            )
        )
    return Scene(scene_id=scene.scene_id, objects=objects)


# ---------------------------------------------------------------------------
# serialization: JSON lines plus a sidecar metadata file


def _encode_array(a: np.ndarray) -> str:
    return base64.b64encode(np.ascontiguousarray(a, dtype="<f8").tobytes()).decode("ascii")


def _decode_array(s: str, shape) -> np.ndarray:
    return np.frombuffer(base64.b64decode(s.encode("ascii")), dtype="<f8").reshape(shape).copy()


def sample_to_json(sample: Sample) -> dict:
    u = sample.utterance
    return {
        "scene": {
            "id": sample.scene.scene_id,
            "objects": [
                {
                    "category": o.category_id,
                    "center": o.center.tolist(),
                    "extent": o.extent.tolist(),
                    "color": o.color_signature.tolist(),
                    "points": _encode_array(o.points),
                }
                for o in sample.scene.objects
            ],
        },
        "utterance": {
            "tokens": u.tokens,
            "target_index": u.target_index,
            "relation": u.relation,
            "anchor_index": u.anchor_index,
            "view_dependent": u.view_dependent,
            "speaker_angle": u.speaker_angle,
            "distractor_count": u.distractor_count,
        },
        "tags": {"difficulty": sample.difficulty, "view": sample.view_tag},
    }


def sample_from_json(d: dict, points_per_object: int) -> Sample:
    objects = [
        ObjectInstance(
            category_id=int(o["category"]),
            center=np.array(o["center"]),
            extent=np.array(o["extent"]),
            color_signature=np.array(o["color"]),
            points=_decode_array(o["points"], (points_per_object, 6)),
        )
        for o in d["scene"]["objects"]
    ]
    u = d["utterance"]
    return Sample(
        scene=Scene(scene_id=d["scene"]["id"], objects=objects),
        utterance=Utterance(
            tokens=list(u["tokens"]),
            target_index=int(u["target_index"]),
            view_dependent=bool(u["view_dependent"]),
            distractor_count=int(u["distractor_count"]),
            relation=u["relation"],
            anchor_index=None if u["anchor_index"] is None else int(u["anchor_index"]),
            speaker_angle=float(u["speaker_angle"]),
        ),
    )


def save_dataset(splits: dict, out_dir: str, config: DatasetConfig, seed: int):
    """Write one JSON-lines file per split plus ``metadata.json``."""
    os.makedirs(out_dir, exist_ok=True)
    stats = {}
    for name, split in splits.items():
        path = os.path.join(out_dir, f"{name}.jsonl")
        with open(path, "w") as fh:
            for sample in split.samples:
                fh.write(json.dumps(sample_to_json(sample)) + "\n")
        stats[name] = {"size": len(split), **split.tag_counts()}
    meta = {
        "config": config.to_dict(),
        "seed": seed,
        "categories": list(config.categories),
        "splits": stats,
    }
    with open(os.path.join(out_dir, "metadata.json"), "w") as fh:
        json.dump(meta, fh, indent=2)


def load_dataset(data_dir: str):
    """Read splits and metadata back; returns (splits, metadata)."""
    meta_path = os.path.join(data_dir, "metadata.json")
    if not os.path.exists(meta_path):
        raise FileNotFoundError(f"no dataset metadata at {meta_path}")
    with open(meta_path) as fh:
        meta = json.load(fh)
    points = int(meta["config"]["points_per_object"])
    splits = {}
    for name in meta["splits"]:
        path = os.path.join(data_dir, f"{name}.jsonl")
        with open(path) as fh:
            samples = [sample_from_json(json.loads(line), points) for line in fh if line.strip()]
        splits[name] = DatasetSplit(samples=samples)
    return splits, meta
