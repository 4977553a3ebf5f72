"""Task registry, synthetic suites, manifests, batching and augmentation."""

from __future__ import annotations

import base64
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from .errors import ConfigurationError, DataError, LeakError, SchemaError
from .losses import LossKind

SPLITS = ("pretrain", "train", "val", "test")
LABEL_MODES = ("multilabel", "multiclass", "binary")


@dataclass(frozen=True)
class TaskSpec:
    task_id: int
    name: str
    label_mode: str
    class_names: tuple
    loss_kind: LossKind = None

    def __post_init__(self):
        object.__setattr__(self, "class_names", tuple(self.class_names))
        if self.label_mode not in LABEL_MODES:
            raise SchemaError(f"task {self.name!r}: unknown label_mode {self.label_mode!r}")
        if not self.class_names:
            raise SchemaError(f"task {self.name!r}: class_names is empty")
        if len(set(self.class_names)) != len(self.class_names):
            raise SchemaError(f"task {self.name!r}: duplicate class names")
        if self.label_mode == "binary" and len(self.class_names) != 1:
            raise SchemaError(f"task {self.name!r}: binary tasks carry exactly one class name")
        if self.label_mode == "multiclass" and len(self.class_names) < 2:
            raise SchemaError(f"task {self.name!r}: multiclass tasks need at least two classes")
        expected = LossKind.CE_MULTICLASS if self.label_mode == "multiclass" else LossKind.BCE_MULTILABEL
        kind = expected if self.loss_kind is None else LossKind(self.loss_kind)
        if kind is not expected:
            raise SchemaError(f"task {self.name!r}: {self.label_mode} labels need loss {expected.value}")
        object.__setattr__(self, "loss_kind", kind)

    @property
    def n_classes(self) -> int:
        return len(self.class_names)

    def to_json(self) -> dict:
        return {
            "task_id": self.task_id,
            "name": self.name,
            "label_mode": self.label_mode,
            "class_names": list(self.class_names),
            "loss_kind": self.loss_kind.value,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "TaskSpec":
        keys = {"task_id", "name", "label_mode", "class_names", "loss_kind"}
        if not isinstance(obj, dict):
            raise SchemaError("TaskSpec header must be a JSON object")
        unknown = set(obj) - keys
        missing = keys - {"loss_kind"} - set(obj)
        if unknown or missing:
            raise SchemaError(f"TaskSpec header: unknown keys {sorted(unknown)}, missing {sorted(missing)}")
        return cls(int(obj["task_id"]), str(obj["name"]), obj["label_mode"], obj["class_names"], obj.get("loss_kind"))


@dataclass
class SampleRecord:
    """One image with labels in its task's schema.

    ``labels`` is a 0/1 vector for multilabel/binary tasks and a class index
    for multiclass tasks.
    """

    id: str
    image: np.ndarray
    labels: object
    split: str
    subgroup: str | None = None
    image_path: str | None = None
    render: list | None = None


@dataclass
class DatasetManifest:
    task: TaskSpec
    records: list
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def split(self, name: str) -> list:
        return [r for r in self.records if r.split == name]

    def arrays(self, split: str):
        """Stacked ``(ids, images, targets)`` for one split, cached."""
        if split not in self._cache:
            recs = self.split(split)
            ids = [r.id for r in recs]
            images = np.stack([r.image for r in recs]) if recs else np.zeros((0,))
            targets = label_array(self.task, [r.labels for r in recs])
            self._cache[split] = (ids, images, targets)
        return self._cache[split]

    @property
    def image_shape(self) -> tuple:
        return self.records[0].image.shape


def label_array(task: TaskSpec, labels: list) -> np.ndarray:
    if task.label_mode == "multiclass":
        return np.asarray(labels, dtype=np.int64).reshape(-1)
    return np.asarray(labels, dtype=np.float64).reshape(len(labels), task.n_classes)


def label_matrix(task: TaskSpec, targets: np.ndarray) -> np.ndarray:
    """0/1 indicator matrix (n x k) for any label mode."""
    if task.label_mode == "multiclass":
        out = np.zeros((len(targets), task.n_classes))
        out[np.arange(len(targets)), targets.astype(np.int64)] = 1.0
        return out
    return np.asarray(targets, dtype=np.float64)


# -- synthetic rendering --------------------------------------------------


def _mask(kind: str, dx: np.ndarray, dy: np.ndarray, r: float) -> np.ndarray:
    ax, ay = np.abs(dx), np.abs(dy)
    t = max(r / 4.0, 0.75)
    if kind == "disk":
        return dx * dx + dy * dy <= r * r
    if kind == "ring":
        d2 = dx * dx + dy * dy
        return (d2 <= r * r) & (d2 >= (0.55 * r) ** 2)
    if kind == "square":
        return np.maximum(ax, ay) <= 0.8 * r
    if kind == "frame":
        m = np.maximum(ax, ay)
        return (m <= 0.85 * r) & (m >= 0.45 * r)
    if kind == "diamond":
        return ax + ay <= r
    if kind == "plus":
        return ((ax <= t) & (ay <= r)) | ((ay <= t) & (ax <= r))
    if kind == "xmark":
        return (np.abs(ax - ay) <= t) & (ax <= 0.8 * r)
    if kind == "hbar":
        return (ay <= t) & (ax <= r)
    if kind == "vbar":
        return (ax <= t) & (ay <= r)
    if kind == "triangle":
        return (dy <= 0.7 * r) & (dy >= -r) & (ax <= (dy + r) / 2.0)
    if kind == "stripes":
        return (np.maximum(ax, ay) <= 0.8 * r) & (np.floor(dy + r) % 4 < 2)
    if kind == "checker":
        return (np.maximum(ax, ay) <= 0.8 * r) & ((np.floor(dx + r) // 2 + np.floor(dy + r) // 2) % 2 == 0)
    if kind == "corner":
        return (np.maximum(ax, ay) <= 0.8 * r) & (((dx <= -0.4 * r) & (ax <= 0.8 * r)) | ((dy >= 0.4 * r) & (ay <= 0.8 * r)))
    if kind == "dots":
        return ((np.floor(dx + r) % 4 < 2) & (np.floor(dy + r) % 4 < 2)) & (np.maximum(ax, ay) <= 0.8 * r)
    if kind == "halfdisk":
        return (dx * dx + dy * dy <= r * r) & (dy >= 0)
    if kind == "tee":
        return ((np.abs(dy + 0.7 * r) <= t) & (ax <= r)) | ((ax <= t) & (dy >= -0.7 * r) & (dy <= r))
    raise ConfigurationError(f"unknown primitive {kind!r}")


CONCEPTS = (
    "disk", "square", "ring", "plus", "triangle", "frame", "diamond", "xmark",
    "hbar", "vbar", "stripes", "checker", "corner", "dots", "halfdisk", "tee",
)

MIN_IMAGE_SIDE = 12


def render_image(size: int, primitives: list, style: dict, noise_seed) -> np.ndarray:
    """Render primitives ``(concept, cx, cy, radius, intensity)`` to a 1 x size x size image.

    ``style`` keys: ``contrast`` scales primitive intensity, ``gradient`` adds
    a horizontal background ramp, ``edges`` lists ``(side, level)`` border
    bands (0 top, 1 right, 2 bottom, 3 left) and ``noise`` is the Gaussian
    noise std.

    Pixel values are quantised to 8 bits so on-disk formats are lossless.
    """
    rng = np.random.default_rng(noise_seed)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    img = np.full((size, size), 0.1) + style.get("gradient", 0.0) * (xx / max(size - 1, 1))
    scale = style.get("contrast", 1.0)
    bands = {0: np.s_[:2, :], 1: np.s_[:, -2:], 2: np.s_[-2:, :], 3: np.s_[:, :2]}
    for side, level in style.get("edges", ()):
        img[bands[side]] = level
    for concept, cx, cy, r, v in primitives:
        img = np.where(_mask(concept, xx - cx, yy - cy, r), v * scale, img)
    img = img + rng.normal(0.0, style.get("noise", 0.04), img.shape)
    img = np.clip(img, 0.0, 1.0)
    return (np.round(img * 255.0) / 255.0)[None]


def labels_from_render(task: TaskSpec, primitives: list):
    """Re-derive a task's label from the primitives that were drawn."""
    present = {p[0] for p in primitives}
    bits = [1 if c in present else 0 for c in task.class_names]
    if task.label_mode == "multiclass":
        if sum(bits) != 1:
            raise DataError("multiclass render must contain exactly one class primitive")
        return bits.index(1)
    return bits


def _task_vocab(n_tasks: int, n_classes: int, overlap: float) -> list:
    shared = int(round(overlap * n_classes))
    unique = n_classes - shared
    need = shared + unique * n_tasks
    if need > len(CONCEPTS):
        raise ConfigurationError(f"need {need} distinct concepts, only {len(CONCEPTS)} available")
    core = list(CONCEPTS[:shared])
    out = []
    for t in range(n_tasks):
        start = shared + t * unique
        out.append(core + list(CONCEPTS[start : start + unique]))
    return out


def _default_modes(n_tasks: int) -> list:
    cycle = ("multilabel", "multiclass", "binary")
    return [cycle[t % 3] for t in range(n_tasks)]


def generate_synthetic_suite(
    n_tasks: int = 3,
    sizes=600,
    image_size: int = 32,
    vocab_overlap: float = 0.5,
    subgroup_skew: float = 0.0,
    seed: int = 0,
    n_classes: int = 4,
    label_modes=None,
    prevalence: float = 0.3,
    distractors: int = 2,
    split_fractions=None,
    id_prefix: str = "t",
    radius_range: tuple = (0.1, 0.16),
) -> list:
    """Procedurally rendered tasks with heterogeneous label schemas.

    Labels are the presence of each class concept. Tasks share
    ``round(vocab_overlap * n_classes)`` concepts; the rest are task-specific.
    Up to ``distractors`` primitives of concepts outside a task's vocabulary
    are drawn as clutter. Samples carry a subgroup "A"/"B" with equal class
    prevalence. ``subgroup_skew`` plants a shortcut in subgroup A: a bright
    border band on side ``j % 4`` for every present class ``j``. Subgroup B
    has no bands and its primitives fade to contrast ``1 - 0.9 * skew``.
    At skew 0 the two subgroups are identically distributed.
    """
    if n_tasks < 1:
        raise ConfigurationError("n_tasks must be >= 1")
    for name, v in (("vocab_overlap", vocab_overlap), ("subgroup_skew", subgroup_skew)):
        if not 0.0 <= v <= 1.0:
            raise ConfigurationError(f"{name} must lie in [0, 1], got {v}")
    if image_size < MIN_IMAGE_SIDE:
        raise ConfigurationError(f"image_size {image_size} too small to render primitives (min {MIN_IMAGE_SIDE})")
    sizes = [int(sizes)] * n_tasks if np.isscalar(sizes) else [int(s) for s in sizes]
    if len(sizes) != n_tasks:
        raise ConfigurationError("sizes must be a scalar or have one entry per task")
    modes = list(label_modes) if label_modes is not None else _default_modes(n_tasks)
    if len(modes) != n_tasks:
        raise ConfigurationError("label_modes must have one entry per task")
    fractions = split_fractions or {"pretrain": 0.6, "train": 0.2, "val": 0.05, "test": 0.15}
    if set(fractions) - set(SPLITS) or abs(sum(fractions.values()) - 1.0) > 1e-9:
        raise ConfigurationError(f"split fractions must cover {SPLITS} and sum to 1")

    vocab = _task_vocab(n_tasks, n_classes, vocab_overlap)
    manifests = []
    for t in range(n_tasks):
        mode = modes[t]
        classes = vocab[t][:1] if mode == "binary" else vocab[t]
        task = TaskSpec(t, f"synthetic-{t}", mode, classes)
        others = [c for c in CONCEPTS if c not in classes]
        rng = np.random.default_rng([seed, 7919, t])
        split_names = _assign_splits(sizes[t], fractions, rng)
        records = []
        for i in range(sizes[t]):
            subgroup = "A" if rng.random() < 0.5 else "B"
            present = _draw_classes(task, prevalence, rng)
            clutter = list(rng.choice(others, size=int(rng.integers(0, distractors + 1)), replace=False)) if distractors else []
            prims = _place_all(present + clutter, image_size, rng, radius_range)
            style = {"noise": 0.04}
            if subgroup_skew > 0 and subgroup == "A":
                style["edges"] = [(task.class_names.index(c) % 4, 0.1 + 0.9 * subgroup_skew) for c in present]
            elif subgroup_skew > 0:
                style["contrast"] = 1.0 - 0.9 * subgroup_skew
            noise_seed = [seed, 104729, t, i]
            image = render_image(image_size, prims, style, noise_seed)
            rid = f"{id_prefix}{t}-{i:06d}"
            records.append(
                SampleRecord(rid, image, labels_from_render(task, prims), split_names[i], subgroup, render=prims)
            )
        manifests.append(DatasetManifest(task, records))
    return manifests


def _assign_splits(n: int, fractions: dict, rng) -> list:
    counts = {k: int(math.floor(v * n)) for k, v in fractions.items()}
    leftover = n - sum(counts.values())
    order = sorted(fractions, key=lambda k: -fractions[k])
    for k in order[:leftover]:
        counts[k] += 1
    names = [k for k in SPLITS if k in counts for _ in range(counts[k])]
    return [names[i] for i in rng.permutation(n)]


def _draw_classes(task: TaskSpec, prevalence: float, rng) -> list:
    k = task.n_classes
    if task.label_mode == "multiclass":
        return [task.class_names[int(rng.integers(0, k))]]
    draws = rng.random(k) < prevalence
    return [c for c, on in zip(task.class_names, draws) if on]


def _place(concept: str, size: int, rng, radius_range=(0.1, 0.16)):
    r = float(rng.uniform(*radius_range) * size)
    cx = float(rng.uniform(r, size - 1 - r))
    cy = float(rng.uniform(r, size - 1 - r))
    v = float(rng.uniform(0.65, 1.0))
    return (str(concept), round(cx, 6), round(cy, 6), round(r, 6), round(v, 6))


def _place_all(concepts: list, size: int, rng, radius_range=(0.1, 0.16), tries: int = 50) -> list:
    """Place primitives so their bounding circles do not overlap.

    Radii shrink by 10% after every ``tries`` rejected layouts, so placement
    always terminates.
    """
    lo, hi = radius_range
    while True:
        for _ in range(tries):
            prims = []
            for c in concepts:
                p = _place(c, size, rng, (lo, hi))
                if all((p[1] - q[1]) ** 2 + (p[2] - q[2]) ** 2 > (p[3] + q[3] + 1.0) ** 2 for q in prims):
                    prims.append(p)
                else:
                    break
            if len(prims) == len(concepts):
                return prims
        lo, hi = lo * 0.9, hi * 0.9


# -- manifests ------------------------------------------------------------


def check_leaks(records) -> None:
    held = {r.id for r in records if r.split in ("val", "test")}
    leaked = {r.id for r in records if r.split == "pretrain"} & held
    if leaked:
        raise LeakError(leaked)


def check_suite_leaks(manifests) -> None:
    """Leak rule across a whole suite: no pretrain id reappears in any val/test split."""
    check_leaks([r for m in manifests for r in m.records])


def _labels_to_json(task: TaskSpec, labels) -> dict:
    if task.label_mode == "multiclass":
        return {c: int(i == int(labels)) for i, c in enumerate(task.class_names)}
    return {c: int(v) for c, v in zip(task.class_names, labels)}


def _labels_from_json(task: TaskSpec, obj, rid: str):
    if not isinstance(obj, dict):
        raise SchemaError(f"record {rid}: labels must be an object of class_name -> 0/1")
    unknown = set(obj) - set(task.class_names)
    if unknown:
        raise SchemaError(f"record {rid}: unknown class name(s) {sorted(unknown)}")
    bits = []
    for c in task.class_names:
        v = obj.get(c, 0)
        if v not in (0, 1) or isinstance(v, bool):
            raise SchemaError(f"record {rid}: label {c!r} must be 0 or 1, got {v!r}")
        bits.append(int(v))
    if task.label_mode == "multiclass":
        if sum(bits) != 1:
            raise SchemaError(f"record {rid}: multiclass label needs exactly one positive class")
        return bits.index(1)
    return bits


def _encode_grid(image: np.ndarray) -> dict:
    q = np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)
    return {"shape": list(image.shape), "data": base64.b64encode(q.tobytes()).decode("ascii")}


def _decode_grid(obj: dict, rid: str) -> np.ndarray:
    try:
        shape = tuple(int(s) for s in obj["shape"])
        raw = np.frombuffer(base64.b64decode(obj["data"], validate=True), dtype=np.uint8)
        return raw.reshape(shape).astype(np.float64) / 255.0
    except (KeyError, ValueError, TypeError) as exc:
        raise SchemaError(f"record {rid}: bad inline grid ({exc})") from None


def write_pgm(path, image: np.ndarray) -> None:
    plane = image[0] if image.ndim == 3 else image
    q = np.round(np.clip(plane, 0.0, 1.0) * 255.0).astype(np.uint8)
    h, w = q.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + q.tobytes())


def read_pgm(path) -> np.ndarray:
    blob = Path(path).read_bytes()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(blob) and blob[pos : pos + 1].isspace():
            pos += 1
        if blob[pos : pos + 1] == b"#":
            while pos < len(blob) and blob[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos : pos + 1].isspace():
            pos += 1
        tokens.append(blob[start:pos])
    if tokens[0] != b"P5":
        raise SchemaError(f"{path}: not a binary PGM (P5) file")
    w, h, maxval = (int(t) for t in tokens[1:])
    pos += 1
    if maxval > 255:
        raise SchemaError(f"{path}: 16-bit PGM is not supported")
    data = np.frombuffer(blob[pos : pos + w * h], dtype=np.uint8)
    if data.size != w * h:
        raise SchemaError(f"{path}: truncated PGM payload")
    return (data.reshape(1, h, w).astype(np.float64) / maxval)


def save_manifest(manifest: DatasetManifest, path, image_dir=None) -> None:
    """Write the line-delimited manifest; images go inline unless ``image_dir`` is set."""
    path = Path(path)
    lines = [json.dumps(manifest.task.to_json(), sort_keys=True)]
    for r in manifest.records:
        obj = {"id": r.id, "labels": _labels_to_json(manifest.task, r.labels), "split": r.split}
        if r.subgroup is not None:
            obj["subgroup"] = r.subgroup
        if image_dir is not None:
            image_dir = Path(image_dir)
            image_dir.mkdir(parents=True, exist_ok=True)
            img_path = image_dir / f"{r.id}.pgm"
            write_pgm(img_path, r.image)
            obj["image_path"] = str(img_path.relative_to(path.parent)) if img_path.is_relative_to(path.parent) else str(img_path)
        else:
            obj["grid"] = _encode_grid(r.image)
        if r.render is not None:
            obj["render"] = [list(p) for p in r.render]
        lines.append(json.dumps(obj, sort_keys=True))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


_RECORD_KEYS = {"id", "labels", "split", "subgroup", "image_path", "grid", "render"}


def load_manifest(path) -> DatasetManifest:
    path = Path(path)
    try:
        lines = [ln for ln in path.read_text(encoding="utf-8").splitlines() if ln.strip()]
    except UnicodeDecodeError as exc:
        raise SchemaError(f"{path}: not UTF-8 ({exc})") from None
    if not lines:
        raise SchemaError(f"{path}: empty manifest")
    try:
        task = TaskSpec.from_json(json.loads(lines[0]))
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{path}: header is not JSON ({exc})") from None
    if len(lines) == 1:
        raise SchemaError(f"{path}: manifest has no records")
    records = []
    seen = set()
    for lineno, line in enumerate(lines[1:], start=2):
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise SchemaError(f"{path}:{lineno}: invalid JSON ({exc})") from None
        if not isinstance(obj, dict):
            raise SchemaError(f"{path}:{lineno}: record must be an object")
        unknown = set(obj) - _RECORD_KEYS
        if unknown:
            raise SchemaError(f"{path}:{lineno}: unknown keys {sorted(unknown)}")
        for key in ("id", "labels", "split"):
            if key not in obj:
                raise SchemaError(f"{path}:{lineno}: missing {key!r}")
        rid = str(obj["id"])
        if obj["split"] not in SPLITS:
            raise SchemaError(f"record {rid}: unknown split {obj['split']!r}")
        if (rid, obj["split"]) in seen:
            raise SchemaError(f"record {rid}: duplicated in split {obj['split']}")
        seen.add((rid, obj["split"]))
        if ("grid" in obj) == ("image_path" in obj):
            raise SchemaError(f"record {rid}: exactly one of grid / image_path is required")
        if "grid" in obj:
            image = _decode_grid(obj["grid"], rid)
            img_path = None
        else:
            img_path = obj["image_path"]
            full = Path(img_path) if Path(img_path).is_absolute() else path.parent / img_path
            image = read_pgm(full)
        if image.min() < 0 or image.max() > 1:
            raise SchemaError(f"record {rid}: pixel values outside [0, 1]")
        labels = _labels_from_json(task, obj["labels"], rid)
        render = [tuple(p) for p in obj["render"]] if obj.get("render") is not None else None
        records.append(SampleRecord(rid, image, labels, obj["split"], obj.get("subgroup"), img_path, render))
    check_leaks(records)
    shapes = {r.image.shape for r in records}
    if len(shapes) != 1:
        raise SchemaError(f"{path}: mixed image shapes {sorted(shapes)}")
    return DatasetManifest(task, records)


# -- augmentation ---------------------------------------------------------


@dataclass
class AugmentationConfig:
    crop_pad: int = 3
    max_rotation_deg: float = 15.0
    brightness_range: tuple = (-0.2, 0.2)
    contrast_range: tuple = (0.8, 1.2)
    gamma_range: tuple = (0.7, 1.5)

    def __post_init__(self):
        for name in ("brightness_range", "contrast_range", "gamma_range"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ConfigurationError(f"{name} is not ordered: {lo} > {hi}")
            setattr(self, name, (float(lo), float(hi)))
        if self.gamma_range[0] <= 0:
            raise ConfigurationError("gamma_range must be strictly positive")
        if self.crop_pad < 0 or self.max_rotation_deg < 0:
            raise ConfigurationError("crop_pad and max_rotation_deg must be non-negative")

    @classmethod
    def for_image_size(cls, side: int, **overrides) -> "AugmentationConfig":
        """Defaults with the crop padding at 8% of the image side."""
        overrides.setdefault("crop_pad", int(round(0.08 * side)))
        return cls(**overrides)


def rotate_nearest(x: np.ndarray, degrees: float) -> np.ndarray:
    """Counter-clockwise rotation about the image centre, nearest-neighbour sampling.

    Source coordinates falling outside the image are clamped to the border.
    """
    if degrees == 0:
        return x.copy()
    h, w = x.shape[-2:]
    theta = math.radians(degrees)
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    c, s = math.cos(theta), math.sin(theta)
    # inverse map: output pixel -> source pixel (rows grow downward)
    sx = c * (xx - cx) - s * (yy - cy) + cx
    sy = s * (xx - cx) + c * (yy - cy) + cy
    sxi = np.clip(np.rint(sx).astype(np.int64), 0, w - 1)
    syi = np.clip(np.rint(sy).astype(np.int64), 0, h - 1)
    return x[..., syi, sxi]


def crop_and_rotate(x: np.ndarray, pad: int, offset: tuple, degrees: float) -> np.ndarray:
    h, w = x.shape[-2:]
    if pad > 0:
        width = [(0, 0)] * (x.ndim - 2) + [(pad, pad), (pad, pad)]
        xp = np.pad(x, width, mode="reflect" if pad < min(h, w) else "symmetric")
        oy, ox = offset
        x = xp[..., oy : oy + h, ox : ox + w]
    out = rotate_nearest(x, degrees)
    return np.clip(out, 0.0, 1.0)


def tau1(x: np.ndarray, cfg: AugmentationConfig, rng: np.random.Generator) -> np.ndarray:
    """Random reflect-padded crop followed by a random nearest-neighbour rotation."""
    pad = cfg.crop_pad
    offset = (int(rng.integers(0, 2 * pad + 1)), int(rng.integers(0, 2 * pad + 1))) if pad else (0, 0)
    degrees = float(rng.uniform(-cfg.max_rotation_deg, cfg.max_rotation_deg)) if cfg.max_rotation_deg else 0.0
    return crop_and_rotate(x, pad, offset, degrees)


def adjust_intensity(x: np.ndarray, brightness: float, contrast: float, gamma: float, clip: bool = True) -> np.ndarray:
    """Brightness shift, contrast about the image mean, then gamma."""
    y = x + brightness
    m = y.mean()
    y = (y - m) * contrast + m
    y = np.clip(y, 0.0, 1.0) ** gamma
    return np.clip(y, 0.0, 1.0) if clip else y


def tau2(x: np.ndarray, cfg: AugmentationConfig, rng: np.random.Generator) -> np.ndarray:
    """Random brightness, contrast and gamma; consumes the output of :func:`tau1`."""
    b = float(rng.uniform(*cfg.brightness_range))
    c = float(rng.uniform(*cfg.contrast_range))
    g = float(rng.uniform(*cfg.gamma_range))
    return adjust_intensity(x, b, c, g)


def sample_rng(seed: int, epoch: int, stream: int, index: int) -> np.random.Generator:
    """Per-sample generator derived from (seed, epoch, stream, index)."""
    return np.random.default_rng([seed, epoch, stream, index])


def augment_pair(images: np.ndarray, indices, cfg: AugmentationConfig, seed: int, epoch: int, stream: int):
    """Return ``(x', x'')`` for a batch; each sample uses its own RNG stream."""
    x1 = np.empty_like(images)
    x2 = np.empty_like(images)
    for j, idx in enumerate(indices):
        rng = sample_rng(seed, epoch, stream, int(idx))
        x1[j] = tau1(images[j], cfg, rng)
        x2[j] = tau2(x1[j], cfg, rng)
    return x1, x2


# -- batching -------------------------------------------------------------


@dataclass
class Batch:
    task_id: int
    indices: np.ndarray
    ids: list
    images: np.ndarray
    targets: np.ndarray

    def __len__(self):
        return len(self.indices)


def _permutation(n: int, seed: int, epoch: int, stream: int, cycle: int = 0) -> np.ndarray:
    return np.random.default_rng([seed, epoch, stream, cycle, 31]).permutation(n)


def _make_batch(manifest: DatasetManifest, split: str, idx: np.ndarray) -> Batch:
    ids, images, targets = manifest.arrays(split)
    return Batch(manifest.task.task_id, idx, [ids[i] for i in idx], images[idx], targets[idx])


def batch_iterator(manifest: DatasetManifest, split: str, batch_size: int, seed: int, epoch: int = 0) -> Iterator[Batch]:
    """Seeded shuffled batches over one split; the last partial batch is kept."""
    if batch_size < 1:
        raise ConfigurationError("batch_size must be >= 1")
    ids, _, _ = manifest.arrays(split)
    n = len(ids)
    if n == 0:
        raise DataError(f"task {manifest.task.name!r}: split {split!r} is empty")
    perm = _permutation(n, seed, epoch, manifest.task.task_id)
    for start in range(0, n, batch_size):
        yield _make_batch(manifest, split, perm[start : start + batch_size])


def n_batches(n: int, batch_size: int) -> int:
    return -(-n // batch_size)


def interleave_equal(manifests, batch_size: int, seed: int, epoch: int = 0, split: str = "pretrain") -> Iterator[list]:
    """Mixed batches holding ``batch_size / n_tasks`` samples from every task.

    The stream covers one pass over the largest dataset; smaller datasets wrap
    around with a fresh permutation. Each yielded item is a list of per-task
    :class:`Batch` segments whose sizes are equal.
    """
    k = len(manifests)
    if k == 0:
        raise ConfigurationError("interleave_equal needs at least one manifest")
    if batch_size % k:
        raise ConfigurationError(f"batch_size {batch_size} is not divisible by {k} tasks")
    per = batch_size // k
    sizes = [len(m.arrays(split)[0]) for m in manifests]
    for m, n in zip(manifests, sizes):
        if n == 0:
            raise DataError(f"task {m.task.name!r}: split {split!r} is empty")
    largest = max(sizes)
    cursors = [0] * k
    cycles = [0] * k
    perms = [_permutation(n, seed, epoch, m.task.task_id) for m, n in zip(manifests, sizes)]
    for step in range(n_batches(largest, per)):
        take = min(per, largest - step * per)
        segments = []
        for t, m in enumerate(manifests):
            chosen = []
            while len(chosen) < take:
                if cursors[t] == sizes[t]:
                    cycles[t] += 1
                    perms[t] = _permutation(sizes[t], seed, epoch, m.task.task_id, cycles[t])
                    cursors[t] = 0
                grab = min(take - len(chosen), sizes[t] - cursors[t])
                chosen.extend(perms[t][cursors[t] : cursors[t] + grab])
                cursors[t] += grab
            segments.append(_make_batch(m, split, np.asarray(chosen, dtype=np.int64)))
        yield segments
