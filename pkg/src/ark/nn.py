"""Encoders, projector, task heads and the student/teacher pair."""

from __future__ import annotations

import copy
import io
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .errors import ConfigurationError, DimensionError, FormatError, RegistryError
from .tensor import Tensor


@dataclass
class EncoderConfig:
    kind: str = "mlp"
    widths: tuple = (256,)
    input_shape: tuple = (1, 32, 32)
    feature_dim: int = 128
    kernel_size: int = 3
    stride: int = 2
    pool: str = "max"
    input_mean: float = 0.2
    input_std: float = 0.25

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        self.input_shape = tuple(int(s) for s in self.input_shape)
        if self.kind not in ("mlp", "conv"):
            raise ConfigurationError(f"encoder kind must be 'mlp' or 'conv', got {self.kind!r}")
        if self.feature_dim <= 0:
            raise ConfigurationError("encoder feature_dim must be positive")
        if not self.widths or any(w <= 0 for w in self.widths):
            raise ConfigurationError("encoder needs at least one hidden layer with positive width")
        if len(self.input_shape) != 3:
            raise ConfigurationError(f"input_shape must be (c, h, w), got {self.input_shape}")
        if self.pool not in ("max", "avg"):
            raise ConfigurationError(f"pool must be 'max' or 'avg', got {self.pool!r}")
        if self.input_std <= 0:
            raise ConfigurationError("input_std must be positive")
        if self.kind == "conv" and self.kernel_size % 2 == 0:
            raise ConfigurationError("conv encoder needs an odd kernel size")


class Linear:
    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator, gain: float = 1.0):
        self.weight = Tensor(rng.normal(0.0, np.sqrt(gain / in_dim), (in_dim, out_dim)), requires_grad=True)
        self.bias = Tensor(np.zeros(out_dim), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return T.matmul(x, self.weight) + self.bias

    def named_parameters(self, prefix: str):
        yield f"{prefix}.weight", self.weight
        yield f"{prefix}.bias", self.bias

    @property
    def out_dim(self) -> int:
        return self.weight.shape[1]


class Encoder:
    """MLP or strided-conv feature extractor; relu after every layer.

    Inputs are shifted and scaled by the fixed ``input_mean`` / ``input_std``
    before the first layer. Conv features are pooled globally (max or mean).
    """

    def __init__(self, config: EncoderConfig, rng: np.random.Generator):
        self.config = config
        c, h, w = config.input_shape
        self.convs = []
        self.layers = []
        if config.kind == "mlp":
            dim = c * h * w
            for width in config.widths:
                self.layers.append(Linear(dim, width, rng))
                dim = width
        else:
            k = config.kernel_size
            ch = c
            for width in config.widths:
                fan_in = ch * k * k
                kern = rng.normal(0.0, np.sqrt(1.0 / fan_in), (width, ch, k, k))
                self.convs.append((Tensor(kern, requires_grad=True), Tensor(np.zeros((width, 1, 1)), requires_grad=True)))
                ch = width
            dim = ch
        self.layers.append(Linear(dim, config.feature_dim, rng))

    def __call__(self, x: Tensor) -> Tensor:
        shape = self.config.input_shape
        if x.shape[1:] != shape:
            raise DimensionError(f"encoder expects n x {shape} input, got {x.shape}")
        cfg = self.config
        h = (x - cfg.input_mean) * (1.0 / cfg.input_std)
        if cfg.kind == "mlp":
            h = h.reshape(x.shape[0], -1)
        else:
            for kern, bias in self.convs:
                h = T.relu(T.conv2d(h, kern, cfg.stride) + bias)
            h = T.global_max_pool(h) if cfg.pool == "max" else T.global_avg_pool(h)
        for layer in self.layers:
            h = T.relu(layer(h))
        return h

    def named_parameters(self, prefix: str = "encoder"):
        for i, (kern, bias) in enumerate(self.convs):
            yield f"{prefix}.conv{i}.weight", kern
            yield f"{prefix}.conv{i}.bias", bias
        for i, layer in enumerate(self.layers):
            yield from layer.named_parameters(f"{prefix}.fc{i}")

    @property
    def feature_dim(self) -> int:
        return self.config.feature_dim


class Projector:
    """Affine map to the shared embedding space, optionally with one hidden relu layer."""

    def __init__(self, in_dim: int, embed_dim: int, rng: np.random.Generator, hidden: int = 0):
        self.hidden = Linear(in_dim, hidden, rng) if hidden else None
        self.out = Linear(hidden or in_dim, embed_dim, rng)
        self.embed_dim = embed_dim

    def __call__(self, x: Tensor) -> Tensor:
        if self.hidden is not None:
            x = T.relu(self.hidden(x))
        return self.out(x)

    def named_parameters(self, prefix: str = "projector"):
        if self.hidden is not None:
            yield from self.hidden.named_parameters(f"{prefix}.hidden")
        yield from self.out.named_parameters(f"{prefix}.out")


class TaskHead(Linear):
    def __init__(self, task_id: int, in_dim: int, n_classes: int, rng: np.random.Generator):
        super().__init__(in_dim, n_classes, rng)
        self.task_id = task_id

    @property
    def n_classes(self) -> int:
        return self.out_dim


class Network:
    """Encoder, optional projector and (student only) task heads."""

    def __init__(self, encoder: Encoder, projector: Projector | None, heads: dict | None = None):
        self.encoder = encoder
        self.projector = projector
        self.heads = heads if heads is not None else {}

    def embed(self, x: Tensor, stage: str = "projector") -> Tensor:
        feats = self.encoder(x)
        if stage == "encoder" or self.projector is None:
            return feats
        return self.projector(feats)

    def named_parameters(self, prefix: str, heads: bool = True):
        yield from self.encoder.named_parameters(f"{prefix}.encoder")
        if self.projector is not None:
            yield from self.projector.named_parameters(f"{prefix}.projector")
        if heads:
            for tid in sorted(self.heads):
                yield from self.heads[tid].named_parameters(f"{prefix}.heads.{tid}")

    def parameters(self):
        return [p for _, p in self.named_parameters("net")]

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None


@dataclass
class ModelPair:
    student: Network
    teacher: Network
    momentum: float = 0.9
    encoder_config: EncoderConfig = field(default_factory=EncoderConfig)
    embed_dim: int = 64
    projector_hidden: int = 0
    ema_updates: int = 0
    optimizer_state: object = None

    @property
    def use_projector(self) -> bool:
        return self.student.projector is not None

    @property
    def embedding_dim(self) -> int:
        return self.embed_dim if self.use_projector else self.encoder_config.feature_dim

    def teacher_parameters(self):
        return [p for _, p in self.teacher.named_parameters("teacher", heads=False)]

    def student_parameters(self):
        return [p for _, p in self.student.named_parameters("student")]


def _seed_rng(seed) -> np.random.Generator:
    return np.random.default_rng(seed)


def build_model(
    enc: EncoderConfig,
    embed_dim: int,
    tasks,
    seed: int,
    momentum: float = 0.9,
    use_projector: bool = True,
    projector_hidden: int = 0,
) -> ModelPair:
    """Randomly initialised student plus an exact teacher copy (teacher frozen)."""
    if not tasks:
        raise ConfigurationError("build_model needs at least one task")
    if embed_dim <= 0:
        raise ConfigurationError("embed_dim must be positive")
    if not 0.0 <= momentum <= 1.0:
        raise ConfigurationError(f"momentum must lie in [0, 1], got {momentum}")
    ids = [t.task_id for t in tasks]
    dupes = sorted({i for i in ids if ids.count(i) > 1})
    if dupes:
        raise RegistryError(f"duplicate task_id(s): {dupes}")
    rng = _seed_rng(seed)
    encoder = Encoder(enc, rng)
    projector = Projector(enc.feature_dim, embed_dim, rng, projector_hidden) if use_projector else None
    head_in = embed_dim if use_projector else enc.feature_dim
    heads = {t.task_id: TaskHead(t.task_id, head_in, len(t.class_names), rng) for t in tasks}
    student = Network(encoder, projector, heads)
    teacher = _frozen_copy(student)
    return ModelPair(student, teacher, momentum, enc, embed_dim, projector_hidden)


def _frozen_copy(net: Network) -> Network:
    teacher = Network(copy.deepcopy(net.encoder), copy.deepcopy(net.projector), {})
    for _, p in teacher.named_parameters("teacher", heads=False):
        p.requires_grad = False
        p.grad = None
    return teacher


def add_head(pair: ModelPair, task, seed: int) -> TaskHead:
    """Attach a freshly initialised head for a task not present at build time."""
    if task.task_id in pair.student.heads:
        raise RegistryError(f"task_id {task.task_id} already has a head")
    head = TaskHead(task.task_id, pair.embedding_dim, len(task.class_names), _seed_rng(seed))
    pair.student.heads[task.task_id] = head
    return head


def _batched(x: Tensor, shape: tuple) -> tuple:
    x = x if isinstance(x, Tensor) else Tensor(x)
    if x.shape == shape:
        return x.reshape((1,) + shape), True
    if x.ndim == len(shape) + 1 and x.shape[1:] == shape:
        return x, False
    raise DimensionError(f"input shape {x.shape} does not match encoder input {shape}")


def forward_student(pair: ModelPair, x: Tensor, task_id: int):
    """Return ``(emb_s, pred)`` for task ``task_id``; both stay on the tape."""
    head = pair.student.heads.get(task_id)
    if head is None:
        raise RegistryError(f"no head registered for task_id {task_id}")
    xb, single = _batched(x, pair.encoder_config.input_shape)
    emb = pair.student.embed(xb)
    pred = head(emb)
    if single:
        return emb.reshape(emb.shape[1:]), pred.reshape(pred.shape[1:])
    return emb, pred


def forward_teacher(pair: ModelPair, x: Tensor) -> Tensor:
    """Teacher embedding as a constant (stop-gradient)."""
    xb, single = _batched(x, pair.encoder_config.input_shape)
    with T.no_grad():
        emb = pair.teacher.embed(Tensor(xb.data))
    out = Tensor(emb.data[0] if single else emb.data)
    return out


def embed_images(pair: ModelPair, images: np.ndarray, source: str = "teacher", stage: str = "projector", batch_size: int = 256) -> np.ndarray:
    """Unaugmented embeddings of ``images`` (n x c x h x w) without recording a tape."""
    if source not in ("teacher", "student"):
        raise ConfigurationError(f"source must be 'teacher' or 'student', got {source!r}")
    if stage not in ("projector", "encoder"):
        raise ConfigurationError(f"stage must be 'projector' or 'encoder', got {stage!r}")
    if stage == "projector" and not pair.use_projector:
        raise ConfigurationError("model was built without a projector; export the encoder stage")
    images = np.asarray(images, dtype=np.float64)
    if images.shape[1:] != pair.encoder_config.input_shape:
        raise DimensionError(f"images {images.shape} do not match encoder input {pair.encoder_config.input_shape}")
    net = pair.teacher if source == "teacher" else pair.student
    out = []
    with T.no_grad():
        for start in range(0, len(images), batch_size):
            out.append(net.embed(Tensor(images[start : start + batch_size]), stage).data)
    dim = pair.embedding_dim if stage == "projector" else pair.encoder_config.feature_dim
    return np.concatenate(out) if out else np.zeros((0, dim))


def ema_update(pair: ModelPair, momentum: float | None = None) -> None:
    """teacher <- momentum * teacher + (1 - momentum) * student, per parameter."""
    lam = pair.momentum if momentum is None else momentum
    if not 0.0 <= lam <= 1.0:
        raise ConfigurationError(f"EMA momentum must lie in [0, 1], got {lam}")
    student = dict(pair.student.named_parameters("net", heads=False))
    for name, t in pair.teacher.named_parameters("net", heads=False):
        s = student[name]
        t.data = lam * t.data + (1.0 - lam) * s.data
    pair.ema_updates += 1


# -- checkpoints ----------------------------------------------------------

MAGIC = b"ARK1"
VERSION = 1


def pair_state(pair: ModelPair, optimizer_state=None, parts=("student", "teacher")) -> dict:
    """Flatten a pair (plus architecture metadata) into ordered name -> array."""
    enc = pair.encoder_config
    state = {
        "meta.encoder.kind": np.array([0.0 if enc.kind == "mlp" else 1.0]),
        "meta.encoder.widths": np.array(enc.widths, dtype=np.float64),
        "meta.encoder.input_shape": np.array(enc.input_shape, dtype=np.float64),
        "meta.encoder.feature_dim": np.array([enc.feature_dim], dtype=np.float64),
        "meta.encoder.kernel_size": np.array([enc.kernel_size], dtype=np.float64),
        "meta.encoder.stride": np.array([enc.stride], dtype=np.float64),
        "meta.encoder.pool": np.array([0.0 if enc.pool == "max" else 1.0]),
        "meta.encoder.input_norm": np.array([enc.input_mean, enc.input_std]),
        "meta.embed_dim": np.array([pair.embed_dim], dtype=np.float64),
        "meta.use_projector": np.array([1.0 if pair.use_projector else 0.0]),
        "meta.projector_hidden": np.array([pair.projector_hidden], dtype=np.float64),
        "meta.momentum": np.array([pair.momentum]),
        "meta.ema_updates": np.array([pair.ema_updates], dtype=np.float64),
    }
    if "student" in parts:
        for name, p in pair.student.named_parameters("student"):
            state[name] = p.data
    if "teacher" in parts:
        for name, p in pair.teacher.named_parameters("teacher", heads=False):
            state[name] = p.data
    if optimizer_state is not None:
        for key, value in optimizer_state.as_arrays().items():
            state[f"optimizer.{key}"] = value
    return state


def write_tensors(path, tensors: dict) -> None:
    body = io.BytesIO()
    body.write(struct.pack("<II", VERSION, len(tensors)))
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype="<f8")
        raw = name.encode("utf-8")
        body.write(struct.pack("<H", len(raw)))
        body.write(raw)
        body.write(struct.pack("<B", arr.ndim))
        body.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        body.write(arr.tobytes(order="C"))
    payload = body.getvalue()
    Path(path).write_bytes(MAGIC + payload + struct.pack("<I", zlib.crc32(payload)))


def read_tensors(path) -> dict:
    blob = Path(path).read_bytes()
    if len(blob) < 4 or blob[:4] != MAGIC:
        raise FormatError("bad checkpoint magic", offset=0)
    if len(blob) < 16:
        raise FormatError("truncated checkpoint header", offset=len(blob))
    payload, (crc,) = blob[4:-4], struct.unpack("<I", blob[-4:])
    pos = 4

    def take(n):
        nonlocal pos
        if pos + n > len(blob) - 4:
            raise FormatError(f"truncated checkpoint: wanted {n} bytes", offset=pos)
        chunk = blob[pos : pos + n]
        pos += n
        return chunk

    version, count = struct.unpack("<II", take(8))
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", offset=4)
    out = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2))
        try:
            name = take(nlen).decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError("tensor name is not UTF-8", offset=pos - nlen) from None
        (ndim,) = struct.unpack("<B", take(1))
        dims = struct.unpack(f"<{ndim}Q", take(8 * ndim))
        n = int(np.prod(dims)) if ndim else 1
        values = np.frombuffer(take(8 * n), dtype="<f8").astype(np.float64).reshape(dims)
        out[name] = values
    if pos != len(blob) - 4:
        raise FormatError("trailing bytes after last tensor", offset=pos)
    if zlib.crc32(payload) != crc:
        raise FormatError("checkpoint CRC32 mismatch", offset=len(blob) - 4)
    return out


def save_checkpoint(pair: ModelPair, optimizer_state, path, parts=("student", "teacher")) -> None:
    write_tensors(path, pair_state(pair, optimizer_state, parts))


def load_checkpoint(path, heads: bool = True):
    """Rebuild a :class:`ModelPair` (and optimizer state dict) from ``path``.

    Files holding only one network fill the other side with an exact copy.
    With ``heads=False`` task heads are skipped.
    """
    state = read_tensors(path)
    try:
        enc = EncoderConfig(
            kind="mlp" if state["meta.encoder.kind"][0] == 0 else "conv",
            widths=tuple(int(v) for v in state["meta.encoder.widths"]),
            input_shape=tuple(int(v) for v in state["meta.encoder.input_shape"]),
            feature_dim=int(state["meta.encoder.feature_dim"][0]),
            kernel_size=int(state["meta.encoder.kernel_size"][0]),
            stride=int(state["meta.encoder.stride"][0]),
            pool="max" if state["meta.encoder.pool"][0] == 0 else "avg",
            input_mean=float(state["meta.encoder.input_norm"][0]),
            input_std=float(state["meta.encoder.input_norm"][1]),
        )
        embed_dim = int(state["meta.embed_dim"][0])
        use_projector = bool(state["meta.use_projector"][0])
        hidden = int(state["meta.projector_hidden"][0])
        momentum = float(state["meta.momentum"][0])
    except KeyError as exc:
        raise FormatError(f"checkpoint missing metadata tensor {exc.args[0]!r}") from None

    rng = _seed_rng(0)
    encoder = Encoder(enc, rng)
    projector = Projector(enc.feature_dim, embed_dim, rng, hidden) if use_projector else None
    head_in = embed_dim if use_projector else enc.feature_dim
    head_ids = sorted({int(k.split(".")[2]) for k in state if k.startswith("student.heads.")})
    head_map = {}
    if heads:
        for tid in head_ids:
            n_classes = state[f"student.heads.{tid}.weight"].shape[1]
            head_map[tid] = TaskHead(tid, head_in, n_classes, rng)
    student = Network(encoder, projector, head_map)
    teacher = _frozen_copy(student)
    pair = ModelPair(student, teacher, momentum, enc, embed_dim, hidden, int(state.get("meta.ema_updates", [0])[0]))

    has_student = any(k.startswith("student.") for k in state)
    has_teacher = any(k.startswith("teacher.") for k in state)
    if not (has_student or has_teacher):
        raise FormatError("checkpoint holds neither student nor teacher tensors")
    for prefix, net, other in (("student", student, "teacher"), ("teacher", teacher, "student")):
        present = has_student if prefix == "student" else has_teacher
        src = prefix if present else other
        for name, p in net.named_parameters(prefix, heads=prefix == "student"):
            key = src + name[len(prefix):]
            if key not in state:
                raise FormatError(f"checkpoint missing tensor {key!r}")
            if state[key].shape != p.shape:
                raise FormatError(f"tensor {key!r} has shape {state[key].shape}, expected {p.shape}")
            p.data = state[key].copy()
    optimizer = {k[len("optimizer."):]: v for k, v in state.items() if k.startswith("optimizer.")}
    return pair, optimizer
