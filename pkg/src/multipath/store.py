"""The shared system of frozen modules and paths, its on-disk checkpoint,
DOT export, and the cache of frozen-path outputs."""
from __future__ import annotations

import copy
import hashlib
import json
import struct
import threading
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .data import TaskData, TaskSpec, adapt, load_task
from .nn import dense_np

FORMAT_VERSION = 1
BLOB_MAGIC = b"MPTB"
DTYPE_F64_LE = 1

MODULE_KINDS = ("dense", "conv", "head", "connector", "router")


class StoreError(Exception):
    pass


class DuplicateIdError(StoreError):
    pass


class DanglingReferenceError(StoreError):
    pass


class ShapeIncompatibleError(StoreError):
    pass


class CheckpointError(StoreError):
    pass


class HashMismatchError(CheckpointError):
    pass


class VersionError(CheckpointError):
    pass


class TruncatedBlobError(CheckpointError):
    pass


class FrozenModuleError(StoreError):
    pass


@dataclass
class ModuleDef:
    module_id: str
    kind: str
    params: dict[str, np.ndarray]
    activation: str = "none"
    frozen: bool = False
    parent_module_id: str | None = None
    last_trained_task: str | None = None

    def __post_init__(self):
        if self.kind not in MODULE_KINDS:
            raise ValueError(f"unknown module kind {self.kind!r}")

    @property
    def in_dim(self) -> int:
        return self.params["w"].shape[0]

    @property
    def out_dim(self) -> int:
        return self.params["w"].shape[1]

    def frozen_copy(self) -> "ModuleDef":
        params = {}
        for k, v in self.params.items():
            a = np.array(v, dtype=np.float64, copy=True)
            a.setflags(write=False)
            params[k] = a
        return ModuleDef(self.module_id, self.kind, params, self.activation, True,
                         self.parent_module_id, self.last_trained_task)

    def meta(self) -> dict:
        d = asdict(self)
        del d["params"]
        return d


@dataclass
class PathSpec:
    path_id: str
    task_id: str
    module_ids: list[str]
    resolution: int
    channels: int


@dataclass
class SystemStore:
    tasks: dict[str, TaskSpec] = field(default_factory=dict)
    modules: dict[str, ModuleDef] = field(default_factory=dict)
    paths: dict[str, PathSpec] = field(default_factory=dict)
    # published multipath models: model_id -> plain record (ids, hyperparams, scores)
    models: dict[str, dict] = field(default_factory=dict)
    # path_id -> {"validation": acc, "test": acc}
    path_scores: dict[str, dict] = field(default_factory=dict)
    _data: dict[str, TaskData] = field(default_factory=dict, repr=False, compare=False)
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False, compare=False)

    # -- tasks -----------------------------------------------------------
    def add_task(self, spec: TaskSpec) -> None:
        if spec.task_id in self.tasks:
            raise DuplicateIdError(f"task {spec.task_id} already registered")
        self.tasks[spec.task_id] = spec

    def task_data(self, task_id: str) -> TaskData:
        if task_id not in self.tasks:
            raise StoreError(f"unknown task {task_id}")
        with self._lock:
            if task_id not in self._data:
                self._data[task_id] = load_task(self.tasks[task_id])
            return self._data[task_id]

    # -- publishing -------------------------------------------------------
    def publish_path(self, path: PathSpec, modules: list[ModuleDef] = ()) -> str:
        """Store ``path`` plus its new ``modules``, all frozen.

        Modules already in the store are referenced, never copied.
        """
        if path.path_id in self.paths:
            raise DuplicateIdError(f"path {path.path_id} already published")
        new = {}
        for m in modules:
            if m.module_id in self.modules or m.module_id in new:
                raise DuplicateIdError(f"module {m.module_id} already published")
            new[m.module_id] = m
        if path.task_id not in self.tasks:
            raise DanglingReferenceError(f"path {path.path_id} references unknown task {path.task_id}")
        chain = []
        for mid in path.module_ids:
            mod = new.get(mid) or self.modules.get(mid)
            if mod is None:
                raise DanglingReferenceError(f"path {path.path_id} references missing module {mid}")
            if mod.kind == "conv":
                raise StoreError(f"path {path.path_id}: conv modules are schema-only and cannot run")
            chain.append(mod)
        if not chain or chain[-1].kind != "head":
            raise ShapeIncompatibleError(f"path {path.path_id} must end in a head module")
        dim = path.resolution * path.resolution * path.channels
        for mod in chain:
            if mod.in_dim != dim:
                raise ShapeIncompatibleError(
                    f"path {path.path_id}: module {mod.module_id} expects {mod.in_dim} inputs, gets {dim}")
            dim = mod.out_dim
        if dim != self.tasks[path.task_id].num_classes:
            raise ShapeIncompatibleError(f"path {path.path_id}: head width {dim} != num_classes")
        for m in new.values():
            self.modules[m.module_id] = m.frozen_copy()
        self.paths[path.path_id] = copy.deepcopy(path)
        return path.path_id

    def publish_model(self, record: dict, modules: list[ModuleDef]) -> str:
        """Publish a multipath model; its connector/router modules become frozen."""
        mid = record["model_id"]
        for m in modules:
            if m.module_id in self.modules:
                raise DuplicateIdError(f"module {m.module_id} already published")
        for pid in [record["main_path_id"], *record["support_path_ids"]]:
            if pid not in self.paths:
                raise DanglingReferenceError(f"model {mid} references unknown path {pid}")
        for m in modules:
            self.modules[m.module_id] = m.frozen_copy()
        self.models[mid] = copy.deepcopy(record)
        return mid

    def path_modules(self, path_id: str) -> list[ModuleDef]:
        if path_id not in self.paths:
            raise StoreError(f"unknown path {path_id}")
        return [self.modules[m] for m in self.paths[path_id].module_ids]

    def check_frozen(self, module_id: str) -> None:
        mod = self.modules.get(module_id)
        if mod is not None and mod.frozen:
            raise FrozenModuleError(f"module {module_id} is frozen")

    def copy(self) -> "SystemStore":
        """Independent replica; published arrays are read-only so they are shared."""
        return SystemStore(dict(self.tasks), dict(self.modules), copy.deepcopy(self.paths),
                           copy.deepcopy(self.models), copy.deepcopy(self.path_scores),
                           self._data)


def path_forward(store: SystemStore, path_id: str, images: np.ndarray) -> np.ndarray:
    """Logits of a frozen path on a batch of eval-mode images."""
    path = store.paths[path_id]
    x = adapt(images, path.resolution, path.channels).reshape(len(images), -1)
    for mod in store.path_modules(path_id):
        x = dense_np(x, mod.params, mod.activation)
    return x


# -- representation cache ---------------------------------------------------

class RepresentationCache:
    """Memoised frozen-path logits keyed by (path, source task, split, sample).

    Frozen paths always see eval-mode inputs, so every sample maps to one
    fixed output and concurrent writers can only ever insert equal values.
    """

    def __init__(self, store: SystemStore):
        self.store = store
        self._rows: dict[tuple, np.ndarray] = {}
        self._filled: dict[tuple, np.ndarray] = {}
        self.hits = 0
        self.misses = 0

    def _slot(self, path_id, task_id, split):
        key = (path_id, task_id, split)
        if key not in self._rows:
            if path_id not in self.store.paths:
                raise StoreError(f"unknown path {path_id}")
            n = len(self.store.task_data(task_id).labels[split])
            width = self.store.modules[self.store.paths[path_id].module_ids[-1]].out_dim
            self._rows.setdefault(key, np.zeros((n, width)))
            self._filled.setdefault(key, np.zeros(n, dtype=bool))
        return self._rows[key], self._filled[key]

    def get_batch(self, path_id: str, split: str, indices, task_id: str | None = None) -> np.ndarray:
        if path_id not in self.store.paths:
            raise StoreError(f"unknown path {path_id}")
        task_id = task_id or self.store.paths[path_id].task_id
        rows, filled = self._slot(path_id, task_id, split)
        indices = np.asarray(indices, dtype=np.int64)
        missing = np.unique(indices[~filled[indices]])
        self.misses += len(missing)
        self.hits += len(indices) - len(missing)
        if len(missing):
            images = self.store.task_data(task_id).images[split][missing]
            rows[missing] = path_forward(self.store, path_id, images)
            filled[missing] = True
        return rows[indices]

    def get_or_compute(self, path_id: str, split: str, sample_index: int, task_id: str | None = None) -> np.ndarray:
        return self.get_batch(path_id, split, [sample_index], task_id)[0]

    def get_split(self, path_id: str, split: str, task_id: str | None = None) -> np.ndarray:
        task_id = task_id or self.store.paths[path_id].task_id
        n = len(self.store.task_data(task_id).labels[split])
        return self.get_batch(path_id, split, np.arange(n), task_id)

    @property
    def hit_rate(self) -> float:
        total = self.hits + self.misses
        return self.hits / total if total else 0.0


# -- checkpoint -------------------------------------------------------------

def encode_tensors(tensors: dict[str, np.ndarray]) -> bytes:
    """Self-describing little-endian blob: name, dtype tag, rank, dims, data."""
    out = [BLOB_MAGIC, struct.pack("<II", FORMAT_VERSION, len(tensors))]
    for name, arr in tensors.items():
        arr = np.array(arr, dtype="<f8", order="C")
        raw = name.encode()
        out.append(struct.pack("<H", len(raw)) + raw)
        out.append(struct.pack("<BB", DTYPE_F64_LE, arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        out.append(arr.tobytes())
    return b"".join(out)


def decode_tensors(buf: bytes, what: str = "blob") -> dict[str, np.ndarray]:
    def take(n):
        nonlocal pos
        if pos + n > len(buf):
            raise TruncatedBlobError(f"{what}: truncated blob")
        chunk = buf[pos:pos + n]
        pos += n
        return chunk

    pos = 0
    if take(4) != BLOB_MAGIC:
        raise CheckpointError(f"{what}: not a tensor blob")
    version, count = struct.unpack("<II", take(8))
    if version != FORMAT_VERSION:
        raise VersionError(f"{what}: blob version {version}, expected {FORMAT_VERSION}")
    tensors = {}
    for _ in range(count):
        (n,) = struct.unpack("<H", take(2))
        name = take(n).decode()
        tag, rank = struct.unpack("<BB", take(2))
        if tag != DTYPE_F64_LE:
            raise CheckpointError(f"{what}: unsupported dtype tag {tag}")
        dims = struct.unpack(f"<{rank}Q", take(8 * rank))
        size = int(np.prod(dims)) if rank else 1
        tensors[name] = np.frombuffer(take(8 * size), dtype="<f8").reshape(dims).astype(np.float64)
    if pos != len(buf):
        raise CheckpointError(f"{what}: trailing bytes")
    return tensors


def write_blob(directory: Path, name: str, tensors: dict[str, np.ndarray]) -> dict:
    blob = encode_tensors(tensors)
    safe = name.replace("/", "__").replace(":", "_")
    rel = f"blobs/{safe}.bin"
    (directory / "blobs").mkdir(parents=True, exist_ok=True)
    (directory / rel).write_bytes(blob)
    return {"file": rel, "sha256": hashlib.sha256(blob).hexdigest()}


def read_blob(directory: Path, entry: dict, what: str) -> dict[str, np.ndarray]:
    path = Path(directory) / entry["file"]
    if not path.exists():
        raise CheckpointError(f"{what}: missing blob {entry['file']}")
    blob = path.read_bytes()
    if hashlib.sha256(blob).hexdigest() != entry["sha256"]:
        raise HashMismatchError(f"hash mismatch for {what}")
    return decode_tensors(blob, what)


def save_checkpoint(store: SystemStore, directory, extra: dict | None = None) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    modules = []
    for mod in store.modules.values():
        entry = mod.meta()
        entry["blob"] = write_blob(directory, mod.module_id, mod.params)
        modules.append(entry)
    manifest = {
        "format_version": FORMAT_VERSION,
        "tasks": [t.to_dict() for t in store.tasks.values()],
        "modules": modules,
        "paths": [asdict(p) for p in store.paths.values()],
        "models": list(store.models.values()),
        "path_scores": store.path_scores,
    }
    if extra:
        manifest["extra"] = extra
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return directory


def read_manifest(directory) -> dict:
    path = Path(directory) / "manifest.json"
    if not path.exists():
        raise CheckpointError(f"no manifest in {directory}")
    manifest = json.loads(path.read_text())
    version = manifest.get("format_version")
    if version != FORMAT_VERSION:
        raise VersionError(f"checkpoint format version {version} not supported (expected {FORMAT_VERSION})")
    return manifest


def load_checkpoint(directory) -> SystemStore:
    directory = Path(directory)
    manifest = read_manifest(directory)
    store = SystemStore()
    for t in manifest["tasks"]:
        store.add_task(TaskSpec.from_dict(t))
    for entry in manifest["modules"]:
        entry = dict(entry)
        blob = entry.pop("blob")
        params = read_blob(directory, blob, f"module {entry['module_id']}")
        mod = ModuleDef(params=params, **entry)
        store.modules[mod.module_id] = mod.frozen_copy() if mod.frozen else mod
    for p in manifest["paths"]:
        store.paths[p["path_id"]] = PathSpec(**p)
    for rec in manifest["models"]:
        store.models[rec["model_id"]] = rec
    store.path_scores = manifest.get("path_scores", {})
    return store


# -- DOT export -------------------------------------------------------------

PALETTE = ("#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b",
           "#e377c2", "#7f7f7f", "#bcbd22", "#17becf")


def _q(s: str) -> str:
    return '"' + s.replace("\\", "\\\\").replace('"', '\\"') + '"'


def export_graph(store: SystemStore) -> str:
    """DOT graph of the system.

    Module nodes are coloured by the task they were last trained on and each
    path is a chain of edges in its task colour.  Published multipath models
    add connector and router nodes joined by bold black edges.
    """
    task_ids = sorted(store.tasks)
    color = {t: PALETTE[i % len(PALETTE)] for i, t in enumerate(task_ids)}
    lines = ["digraph system {", "  rankdir=BT;", "  node [style=filled, fontsize=10];"]
    highlighted = set()
    for rec in store.models.values():
        highlighted.update([rec["main_path_id"], *rec["support_path_ids"]])
    used = []
    for path in store.paths.values():
        for mid in path.module_ids:
            if mid not in used:
                used.append(mid)
    for rec in store.models.values():
        used.extend(rec["connector_ids"] + ([rec["router_id"]] if rec.get("router_id") else []))
    for mid in used:
        mod = store.modules[mid]
        fill = color.get(mod.last_trained_task, "#ffffff")
        shape = {"head": "box", "connector": "diamond", "router": "hexagon"}.get(mod.kind, "ellipse")
        lines.append(f"  {_q(mid)} [shape={shape}, fillcolor={_q(fill)}, label={_q(mod.kind + ': ' + mid)}];")
    for path in store.paths.values():
        c = color[path.task_id]
        chain = list(path.module_ids)
        if path.path_id in highlighted:
            inp = f"input:{path.path_id}"
            lines.append(f"  {_q(inp)} [shape=plaintext, style=solid, label={_q(path.task_id)}];")
            chain = [inp] + chain
        for a, b in zip(chain, chain[1:]):
            lines.append(f"  {_q(a)} -> {_q(b)} [color={_q(c)}];")
    for rec in store.models.values():
        agg = f"multipath:{rec['model_id']}"
        lines.append(f"  {_q(agg)} [shape=doubleoctagon, fillcolor={_q(color.get(rec['task_id'], '#ffffff'))}, "
                     f"label={_q(rec['task_id'] + ' multipath')}];")
        main_head = store.paths[rec["main_path_id"]].module_ids[-1]
        lines.append(f"  {_q(main_head)} -> {_q(agg)} [color=black, penwidth=2.5];")
        if rec.get("router_id"):
            lines.append(f"  {_q(main_head)} -> {_q(rec['router_id'])} [color=black, penwidth=2.5];")
            lines.append(f"  {_q(rec['router_id'])} -> {_q(agg)} [color=black, penwidth=2.5, style=dashed];")
        for pid, cid in zip(rec["support_path_ids"], rec["connector_ids"]):
            head = store.paths[pid].module_ids[-1]
            lines.append(f"  {_q(head)} -> {_q(cid)} [color=black, penwidth=2.5];")
            lines.append(f"  {_q(cid)} -> {_q(agg)} [color=black, penwidth=2.5];")
    lines.append("}")
    return "\n".join(lines) + "\n"
