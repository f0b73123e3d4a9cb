"""Dataset pools and task-stream construction.

A pool is just (images, labels) with a per-class index. Federations are
built from a pool by one of four generators:

  ltp       every client draws its own disjoint class sequence from the
            pool, so clients may share no tasks at all
  shuffle   one global task sequence, re-ordered per client
  noisy     shuffle layout plus M clients whose first three (of six)
            tasks get uniformly resampled labels
  synthetic ltp layout over the built-in synthetic pool

All construction is driven by a single seeded generator, so identical
specs produce identical federations byte for byte.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from affcl.errors import CapacityError, FormatError, IntegrityError
from affcl.rng import numpy_generator

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801

STREAM_KINDS = ("ltp", "shuffle", "noisy", "synthetic")


@dataclass
class DatasetPool:
    """All available examples, indexed by class."""

    images: np.ndarray  # (n, c, h, w) float32 in [0, 1]
    labels: np.ndarray  # (n,) int64
    num_classes: int

    def __post_init__(self):
        self.by_class: dict[int, np.ndarray] = {
            int(c): np.flatnonzero(self.labels == c) for c in np.unique(self.labels)
        }

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])


@dataclass(frozen=True)
class TaskSpec:
    client: int
    step: int  # 0-based task index within the client's sequence
    class_list: tuple[int, ...]
    sample_ids: dict[int, tuple[int, ...]]  # class -> pool row indices
    noisy: bool


@dataclass
class ClientTask:
    spec: TaskSpec
    train_x: np.ndarray
    train_y: np.ndarray
    test_x: np.ndarray
    test_y: np.ndarray


@dataclass(frozen=True)
class FederationSpec:
    num_clients: int
    num_tasks: int
    classes_per_task: int
    kind: str = "ltp"
    noisy_clients: int = 0
    seed: int = 0
    per_class_cap: int = 500
    train_fraction: float = 0.85

    def __post_init__(self):
        if self.kind not in STREAM_KINDS:
            raise ValueError(f"unknown stream kind {self.kind!r}")
        if self.kind == "noisy" and self.num_tasks != 6:
            raise ValueError("noisy streams follow the 6-task protocol "
                             "(3 noisy steps, 3 clean steps)")
        if self.noisy_clients > self.num_clients:
            raise ValueError("more noisy clients than clients")


@dataclass
class Federation:
    spec: FederationSpec
    clients: list[list[ClientTask]]
    num_classes: int
    image_shape: tuple[int, int, int]

    def task_classes(self, step: int) -> set[int]:
        """Union of class lists of every client's task at `step`."""
        out: set[int] = set()
        for stream in self.clients:
            out.update(stream[step].spec.class_list)
        return out

    def manifest(self) -> dict:
        """Audit export: client -> step -> class_list and sample ids."""
        return {
            "kind": self.spec.kind,
            "seed": self.spec.seed,
            "clients": [
                [
                    {
                        "step": task.spec.step,
                        "classes": list(task.spec.class_list),
                        "noisy": task.spec.noisy,
                        "sample_ids": {
                            str(c): list(map(int, ids))
                            for c, ids in task.spec.sample_ids.items()
                        },
                    }
                    for task in stream
                ]
                for stream in self.clients
            ],
        }


# ---------------------------------------------------------------------------
# IDX ingestion
# ---------------------------------------------------------------------------

def _read_idx(path, magic_expected: int, ndim: int) -> np.ndarray:
    with open(path, "rb") as f:
        head = f.read(4 + 4 * ndim)
        if len(head) < 4 + 4 * ndim:
            raise IntegrityError(f"{path}: truncated header")
        magic = struct.unpack(">i", head[:4])[0]
        if magic != magic_expected:
            raise FormatError(f"{path}: bad magic 0x{magic:08x}")
        dims = struct.unpack(f">{ndim}i", head[4:])
        count = int(np.prod(dims))
        raw = f.read()
    if len(raw) < count:
        raise IntegrityError(
            f"{path}: expected {count} bytes of data, found {len(raw)}"
        )
    return np.frombuffer(raw[:count], dtype=np.uint8).reshape(dims)


def load_idx(images_path, labels_path) -> DatasetPool:
    """Parse an IDX image/label archive pair into a pool.

    Pixels come back as floats in [0, 1]; labels as integers. Image and
    label counts must agree.
    """
    images = _read_idx(images_path, IMAGE_MAGIC, ndim=3)
    labels = _read_idx(labels_path, LABEL_MAGIC, ndim=1)
    if images.shape[0] != labels.shape[0]:
        raise IntegrityError(
            f"{images.shape[0]} images but {labels.shape[0]} labels"
        )
    imgs = (images.astype(np.float32) / 255.0)[:, None, :, :]
    lbls = labels.astype(np.int64)
    return DatasetPool(images=imgs, labels=lbls, num_classes=int(lbls.max()) + 1)


# ---------------------------------------------------------------------------
# Synthetic pool
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SyntheticSpec:
    classes: int = 16
    per_class: int = 500
    image_size: int = 12
    noise_sigma: float = 0.15
    seed: int = 0


def _bar_template(size: int, angle: float) -> np.ndarray:
    """Bright bar through the center at the given angle."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    cy = cx = (size - 1) / 2.0
    # signed distance from the line through the center with direction angle
    nx, ny = -np.sin(angle), np.cos(angle)
    dist = np.abs((xx - cx) * nx + (yy - cy) * ny)
    return np.clip(1.5 - dist, 0.0, 1.0)


def _blob_template(size: int, angle: float) -> np.ndarray:
    """Gaussian bump at a fixed off-center position."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    r = size / 3.2
    cy = (size - 1) / 2.0 + r * np.sin(angle)
    cx = (size - 1) / 2.0 + r * np.cos(angle)
    sigma = size / 6.5
    return np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / (2 * sigma**2))


def class_template(c: int, num_classes: int, size: int) -> np.ndarray:
    """Fixed template for class c: bars for even classes, blobs for odd."""
    half = max(1, (num_classes + 1) // 2)
    if c % 2 == 0:
        return _bar_template(size, np.pi * (c // 2) / half)
    return _blob_template(size, 2 * np.pi * (c // 2) / half)


def make_synthetic(spec: SyntheticSpec) -> DatasetPool:
    """Seeded pool of noisy template images, one template per class."""
    rng = numpy_generator(spec.seed, "synthetic-pool")
    n = spec.classes * spec.per_class
    images = np.empty((n, 1, spec.image_size, spec.image_size), dtype=np.float32)
    labels = np.empty(n, dtype=np.int64)
    row = 0
    for c in range(spec.classes):
        base = class_template(c, spec.classes, spec.image_size)
        for _ in range(spec.per_class):
            noise = rng.normal(0.0, spec.noise_sigma, size=base.shape)
            images[row, 0] = np.clip(base + noise, 0.0, 1.0).astype(np.float32)
            labels[row] = c
            row += 1
    return DatasetPool(images=images, labels=labels, num_classes=spec.classes)


# ---------------------------------------------------------------------------
# Federation construction
# ---------------------------------------------------------------------------

def _draw_class_sequences(spec: FederationSpec, pool_classes: list[int],
                          rng: np.random.Generator) -> list[list[tuple[int, ...]]]:
    """Per-client list of per-step class tuples, disjoint within a client."""
    need = spec.classes_per_task * spec.num_tasks
    if spec.kind in ("shuffle", "noisy"):
        if len(pool_classes) < need:
            raise CapacityError(
                f"shuffle needs {need} classes, pool has {len(pool_classes)}"
            )
        chosen = rng.choice(pool_classes, size=need, replace=False)
        tasks = [
            tuple(int(c) for c in chosen[i : i + spec.classes_per_task])
            for i in range(0, need, spec.classes_per_task)
        ]
        out = []
        for _ in range(spec.num_clients):
            order = rng.permutation(spec.num_tasks)
            out.append([tasks[j] for j in order])
        return out

    # ltp / synthetic: independent draws per client
    if len(pool_classes) < need:
        raise CapacityError(
            f"each client needs {need} distinct classes, pool has {len(pool_classes)}"
        )
    out = []
    for _ in range(spec.num_clients):
        chosen = rng.choice(pool_classes, size=need, replace=False)
        out.append(
            [
                tuple(int(c) for c in chosen[i : i + spec.classes_per_task])
                for i in range(0, need, spec.classes_per_task)
            ]
        )
    return out


def _split_train_test(ids: np.ndarray, train_fraction: float,
                      rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    ids = rng.permutation(ids)
    n_train = int(round(len(ids) * train_fraction))
    n_train = min(max(n_train, 1), len(ids) - 1) if len(ids) > 1 else len(ids)
    return ids[:n_train], ids[n_train:]


def make_federation(spec: FederationSpec, pool: DatasetPool) -> Federation:
    """Materialize client task streams from a pool.

    Each task draws up to `per_class_cap` examples per class and splits
    them 85/15 (configurable) into train/test, stratified by class. Noisy
    tasks get labels resampled uniformly from the task's own class list,
    so noise never leaks classes across tasks.
    """
    rng = numpy_generator(spec.seed, "federation", spec.kind)
    pool_classes = sorted(int(c) for c in pool.by_class)
    sequences = _draw_class_sequences(spec, pool_classes, rng)

    noisy_set: set[int] = set()
    if spec.kind == "noisy" and spec.noisy_clients > 0:
        noisy_set = {
            int(k)
            for k in rng.choice(spec.num_clients, size=spec.noisy_clients, replace=False)
        }

    clients: list[list[ClientTask]] = []
    for k in range(spec.num_clients):
        stream: list[ClientTask] = []
        for t in range(spec.num_tasks):
            class_list = sequences[k][t]
            noisy = k in noisy_set and t < 3
            sample_ids: dict[int, tuple[int, ...]] = {}
            train_parts, test_parts = [], []
            for c in class_list:
                avail = pool.by_class[c]
                take = min(spec.per_class_cap, len(avail))
                ids = rng.choice(avail, size=take, replace=False)
                sample_ids[c] = tuple(int(i) for i in np.sort(ids))
                tr, te = _split_train_test(ids, spec.train_fraction, rng)
                train_parts.append(tr)
                test_parts.append(te)
            train_ids = np.concatenate(train_parts)
            test_ids = np.concatenate(test_parts)
            train_y = pool.labels[train_ids].copy()
            test_y = pool.labels[test_ids].copy()
            if noisy:
                classes = np.asarray(class_list)
                train_y = classes[rng.integers(0, len(classes), size=len(train_y))]
                test_y = classes[rng.integers(0, len(classes), size=len(test_y))]
            task_spec = TaskSpec(
                client=k, step=t, class_list=class_list,
                sample_ids=sample_ids, noisy=noisy,
            )
            stream.append(
                ClientTask(
                    spec=task_spec,
                    train_x=pool.images[train_ids].copy(),
                    train_y=train_y.astype(np.int64),
                    test_x=pool.images[test_ids].copy(),
                    test_y=test_y.astype(np.int64),
                )
            )
        clients.append(stream)

    return Federation(
        spec=spec,
        clients=clients,
        num_classes=pool.num_classes,
        image_shape=pool.image_shape,
    )
