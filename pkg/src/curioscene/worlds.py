"""Synthetic scene worlds and dataset generation.

A WorldSpec fixes geometry (2D circles or 3D spheres), which parameter
groups vary, their sampling ranges, and the camera.  Ground-truth labels
ride along with every dataset but sit behind a capability flag so the
unsupervised training path physically cannot read them.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import render as rn
from .errors import CapabilityError, FormatError, InvalidConfig, RejectionExhausted
from .nn import SceneCode
from .rng import derive_rng

_WORLD_STREAM = 1

_MAX_REJECTS = 1000

COLOR_RANGE = (0.2, 1.0)

_IMAGES_MAGIC = b"IMG1"


@dataclass
class WorldSpec:
    name: str
    dims: int
    dof: int
    object_count: tuple[int, int]
    groups: frozenset
    ranges: dict
    radius: float
    background: np.ndarray
    camera: rn.Camera | None = None
    plane: tuple[float, float] = (-1.0, 1.0)
    fixed_color: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0]))
    fixed_light: np.ndarray = field(default_factory=lambda: np.array([0.9, 0.7]))

    def validate(self) -> None:
        if self.dims not in (2, 3):
            raise InvalidConfig(f"dims must be 2 or 3, got {self.dims}")
        lo, hi = self.object_count
        if not 1 <= lo <= hi:
            raise InvalidConfig(f"bad object count range {self.object_count}")
        if self.radius <= 0.0:
            raise InvalidConfig(f"radius must be positive, got {self.radius}")
        if "position" not in self.groups:
            raise InvalidConfig("every world needs the position group")
        if self.dims == 3 and self.camera is None:
            raise InvalidConfig("3D worlds need a camera")
        per_object = self.dims
        if "color" in self.groups:
            per_object += 3
        if "rotation" in self.groups:
            per_object += 1
        if "confidence" in self.groups:
            per_object += 1
        expected = per_object + (2 if "light" in self.groups else 0)
        if self.dof != expected:
            raise InvalidConfig(f"dof {self.dof} does not match enabled groups ({expected})")

    def render_settings(self, image_size: int) -> rn.RenderSettings:
        extent = (self.plane[1] - self.plane[0]) if self.dims == 2 else float(image_size)
        return rn.RenderSettings(
            softness=rn.default_softness(extent), background=self.background
        )


def _default_camera() -> rn.Camera:
    return rn.Camera(
        fov_y=math.pi / 3.0,
        image_size=64,
        position=np.array([0.0, 0.0, 6.0]),
        look_at=np.zeros(3),
        up=np.array([0.0, 1.0, 0.0]),
    )


# Sphere positions stay inside a box whose projection (plus the silhouette)
# never leaves the frame at the default camera.
_SPHERE_BOX = (np.array([-2.0, -2.0, -1.0]), np.array([2.0, 2.0, 1.0]))

_LIGHT_PATCH = ((0.0, 2.0 * math.pi), (math.pi / 6.0, math.pi / 2.0))


def get_world(name: str) -> WorldSpec:
    if name == "circles":
        spec = WorldSpec(
            name="circles",
            dims=2,
            dof=2,
            object_count=(1, 1),
            groups=frozenset({"position"}),
            ranges={"position": (np.array([-0.7, -0.7]), np.array([0.7, 0.7]))},
            radius=0.25,
            background=np.zeros(3),
        )
    elif name == "spheres":
        spec = WorldSpec(
            name="spheres",
            dims=3,
            dof=6,
            object_count=(3, 3),
            groups=frozenset({"position", "color"}),
            ranges={"position": _SPHERE_BOX, "color": COLOR_RANGE},
            radius=0.5,
            background=np.full(3, 0.5),
            camera=_default_camera(),
        )
    elif name == "varied":
        spec = WorldSpec(
            name="varied",
            dims=3,
            dof=7,
            object_count=(2, 5),
            groups=frozenset({"position", "color", "confidence"}),
            ranges={"position": _SPHERE_BOX, "color": COLOR_RANGE},
            radius=0.5,
            background=np.full(3, 0.5),
            camera=_default_camera(),
        )
    elif name == "spheres_light":
        spec = WorldSpec(
            name="spheres_light",
            dims=3,
            dof=8,
            object_count=(3, 3),
            groups=frozenset({"position", "color", "light"}),
            ranges={"position": _SPHERE_BOX, "color": COLOR_RANGE, "light": _LIGHT_PATCH},
            radius=0.5,
            background=np.full(3, 0.5),
            camera=_default_camera(),
        )
    else:
        raise InvalidConfig(f"unknown world {name!r}; valid worlds: {', '.join(WORLD_NAMES)}")
    spec.validate()
    return spec


WORLD_NAMES = ("circles", "spheres", "varied", "spheres_light")


def sample_scene(spec: WorldSpec, rng: np.random.Generator) -> SceneCode:
    """Draw one scene; the whole placement is resampled until no two objects
    intersect, which keeps the joint distribution unbiased."""
    spec.validate()
    lo_n, hi_n = spec.object_count
    n = int(rng.integers(lo_n, hi_n + 1))
    pos_lo, pos_hi = spec.ranges["position"]
    centers = None
    for _ in range(_MAX_REJECTS):
        cand = rng.uniform(pos_lo, pos_hi, size=(n, spec.dims))
        if n == 1 or _min_pair_distance(cand) > 2.0 * spec.radius:
            centers = cand
            break
    if centers is None:
        raise RejectionExhausted(
            f"no non-intersecting placement of {n} objects in {_MAX_REJECTS} attempts"
        )
    rgbs = None
    if "color" in spec.groups:
        c_lo, c_hi = spec.ranges["color"]
        rgbs = rng.uniform(c_lo, c_hi, size=(n, 3))
    confidences = np.ones(n) if "confidence" in spec.groups else None
    light = None
    if "light" in spec.groups:
        (az_lo, az_hi), (el_lo, el_hi) = spec.ranges["light"]
        light = np.array([rng.uniform(az_lo, az_hi), rng.uniform(el_lo, el_hi)])
    return SceneCode(centers=centers, rgbs=rgbs, confidences=confidences, light=light)


def _min_pair_distance(centers: np.ndarray) -> float:
    deltas = centers[:, None, :] - centers[None, :, :]
    dists = np.sqrt((deltas**2).sum(axis=2))
    return float(dists[np.triu_indices(len(centers), k=1)].min())


def render_label(spec: WorldSpec, code: SceneCode, image_size: int) -> np.ndarray:
    tape = ad.Tape()
    return rn.render_scene(tape, code, spec, image_size).data


def split_sizes(n_total: int) -> tuple[int, int, int]:
    """Train/val/test sizes; 1000/500/500 at 2000, proportional otherwise."""
    if n_total < 3:
        raise InvalidConfig(f"need at least 3 scenes for the three splits, got {n_total}")
    train = n_total // 2
    val = max(1, n_total // 4)
    return train, val, n_total - train - val


class Dataset:
    """Images plus hidden labels.  `label(i)` needs the labels capability."""

    def __init__(self, spec, image_size, seed, images, labels, allow_labels):
        self.spec = spec
        self.image_size = image_size
        self.seed = seed
        self.images = images
        self._labels = labels
        self._allow_labels = allow_labels
        # running count of label reads; lets callers assert label-free phases
        self.label_reads = 0
        train, val, test = split_sizes(len(images))
        self.split = {
            "train": np.arange(0, train),
            "val": np.arange(train, train + val),
            "test": np.arange(train + val, train + val + test),
        }

    def __len__(self) -> int:
        return len(self.images)

    @property
    def labels_allowed(self) -> bool:
        return self._allow_labels

    def label(self, index: int) -> SceneCode:
        if not self._allow_labels:
            raise CapabilityError("this dataset handle was opened without label access")
        self.label_reads += 1
        return self._labels[index]

    def labels(self, indices=None) -> list[SceneCode]:
        if indices is None:
            indices = range(len(self._labels))
        return [self.label(int(i)) for i in indices]


def _build_scene(spec: WorldSpec, seed: int, index: int, image_size: int):
    rng = derive_rng(seed, _WORLD_STREAM, index)
    code = sample_scene(spec, rng)
    return code, render_label(spec, code, image_size)


def generate_dataset(
    spec: WorldSpec, n_total: int, seed: int, image_size: int = 64, workers: int = 1
) -> Dataset:
    """Sample and render n_total scenes deterministically.

    Every scene draws from its own derived RNG stream, so results are
    bitwise identical for any worker count.
    """
    spec.validate()
    split_sizes(n_total)
    if workers > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(
                pool.map(
                    _build_scene,
                    [spec] * n_total,
                    [seed] * n_total,
                    range(n_total),
                    [image_size] * n_total,
                    chunksize=max(1, n_total // (4 * workers)),
                )
            )
    else:
        results = [_build_scene(spec, seed, i, image_size) for i in range(n_total)]
    labels = [code for code, _ in results]
    images = np.stack([img for _, img in results])
    return Dataset(spec, image_size, seed, images, labels, allow_labels=True)


# -- disk layout -------------------------------------------------------


def _label_to_record(code: SceneCode) -> dict:
    record = {"centers": code.centers.tolist()}
    if code.rgbs is not None:
        record["colors"] = code.rgbs.tolist()
    if code.rotations is not None:
        record["rotations"] = code.rotations.tolist()
    if code.confidences is not None:
        record["confidences"] = code.confidences.tolist()
    if code.light is not None:
        record["light"] = code.light.tolist()
    return record


def _label_from_record(record: dict) -> SceneCode:
    def arr(key):
        return np.asarray(record[key], dtype=np.float64) if key in record else None

    return SceneCode(
        centers=np.asarray(record["centers"], dtype=np.float64),
        rgbs=arr("colors"),
        rotations=arr("rotations"),
        confidences=arr("confidences"),
        light=arr("light"),
    )


def save_dataset(dataset: Dataset, path: str) -> None:
    os.makedirs(path, exist_ok=True)
    os.makedirs(os.path.join(path, "preview"), exist_ok=True)
    spec = dataset.spec
    pos_lo, pos_hi = spec.ranges["position"]
    meta = {
        "world": spec.name,
        "dims": spec.dims,
        "dof": spec.dof,
        "object_count": f"{spec.object_count[0]},{spec.object_count[1]}",
        "groups": ",".join(sorted(spec.groups)),
        "radius": repr(float(spec.radius)),
        "position_lo": ",".join(repr(float(v)) for v in np.atleast_1d(pos_lo)),
        "position_hi": ",".join(repr(float(v)) for v in np.atleast_1d(pos_hi)),
        "seed": dataset.seed,
        "image_size": dataset.image_size,
        "n_total": len(dataset),
        "n_train": len(dataset.split["train"]),
        "n_val": len(dataset.split["val"]),
        "n_test": len(dataset.split["test"]),
    }
    with open(os.path.join(path, "meta.txt"), "w") as fh:
        for key, value in meta.items():
            fh.write(f"{key}={value}\n")
    n, _, h, w = dataset.images.shape
    with open(os.path.join(path, "images.bin"), "wb") as fh:
        fh.write(_IMAGES_MAGIC + f" {n} {h} {w} 3\n".encode("ascii"))
        for i in range(n):
            fh.write(np.transpose(dataset.images[i], (1, 2, 0)).astype("<f8").tobytes())
    with open(os.path.join(path, "labels.jsonl"), "w") as fh:
        for code in dataset._labels:
            fh.write(json.dumps(_label_to_record(code)) + "\n")
    for i in range(n):
        rn.write_png(os.path.join(path, "preview", f"{i:04d}.png"), dataset.images[i])


def _parse_meta(path: str) -> dict:
    meta = {}
    try:
        with open(path) as fh:
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                if "=" not in line:
                    raise FormatError(f"malformed meta line {line!r}")
                key, value = line.split("=", 1)
                meta[key] = value
    except OSError as exc:
        raise FormatError(f"cannot read dataset meta: {exc}") from exc
    return meta


def load_dataset(path: str, allow_labels: bool = False) -> Dataset:
    meta = _parse_meta(os.path.join(path, "meta.txt"))
    try:
        spec = get_world(meta["world"])
        seed = int(meta["seed"])
        image_size = int(meta["image_size"])
        n_total = int(meta["n_total"])
    except (KeyError, ValueError) as exc:
        raise FormatError(f"incomplete dataset meta: {exc}") from exc
    with open(os.path.join(path, "images.bin"), "rb") as fh:
        header = fh.readline()
        parts = header.split()
        if len(parts) != 5 or parts[0] != _IMAGES_MAGIC:
            raise FormatError("bad images.bin header")
        n, h, w, c = (int(p) for p in parts[1:])
        if n != n_total or c != 3 or h != image_size or w != image_size:
            raise FormatError(f"images.bin dims {(n, h, w, c)} disagree with meta")
        frame_bytes = h * w * c * 8
        images = np.zeros((n, 3, h, w))
        for i in range(n):
            raw = fh.read(frame_bytes)
            if len(raw) != frame_bytes:
                raise FormatError(f"images.bin truncated at frame {i}")
            frame = np.frombuffer(raw, dtype="<f8").reshape(h, w, c)
            images[i] = np.transpose(frame, (2, 0, 1))
    labels = []
    with open(os.path.join(path, "labels.jsonl")) as fh:
        for i, line in enumerate(fh):
            if not line.strip():
                continue
            try:
                code = _label_from_record(json.loads(line))
                code.validate()
            except Exception as exc:
                raise FormatError(f"bad label record {i}: {exc}") from exc
            labels.append(code)
    if len(labels) != n_total:
        raise FormatError(f"label record {len(labels)} missing ({n_total} expected)")
    return Dataset(spec, image_size, seed, images, labels, allow_labels=allow_labels)
