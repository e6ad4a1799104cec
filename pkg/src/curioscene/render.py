"""Differentiable soft renderer for circle (2D) and sphere (3D) primitives.

Each primitive produces a Layer (color, silhouette alpha, depth); layers are
composited back-to-front with confidence-as-alpha.  Silhouettes are sigmoid
ramps around the primitive boundary, so every pixel carries gradients toward
the parameters.  The sigmoid tail is truncated to exactly zero once it
underflows working precision; far-apart objects therefore do not interact at
all, while the truncation step (< 1e-16) is invisible to gradients.
"""

from __future__ import annotations

import math
import struct
import zlib
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import BehindCamera, FormatError, InvalidConfig, ShapeMismatch

# sigmoid(_TAIL) ~ 8.5e-17: below any meaningful float64 contribution.
_TAIL = -37.0

AMBIENT = 0.2

# Smoothing for the sphere-normal z component at the silhouette rim.
_RIM_BETA = 100.0

_NEAR = 1e-6

# Slipped under every square root: keeps the backward pass defined when a
# pixel center coincides with the primitive center or softplus underflows,
# without visibly moving any value (sqrt(eps) = 1e-15).
_SQRT_EPS = 1e-30


def default_softness(extent: float) -> float:
    """Edge sharpness giving a fixed-fraction transition band.

    `extent` is the image's span in whatever units distances are measured in
    (world units for the 2D plane, pixels for projected discs); the resulting
    10-90% band is about 4.4/50 of the image regardless of resolution.
    """
    return 50.0 / extent


@dataclass
class Camera:
    """Pinhole camera; y is up, the image is image_size x image_size."""

    fov_y: float
    image_size: int
    position: np.ndarray
    look_at: np.ndarray
    up: np.ndarray

    def validate(self) -> None:
        if not 0.0 < self.fov_y < math.pi:
            raise InvalidConfig(f"fov_y must be in (0, pi), got {self.fov_y}")
        if np.linalg.norm(np.asarray(self.look_at) - np.asarray(self.position)) == 0.0:
            raise InvalidConfig("camera position and look_at coincide")

    def basis(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Right/up/forward unit vectors of the view frame."""
        fwd = np.asarray(self.look_at, dtype=np.float64) - np.asarray(
            self.position, dtype=np.float64
        )
        fwd = fwd / np.linalg.norm(fwd)
        right = np.cross(fwd, np.asarray(self.up, dtype=np.float64))
        nr = np.linalg.norm(right)
        if nr == 0.0:
            raise InvalidConfig("camera up vector is parallel to the view direction")
        right = right / nr
        up = np.cross(right, fwd)
        return right, up, fwd

    def focal_pixels(self) -> float:
        return (self.image_size / 2.0) / math.tan(self.fov_y / 2.0)


@dataclass
class RenderSettings:
    softness: float
    background: np.ndarray
    depth_sort: bool = True

    def validate(self) -> None:
        if not self.softness > 0.0:
            raise InvalidConfig(f"softness must be positive, got {self.softness}")


@dataclass
class Layer:
    """One rendered primitive: color field, silhouette alpha, sort depth."""

    rgb: ad.Tensor
    alpha: ad.Tensor
    depth: float


def _soft_disc(z: ad.Tensor) -> ad.Tensor:
    """Sigmoid silhouette with the underflowed tail snapped to exact zero."""
    return z.sigmoid() * (z.data > _TAIL)


def _plane_grid(image_size: int, lo: float, hi: float) -> tuple[np.ndarray, np.ndarray]:
    """World coordinates of pixel centers; row 0 is the top (largest y)."""
    step = (hi - lo) / image_size
    centers = lo + (np.arange(image_size, dtype=np.float64) + 0.5) * step
    xs = np.broadcast_to(centers, (image_size, image_size)).copy()
    ys = np.broadcast_to((hi + lo) - centers[:, None], (image_size, image_size)).copy()
    return xs, ys


def _pixel_grid(image_size: int) -> tuple[np.ndarray, np.ndarray]:
    centers = np.arange(image_size, dtype=np.float64) + 0.5
    us = np.broadcast_to(centers, (image_size, image_size)).copy()
    vs = np.broadcast_to(centers[:, None], (image_size, image_size)).copy()
    return us, vs


def render_circle2d(
    tape: ad.Tape,
    center,
    radius,
    color,
    settings: RenderSettings,
    image_size: int,
    lo: float = -1.0,
    hi: float = 1.0,
) -> Layer:
    """Flat circle on the [lo, hi]^2 world plane.

    Differentiable w.r.t. center, radius, and color; radius may be a plain
    positive float for fixed-size worlds.
    """
    settings.validate()
    center = tape._lift(center)
    color = tape._lift(color)
    if center.data.shape != (2,):
        raise ShapeMismatch(f"circle center must be (2,), got {center.data.shape}")
    if not isinstance(radius, ad.Tensor):
        if radius <= 0.0:
            raise InvalidConfig(f"radius must be positive, got {radius}")
        radius = tape.constant(radius)
    elif radius.data <= 0.0:
        raise InvalidConfig(f"radius must be positive, got {float(radius.data)}")
    xs, ys = _plane_grid(image_size, lo, hi)
    dx = tape.constant(xs) - center[0]
    dy = tape.constant(ys) - center[1]
    dist = (dx.square() + dy.square() + _SQRT_EPS).sqrt()
    alpha = _soft_disc((radius - dist) * settings.softness)
    return Layer(rgb=color.reshape(3, 1, 1), alpha=alpha, depth=0.0)


def project(tape: ad.Tape, point, camera: Camera):
    """Pinhole projection to pixel coordinates; returns ((u, v), depth).

    u runs left to right, v top to bottom, in units of pixels; depth is the
    distance along the view axis.
    """
    camera.validate()
    point = tape._lift(point)
    if point.data.shape != (3,):
        raise ShapeMismatch(f"project expects a 3-vector, got {point.data.shape}")
    right, up, fwd = camera.basis()
    delta = point - camera.position
    depth = (delta * fwd).sum()
    if depth.data <= _NEAR:
        raise BehindCamera(f"point at depth {float(depth.data):.3g} is not in front of the camera")
    x_view = (delta * right).sum()
    y_view = (delta * up).sum()
    f = camera.focal_pixels()
    half = camera.image_size / 2.0
    u = x_view * f / depth + half
    v = -y_view * f / depth + half
    return ad.stack_cols(u.reshape(1), v.reshape(1)).reshape(2), depth


def render_sphere(
    tape: ad.Tape,
    center,
    radius: float,
    color,
    light_dir,
    camera: Camera,
    settings: RenderSettings,
) -> Layer:
    """Lambert-shaded sphere under a single directional light.

    light_dir is (azimuth, elevation); the unit vector points from the scene
    toward the light.  Differentiable w.r.t. center, color, and light_dir.
    """
    settings.validate()
    if radius <= 0.0:
        raise InvalidConfig(f"radius must be positive, got {radius}")
    center = tape._lift(center)
    color = tape._lift(color)
    light_dir = tape._lift(light_dir)
    uv, depth = project(tape, center, camera)
    size = camera.image_size
    f = camera.focal_pixels()
    proj_radius = f * radius / depth
    us, vs = _pixel_grid(size)
    du = tape.constant(us) - uv[0]
    dv = tape.constant(vs) - uv[1]
    dist = (du.square() + dv.square() + _SQRT_EPS).sqrt()
    alpha = _soft_disc((proj_radius - dist) * settings.softness)

    # Per-pixel normals reconstructed from the projected disc; u_rel/v_rel
    # span [-1, 1] across it.  softplus keeps nz positive (and finite in
    # gradient) across the rim instead of sqrt-of-negative outside it.
    u_rel = du / proj_radius
    v_rel = dv / proj_radius
    nz_sq = 1.0 - u_rel.square() - v_rel.square()
    nz = ((nz_sq * _RIM_BETA).softplus() * (1.0 / _RIM_BETA) + _SQRT_EPS).sqrt()
    norm = (u_rel.square() + v_rel.square() + nz.square()).sqrt()

    azimuth = light_dir[0]
    elevation = light_dir[1]
    lx = elevation.cos() * azimuth.cos()
    ly = elevation.sin()
    lz = elevation.cos() * azimuth.sin()
    right, up, fwd = camera.basis()
    l_right = lx * right[0] + ly * right[1] + lz * right[2]
    l_up = lx * up[0] + ly * up[1] + lz * up[2]
    l_fwd = lx * fwd[0] + ly * fwd[1] + lz * fwd[2]
    # Camera-space normal: +u_rel is right, +v_rel is down, -nz faces the
    # camera (forward points into the scene).
    ndotl = (u_rel * l_right - v_rel * l_up - nz * l_fwd) / norm
    shade = ad.maximum(ndotl, AMBIENT)
    rgb = color.reshape(3, 1, 1) * shade.reshape(1, size, size)
    # Sort key is the center's distance to the camera, not the view-axis depth.
    to_cam = float(np.linalg.norm(center.data - np.asarray(camera.position, dtype=np.float64)))
    return Layer(rgb=rgb, alpha=alpha, depth=to_cam)


def composite(
    layers: list[Layer],
    confidences: list,
    background,
    image_size: int | None = None,
    tape: ad.Tape | None = None,
    depth_sort: bool = True,
) -> ad.Tensor:
    """Back-to-front over-compositing with confidence-scaled alphas.

    Sort keys are the detached layer depths (ties keep input order); the
    blend itself stays differentiable.  Confidences may be floats or scalar
    tensors in [0, 1].
    """
    if len(layers) != len(confidences):
        raise ShapeMismatch(f"{len(layers)} layers but {len(confidences)} confidences")
    if not layers:
        if tape is None or image_size is None:
            raise ShapeMismatch("empty composite needs an explicit tape and image size")
        bg = np.asarray(background, dtype=np.float64).reshape(3, 1, 1)
        return tape.constant(np.broadcast_to(bg, (3, image_size, image_size)).copy())
    tape = layers[0].alpha.tape
    size = layers[0].alpha.data.shape[-1]
    for layer in layers:
        if layer.alpha.data.shape != (size, size):
            raise ShapeMismatch(f"layer alpha has shape {layer.alpha.data.shape}")
    order = range(len(layers))
    if depth_sort:
        order = sorted(order, key=lambda i: (-layers[i].depth, i))
    bg = np.asarray(background, dtype=np.float64).reshape(3, 1, 1)
    out = tape.constant(np.broadcast_to(bg, (3, size, size)).copy())
    for i in order:
        conf = confidences[i]
        if not isinstance(conf, ad.Tensor):
            conf = tape.constant(float(conf))
        a = layers[i].alpha * conf
        out = a * layers[i].rgb + (1.0 - a) * out
    return out


def render_scene(
    tape: ad.Tape,
    code,
    world,
    image_size: int,
    camera: Camera | None = None,
    settings: RenderSettings | None = None,
) -> ad.Tensor:
    """Render a scene code under a world definition to a (3, S, S) image.

    `code` is either a SceneCode (rendered from constants) or a dict of
    tensors with the same keys, which keeps the image differentiable for
    training.  Worlds with a fixed object count get their confidences forced
    to 1 so object count never hides behind opacity.
    """
    values = _code_tensors(tape, code)
    centers = values["centers"]
    n = centers.data.shape[0]
    settings = settings or world.render_settings(image_size)
    settings.validate()
    known_count = world.object_count[0] == world.object_count[1]
    use_color = "color" in world.groups and "rgbs" in values
    layers = []
    confs = []
    if world.dims == 2:
        lo, hi = world.plane
        for i in range(n):
            color = values["rgbs"][i] if use_color else tape.constant(world.fixed_color)
            layers.append(
                render_circle2d(
                    tape, centers[i], world.radius, color, settings, image_size, lo, hi
                )
            )
    else:
        camera = camera or world.camera
        camera = Camera(
            fov_y=camera.fov_y,
            image_size=image_size,
            position=camera.position,
            look_at=camera.look_at,
            up=camera.up,
        )
        if "light" in world.groups and "light" in values:
            light = values["light"]
        else:
            light = tape.constant(world.fixed_light)
        for i in range(n):
            color = values["rgbs"][i] if use_color else tape.constant(world.fixed_color)
            layers.append(
                render_sphere(tape, centers[i], world.radius, color, light, camera, settings)
            )
    use_conf = "confidence" in world.groups and "confidences" in values
    for i in range(n):
        if known_count or not use_conf:
            confs.append(1.0)
        else:
            confs.append(values["confidences"][i])
    return composite(
        layers,
        confs,
        settings.background,
        image_size=image_size,
        tape=tape,
        depth_sort=settings.depth_sort,
    )


def _code_tensors(tape: ad.Tape, code) -> dict[str, ad.Tensor]:
    if isinstance(code, dict):
        return code
    values: dict[str, ad.Tensor] = {"centers": tape.constant(code.centers)}
    if code.rgbs is not None:
        values["rgbs"] = tape.constant(code.rgbs)
    if code.confidences is not None:
        values["confidences"] = tape.constant(code.confidences)
    if code.light is not None:
        values["light"] = tape.constant(code.light)
    return values


# -- PNG ---------------------------------------------------------------


def image_to_bytes(image: np.ndarray) -> np.ndarray:
    """(3, H, W) floats in [0, 1] -> (H, W, 3) uint8."""
    if image.ndim != 3 or image.shape[0] != 3:
        raise ShapeMismatch(f"expected a (3, H, W) image, got {image.shape}")
    clipped = np.clip(np.round(image * 255.0), 0.0, 255.0).astype(np.uint8)
    return np.transpose(clipped, (1, 2, 0))


def write_png(path, image: np.ndarray) -> None:
    """8-bit RGB PNG from a (3, H, W) float image in [0, 1]."""
    pixels = image_to_bytes(image)
    h, w, _ = pixels.shape
    raw = b"".join(b"\x00" + pixels[row].tobytes() for row in range(h))

    def chunk(tag: bytes, payload: bytes) -> bytes:
        body = tag + payload
        return struct.pack(">I", len(payload)) + body + struct.pack(">I", zlib.crc32(body))

    header = struct.pack(">IIBBBBB", w, h, 8, 2, 0, 0, 0)
    blob = (
        b"\x89PNG\r\n\x1a\n"
        + chunk(b"IHDR", header)
        + chunk(b"IDAT", zlib.compress(raw, 9))
        + chunk(b"IEND", b"")
    )
    with open(path, "wb") as fh:
        fh.write(blob)


def read_png(path) -> np.ndarray:
    """Read an 8-bit RGB PNG into a (3, H, W) float image in [0, 1]."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:8] != b"\x89PNG\r\n\x1a\n":
        raise FormatError("not a PNG file")
    pos = 8
    meta = None
    idat = b""
    while pos + 8 <= len(blob):
        (length,) = struct.unpack(">I", blob[pos : pos + 4])
        tag = blob[pos + 4 : pos + 8]
        payload = blob[pos + 8 : pos + 8 + length]
        pos += 12 + length
        if tag == b"IHDR":
            meta = struct.unpack(">IIBBBBB", payload)
        elif tag == b"IDAT":
            idat += payload
        elif tag == b"IEND":
            break
    if meta is None:
        raise FormatError("PNG has no header chunk")
    w, h, bit_depth, color_type, _, _, interlace = meta
    if bit_depth != 8 or color_type != 2 or interlace != 0:
        raise FormatError("only plain 8-bit RGB PNGs are supported")
    try:
        raw = zlib.decompress(idat)
    except zlib.error as exc:
        raise FormatError(f"corrupt PNG pixel data: {exc}") from exc
    stride = 3 * w
    if len(raw) != h * (stride + 1):
        raise FormatError("PNG pixel data has the wrong length")
    out = np.zeros((h, stride), dtype=np.uint8)
    prev = np.zeros(stride, dtype=np.uint8)
    for row in range(h):
        filt = raw[row * (stride + 1)]
        line = np.frombuffer(
            raw, dtype=np.uint8, count=stride, offset=row * (stride + 1) + 1
        ).copy()
        out[row] = _unfilter(filt, line, prev)
        prev = out[row]
    pixels = out.reshape(h, w, 3).astype(np.float64) / 255.0
    return np.transpose(pixels, (2, 0, 1))


def _unfilter(filt: int, line: np.ndarray, prev: np.ndarray) -> np.ndarray:
    bpp = 3
    if filt == 0:
        return line
    if filt == 2:
        return (line.astype(np.int32) + prev).astype(np.uint8)
    out = np.zeros_like(line)
    for i in range(len(line)):
        left = int(out[i - bpp]) if i >= bpp else 0
        above = int(prev[i])
        upleft = int(prev[i - bpp]) if i >= bpp else 0
        if filt == 1:
            pred = left
        elif filt == 3:
            pred = (left + above) // 2
        elif filt == 4:
            p = left + above - upleft
            pa, pb, pc = abs(p - left), abs(p - above), abs(p - upleft)
            if pa <= pb and pa <= pc:
                pred = left
            elif pb <= pc:
                pred = above
            else:
                pred = upleft
        else:
            raise FormatError(f"unsupported PNG filter {filt}")
        out[i] = (int(line[i]) + pred) & 0xFF
    return out
