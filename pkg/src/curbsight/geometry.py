"""Equirectangular panorama geometry.

Conventions
-----------
World frame: +x right, +y up, +z forward. Longitude is ``atan2(x, z)`` and
latitude ``asin(y)``; longitude 0 lands on the horizontal centre of the
panorama and the longitude seam (+-180 deg) on its left/right edge.

Pixel coordinates are continuous: pixel ``i`` spans ``[i, i + 1)`` and its
centre is ``i + 0.5``. A view of width ``w`` has its optical axis at
``(w / 2, h / 2)``. ``fov`` is the horizontal field of view; pixels are
square. Positive yaw turns right (toward +x), positive pitch tilts up.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


class GeometryError(ValueError):
    pass


@dataclass(frozen=True)
class BoundingBox:
    x_min: float
    y_min: float
    x_max: float
    y_max: float

    @property
    def wraps(self) -> bool:
        """True for a panorama box that crosses the longitude seam."""
        return self.x_min > self.x_max

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def height(self) -> float:
        return self.y_max - self.y_min

    @property
    def area(self) -> float:
        return max(0.0, self.width) * max(0.0, self.height)

    def check(self, allow_wrap: bool = False) -> "BoundingBox":
        vals = (self.x_min, self.y_min, self.x_max, self.y_max)
        if not all(math.isfinite(v) for v in vals):
            raise GeometryError(f"non-finite box {vals}")
        if not self.y_min < self.y_max:
            raise GeometryError(f"degenerate box: y_min={self.y_min} >= y_max={self.y_max}")
        if self.x_min == self.x_max or (self.x_min > self.x_max and not allow_wrap):
            raise GeometryError(f"degenerate box: x_min={self.x_min}, x_max={self.x_max}")
        return self

    def to_list(self) -> list[float]:
        return [self.x_min, self.y_min, self.x_max, self.y_max]

    def to_dict(self) -> dict:
        return {"x_min": self.x_min, "y_min": self.y_min, "x_max": self.x_max, "y_max": self.y_max}

    @classmethod
    def from_dict(cls, d: dict) -> "BoundingBox":
        return cls(float(d["x_min"]), float(d["y_min"]), float(d["x_max"]), float(d["y_max"]))

    @classmethod
    def from_xywh(cls, xywh) -> "BoundingBox":
        x, y, w, h = (float(v) for v in xywh)
        return cls(x, y, x + w, y + h)


def unwrap_box(box: BoundingBox, pano_width: float) -> BoundingBox:
    """Express a seam-crossing box with ``x_max`` beyond the right edge."""
    if box.wraps:
        return BoundingBox(box.x_min, box.y_min, box.x_max + pano_width, box.y_max)
    return box


@dataclass(frozen=True)
class PerspectiveView:
    view_id: str
    yaw: float = 0.0
    pitch: float = 0.0
    fov: float = 90.0
    width: int = 2048
    height: int = 2048

    def __post_init__(self):
        if not 0.0 < self.fov < 180.0:
            raise GeometryError(f"view {self.view_id!r}: fov must be in (0, 180), got {self.fov}")
        if self.width <= 0 or self.height <= 0:
            raise GeometryError(f"view {self.view_id!r}: zero-sized view {self.width}x{self.height}")

    @property
    def focal(self) -> float:
        return (self.width / 2.0) / math.tan(math.radians(self.fov) / 2.0)

    def rotation(self) -> np.ndarray:
        """Camera-to-world rotation (yaw after pitch)."""
        y, p = math.radians(self.yaw), math.radians(self.pitch)
        r_yaw = np.array([[math.cos(y), 0.0, math.sin(y)],
                          [0.0, 1.0, 0.0],
                          [-math.sin(y), 0.0, math.cos(y)]])
        r_pitch = np.array([[1.0, 0.0, 0.0],
                            [0.0, math.cos(p), math.sin(p)],
                            [0.0, -math.sin(p), math.cos(p)]])
        return r_yaw @ r_pitch

    @classmethod
    def from_dict(cls, d: dict) -> "PerspectiveView":
        return cls(view_id=str(d["view_id"]), yaw=float(d.get("yaw", 0.0)),
                   pitch=float(d.get("pitch", 0.0)), fov=float(d.get("fov", 90.0)),
                   width=int(d.get("width", 2048)), height=int(d.get("height", 2048)))

    def to_dict(self) -> dict:
        return {"view_id": self.view_id, "yaw": self.yaw, "pitch": self.pitch,
                "fov": self.fov, "width": self.width, "height": self.height}


def default_views(size: int = 2048, fov: float = 90.0) -> list[PerspectiveView]:
    return [PerspectiveView(f"v{i}", yaw=90.0 * i, pitch=0.0, fov=fov, width=size, height=size)
            for i in range(4)]


@dataclass
class EquirectImage:
    image_id: str
    pixels: np.ndarray = field(repr=False)  # H x W x C, uint8

    def __post_init__(self):
        if self.pixels.ndim == 2:
            self.pixels = self.pixels[:, :, None]
        h, w = self.pixels.shape[:2]
        if h <= 0 or w != 2 * h:
            raise GeometryError(f"{self.image_id}: equirectangular image must be 2:1, got {w}x{h}")

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @classmethod
    def blank(cls, image_id: str, width: int, height: int) -> "EquirectImage":
        """Geometry-only stand-in; allocates a 1-channel buffer."""
        return cls(image_id, np.zeros((height, width, 1), dtype=np.uint8))


# --- point mappings -------------------------------------------------------

def view_pixel_to_direction(view: PerspectiveView, px) -> np.ndarray:
    x, y = float(px[0]), float(px[1])
    if not (0.0 <= x <= view.width and 0.0 <= y <= view.height):
        raise GeometryError(f"pixel ({x}, {y}) outside {view.width}x{view.height} view {view.view_id!r}")
    return _view_rays(view, np.array([x]), np.array([y]))[0]


def _view_rays(view: PerspectiveView, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    f = view.focal
    cam = np.stack([(xs - view.width / 2.0) / f,
                    -(ys - view.height / 2.0) / f,
                    np.ones_like(xs, dtype=np.float64)], axis=-1)
    cam /= np.linalg.norm(cam, axis=-1, keepdims=True)
    world = cam @ view.rotation().T
    return world / np.linalg.norm(world, axis=-1, keepdims=True)


def direction_to_view_pixel(view: PerspectiveView, direction) -> np.ndarray:
    """Project a world direction through the view's pinhole; errors behind the camera."""
    d = np.asarray(direction, dtype=np.float64) @ view.rotation()
    if d[2] <= 0.0:
        raise GeometryError(f"direction is behind view {view.view_id!r}")
    f = view.focal
    return np.array([view.width / 2.0 + f * d[0] / d[2], view.height / 2.0 - f * d[1] / d[2]])


def _lonlat(dirs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    lon = np.arctan2(dirs[..., 0], dirs[..., 2])
    lat = np.arcsin(np.clip(dirs[..., 1], -1.0, 1.0))
    return lon, lat


def direction_to_pano_pixel(direction, pano: EquirectImage) -> np.ndarray:
    d = np.asarray(direction, dtype=np.float64)
    n = float(np.linalg.norm(d))
    if n == 0.0:
        raise GeometryError("zero direction vector")
    lon, lat = _lonlat(d / n)
    u = (lon / (2.0 * math.pi) + 0.5) * pano.width
    v = (0.5 - lat / math.pi) * pano.height
    u = math.fmod(float(u), pano.width)
    if u < 0.0:
        u += pano.width
    return np.array([u, min(float(v), math.nextafter(pano.height, 0.0))])


def pano_pixel_to_direction(pano: EquirectImage, px) -> np.ndarray:
    lon = (float(px[0]) / pano.width - 0.5) * 2.0 * math.pi
    lat = (0.5 - float(px[1]) / pano.height) * math.pi
    return np.array([math.cos(lat) * math.sin(lon), math.sin(lat), math.cos(lat) * math.cos(lon)])


# --- boxes ----------------------------------------------------------------

def _box_probe_points(box: BoundingBox) -> list[tuple[float, float]]:
    xm, ym = (box.x_min + box.x_max) / 2.0, (box.y_min + box.y_max) / 2.0
    return [(box.x_min, box.y_min), (xm, box.y_min), (box.x_max, box.y_min), (box.x_max, ym),
            (box.x_max, box.y_max), (xm, box.y_max), (box.x_min, box.y_max), (box.x_min, ym)]


def view_bbox_to_pano(view: PerspectiveView, box: BoundingBox, pano: EquirectImage) -> BoundingBox:
    """Axis-aligned panorama hull of a view-space box.

    The hull is taken over the projected corners and edge midpoints in
    longitude unwrapped around the view's yaw, then wrapped back. A result
    with ``x_min > x_max`` crosses the seam.
    """
    box.check()
    if box.x_min < 0 or box.y_min < 0 or box.x_max > view.width or box.y_max > view.height:
        raise GeometryError(f"box {box.to_list()} outside view {view.view_id!r}")
    pts = _box_probe_points(box)
    dirs = _view_rays(view, np.array([p[0] for p in pts]), np.array([p[1] for p in pts]))
    lon, lat = _lonlat(dirs)
    centre = math.radians(view.yaw)
    rel = np.mod(lon - centre + math.pi, 2.0 * math.pi) - math.pi
    lon = centre + rel
    us = (lon / (2.0 * math.pi) + 0.5) * pano.width
    vs = (0.5 - lat / math.pi) * pano.height
    u0, u1 = float(us.min()), float(us.max())
    v0, v1 = float(max(0.0, vs.min())), float(min(pano.height, vs.max()))
    span = u1 - u0
    if span >= pano.width:
        return BoundingBox(0.0, v0, float(pano.width), v1)
    u0 = u0 % pano.width
    u1 = u0 + span
    if u1 > pano.width:
        u1 -= pano.width
    return BoundingBox(u0, v0, u1, v1)


def pano_bbox_to_view(view: PerspectiveView, box: BoundingBox, pano: EquirectImage) -> BoundingBox:
    """Hull of a panorama box's probe points reprojected into ``view`` (unclipped)."""
    ub = unwrap_box(box, pano.width)
    pts = []
    for x, y in _box_probe_points(ub):
        pts.append(direction_to_view_pixel(view, pano_pixel_to_direction(pano, (x, y))))
    pts = np.array(pts)
    return BoundingBox(float(pts[:, 0].min()), float(pts[:, 1].min()),
                       float(pts[:, 0].max()), float(pts[:, 1].max()))


# --- rasters --------------------------------------------------------------

def _bilinear_equirect(pixels: np.ndarray, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Sample at continuous coords; longitude wraps, latitude clamps."""
    h, w = pixels.shape[:2]
    x = u - 0.5
    y = np.clip(v - 0.5, 0.0, h - 1.0)
    x0 = np.floor(x)
    y0 = np.floor(y)
    fx = (x - x0)[..., None]
    fy = (y - y0)[..., None]
    x0 = x0.astype(np.int64)
    y0 = y0.astype(np.int64)
    x1 = (x0 + 1) % w
    x0 = x0 % w
    y1 = np.minimum(y0 + 1, h - 1)
    src = pixels.astype(np.float64)
    top = src[y0, x0] * (1.0 - fx) + src[y0, x1] * fx
    bot = src[y1, x0] * (1.0 - fx) + src[y1, x1] * fx
    out = top * (1.0 - fy) + bot * fy
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)


def render_view(pano: EquirectImage, view: PerspectiveView) -> np.ndarray:
    ys, xs = np.mgrid[0:view.height, 0:view.width].astype(np.float64)
    dirs = _view_rays(view, xs + 0.5, ys + 0.5)
    lon, lat = _lonlat(dirs)
    u = (lon / (2.0 * math.pi) + 0.5) * pano.width
    v = (0.5 - lat / math.pi) * pano.height
    return _bilinear_equirect(pano.pixels, u, v)


def split_panorama(pano: EquirectImage, views: list[PerspectiveView]) -> list[tuple[str, np.ndarray]]:
    if not views:
        raise GeometryError("no views configured")
    return [(view.view_id, render_view(pano, view)) for view in views]


def crop(image: np.ndarray, box: BoundingBox, pad_fraction: float = 0.10) -> np.ndarray:
    """Crop ``box`` inflated by ``pad_fraction`` of its size per side, clipped to the image."""
    if pad_fraction < 0:
        raise GeometryError(f"pad_fraction must be >= 0, got {pad_fraction}")
    box.check()
    h, w = image.shape[:2]
    px, py = box.width * pad_fraction, box.height * pad_fraction
    x0 = max(0, math.floor(box.x_min - px))
    y0 = max(0, math.floor(box.y_min - py))
    x1 = min(w, math.ceil(box.x_max + px))
    y1 = min(h, math.ceil(box.y_max + py))
    if x1 <= x0 or y1 <= y0:
        raise GeometryError(f"box {box.to_list()} has zero area inside {w}x{h} image")
    return image[y0:y1, x0:x1].copy()
