"""Cyclic rotation groups and their actions on vectors, images, and feature fields.

Group elements are integer indices i in {0..n-1}, index i meaning a planar
rotation by 2*pi*i/n.  Keeping elements as integers makes composition exact;
angles are derived, never stored.

Conventions (fixed once, used everywhere):
  * rotations are counter-clockwise positive in world coordinates (x right,
    y up);
  * images are indexed [channel, row, col] with rows increasing downward, so
    a pixel at (row, col) sits at world offset (col - c, c - row) from the
    rotation center c = (H-1)/2;
  * quarter-turn rotations of square images are exact pixel permutations,
    any other angle uses bilinear interpolation with zero fill.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

TRIVIAL = "trivial"
STANDARD = "standard"
REGULAR = "regular"
_KINDS = (TRIVIAL, STANDARD, REGULAR)

# rotation matrices for multiples of 90 degrees, exact in floating point
_QUARTER_MATS = (
    np.array([[1.0, 0.0], [0.0, 1.0]]),
    np.array([[0.0, -1.0], [1.0, 0.0]]),
    np.array([[-1.0, 0.0], [0.0, -1.0]]),
    np.array([[0.0, 1.0], [-1.0, 0.0]]),
)


class GroupError(ValueError):
    """Raised for out-of-range group elements or malformed representations."""


@dataclass(frozen=True)
class CyclicGroup:
    """The cyclic group C_n of n planar rotations by multiples of 2*pi/n."""

    order: int = 8

    def __post_init__(self):
        if self.order < 1:
            raise GroupError(f"group order must be positive, got {self.order}")

    def check(self, g: int) -> int:
        if not (isinstance(g, (int, np.integer)) and 0 <= g < self.order):
            raise GroupError(f"element index {g!r} not in [0, {self.order})")
        return int(g)

    def elements(self) -> range:
        return range(self.order)

    def compose(self, g: int, h: int) -> int:
        return (self.check(g) + self.check(h)) % self.order

    def inverse(self, g: int) -> int:
        return (self.order - self.check(g)) % self.order

    @property
    def identity(self) -> int:
        return 0

    def angle(self, g: int) -> float:
        return 2.0 * math.pi * self.check(g) / self.order

    def quarter_turns(self, g: int):
        """Number of exact 90-degree turns for g, or None if g is not one."""
        g = self.check(g)
        if (4 * g) % self.order == 0:
            return (4 * g) // self.order % 4
        return None


def compose(g: int, h: int, n: int) -> int:
    """Compose two elements of C_n: (g + h) mod n."""
    return CyclicGroup(n).compose(g, h)


def rotation_matrix_2d(g: int, n: int) -> np.ndarray:
    """2x2 counter-clockwise rotation by 2*pi*g/n; exact for quarter turns."""
    group = CyclicGroup(n)
    q = group.quarter_turns(g)
    if q is not None:
        return _QUARTER_MATS[q].copy()
    a = group.angle(g)
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, -s], [s, c]])


def regular_permutation(g: int, n: int) -> np.ndarray:
    """Index map p with (rho_reg(g) x)[i] = x[p[i]]: a cyclic shift by g."""
    g = CyclicGroup(n).check(g)
    return (np.arange(n) - g) % n


@dataclass(frozen=True)
class Representation:
    """An ordered list of (kind, multiplicity) blocks for a C_n group.

    kind is one of "trivial" (dim 1), "standard" (dim 2), "regular" (dim n).
    The full matrix is block-diagonal over the expanded block list.
    """

    order: int
    blocks: tuple[tuple[str, int], ...]

    def __post_init__(self):
        CyclicGroup(self.order)
        for kind, mult in self.blocks:
            if kind not in _KINDS:
                raise GroupError(f"unknown representation kind {kind!r}")
            if mult < 1:
                raise GroupError(f"multiplicity must be positive, got {mult}")

    @classmethod
    def trivial(cls, n: int, mult: int = 1) -> "Representation":
        return cls(n, ((TRIVIAL, mult),))

    @classmethod
    def standard(cls, n: int, mult: int = 1) -> "Representation":
        return cls(n, ((STANDARD, mult),))

    @classmethod
    def regular(cls, n: int, mult: int = 1) -> "Representation":
        return cls(n, ((REGULAR, mult),))

    def block_dim(self, kind: str) -> int:
        return {TRIVIAL: 1, STANDARD: 2, REGULAR: self.order}[kind]

    @property
    def dim(self) -> int:
        return sum(self.block_dim(kind) * mult for kind, mult in self.blocks)

    def expanded(self):
        """Yield (kind, offset, dim) for every individual field in order."""
        off = 0
        for kind, mult in self.blocks:
            d = self.block_dim(kind)
            for _ in range(mult):
                yield kind, off, d
                off += d

    def matrix(self, g: int) -> np.ndarray:
        """Block-diagonal matrix of g; orthogonal for every element."""
        group = CyclicGroup(self.order)
        g = group.check(g)
        out = np.zeros((self.dim, self.dim))
        for kind, off, d in self.expanded():
            if kind == TRIVIAL:
                out[off, off] = 1.0
            elif kind == STANDARD:
                out[off:off + d, off:off + d] = rotation_matrix_2d(g, self.order)
            else:
                perm = regular_permutation(g, self.order)
                out[np.arange(d) + off, perm + off] = 1.0
        return out


def rep_matrix(kind: str, g: int, n: int) -> np.ndarray:
    """Matrix of a single representation block (trivial, standard, regular)."""
    return Representation(n, ((kind, 1),)).matrix(g)


@dataclass(frozen=True)
class FeatureField:
    """A representation-typed feature map: (C, H, W) spatial or (C,) pointwise."""

    data: np.ndarray
    rep: Representation

    def __post_init__(self):
        if self.data.ndim not in (1, 3):
            raise GroupError(f"field data must be (C,) or (C, H, W), got {self.data.shape}")
        if self.data.shape[0] != self.rep.dim:
            raise GroupError(
                f"channel count {self.data.shape[0]} does not match rep dim {self.rep.dim}"
            )

    @property
    def spatial(self) -> bool:
        return self.data.ndim == 3

    @property
    def resolution(self):
        return self.data.shape[1:] if self.spatial else None


def rotate_image_quarter(image: np.ndarray, quarter_turns: int) -> np.ndarray:
    """Exact counter-clockwise rotation of (..., H, W) by 90-degree multiples.

    Requires H == W so the rotation center (H-1)/2 is preserved.
    """
    h, w = image.shape[-2], image.shape[-1]
    if h != w:
        raise GroupError(f"quarter-turn rotation needs a square image, got {h}x{w}")
    return np.rot90(image, k=quarter_turns % 4, axes=(-2, -1)).copy()


def rotation_source_coords(shape, angle: float):
    """Source (row, col) sample positions for rotating an HxW image by angle."""
    h, w = shape
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    rows, cols = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    dx = cols - cx
    dy = cy - rows  # image rows grow downward, world y grows upward
    c, s = math.cos(angle), math.sin(angle)
    # inverse rotation of the output pixel's world offset
    sx = dx * c + dy * s
    sy = -dx * s + dy * c
    return cy - sy, cx + sx


def _bilinear_sample(image: np.ndarray, src_rows: np.ndarray, src_cols: np.ndarray) -> np.ndarray:
    """Sample (..., H, W) arrays at fractional positions with zero fill."""
    h, w = image.shape[-2], image.shape[-1]
    r0 = np.floor(src_rows).astype(np.int64)
    c0 = np.floor(src_cols).astype(np.int64)
    fr = src_rows - r0
    fc = src_cols - c0
    out = np.zeros(image.shape[:-2] + src_rows.shape, dtype=image.dtype)
    for dr, dc, wgt in (
        (0, 0, (1 - fr) * (1 - fc)),
        (0, 1, (1 - fr) * fc),
        (1, 0, fr * (1 - fc)),
        (1, 1, fr * fc),
    ):
        rr = r0 + dr
        cc = c0 + dc
        valid = (rr >= 0) & (rr < h) & (cc >= 0) & (cc < w)
        rs = np.clip(rr, 0, h - 1)
        cs = np.clip(cc, 0, w - 1)
        out += np.where(valid, image[..., rs, cs], 0.0) * wgt
    return out


def rotate_image(image: np.ndarray, angle: float) -> np.ndarray:
    """Rotate (..., H, W) counter-clockwise about the image center.

    Exact pixel permutation when the angle is a multiple of pi/2 on a square
    image; bilinear interpolation with zero fill otherwise.
    """
    q = angle / (math.pi / 2.0)
    if q == round(q) and image.shape[-2] == image.shape[-1]:
        return rotate_image_quarter(image, int(round(q)))
    src_rows, src_cols = rotation_source_coords(image.shape[-2:], angle)
    return _bilinear_sample(image, src_rows, src_cols)


def act_on_image(group: CyclicGroup, g: int, f: FeatureField) -> FeatureField:
    """Action of g on a trivial-representation spatial field (Rot of pixels)."""
    if not f.spatial:
        raise GroupError("act_on_image needs a spatial field")
    if any(kind != TRIVIAL for kind, _ in f.rep.blocks):
        raise GroupError("act_on_image is defined for trivial-representation channels")
    q = group.quarter_turns(g)
    if q is not None:
        return replace(f, data=rotate_image_quarter(f.data, q))
    return replace(f, data=rotate_image(f.data, group.angle(g)))


def act_on_field(group: CyclicGroup, g: int, f: FeatureField) -> FeatureField:
    """General action: rotate pixel locations, then mix channels per block."""
    if f.rep.order != group.order:
        raise GroupError("field representation and group have different orders")
    mat = f.rep.matrix(g)
    if f.spatial:
        q = group.quarter_turns(g)
        if q is not None:
            rotated = rotate_image_quarter(f.data, q)
        else:
            rotated = rotate_image(f.data, group.angle(g))
        return replace(f, data=np.einsum("oc,chw->ohw", mat, rotated))
    return replace(f, data=mat @ f.data)


@dataclass(frozen=True)
class FactoredAction:
    """Factored manipulation action (a_lambda, a_xy, a_z, a_theta).

    Only the planar displacement xy transforms under rotation; gripper
    command, height change, and orientation change are invariant.
    """

    grip: float
    xy: np.ndarray
    z: float
    theta: float

    def __post_init__(self):
        object.__setattr__(self, "xy", np.asarray(self.xy, dtype=np.float64))
        if self.xy.shape != (2,):
            raise GroupError(f"xy must have shape (2,), got {self.xy.shape}")

    def as_vector(self) -> np.ndarray:
        return np.array([self.grip, self.xy[0], self.xy[1], self.z, self.theta])

    @classmethod
    def from_vector(cls, v) -> "FactoredAction":
        v = np.asarray(v, dtype=np.float64)
        if v.shape != (5,):
            raise GroupError(f"action vector must have shape (5,), got {v.shape}")
        return cls(grip=float(v[0]), xy=v[1:3].copy(), z=float(v[3]), theta=float(v[4]))


def rotate_action_xy(xy: np.ndarray, angle: float) -> np.ndarray:
    """Rotate a planar displacement; exact sign/swap for quarter turns."""
    q = angle / (math.pi / 2.0)
    if q == round(q):
        m = _QUARTER_MATS[int(round(q)) % 4]
    else:
        c, s = math.cos(angle), math.sin(angle)
        m = np.array([[c, -s], [s, c]])
    return m @ np.asarray(xy, dtype=np.float64)


def act_on_action(group: CyclicGroup, g: int, a: FactoredAction) -> FactoredAction:
    """Action of g on a factored action: rotates xy, leaves the rest alone."""
    xy = rotation_matrix_2d(g, group.order) @ a.xy
    return FactoredAction(grip=a.grip, xy=xy, z=a.z, theta=a.theta)


def act_on_action_with_sigma(group: CyclicGroup, g: int, a: FactoredAction, sigma: np.ndarray):
    """Action of g on (action mean, per-dimension sigma): sigma is untouched."""
    return act_on_action(group, g, a), sigma
