"""Differentiable image transforms with analytic parameter gradients.

Each transform maps a batch of grayscale images [B, C, s, s] and a strength
parameter lambda in [0, 1] (one scalar per image) to an output batch, and is
differentiable both in the images and in lambda:

  flip    - continuous blend between the image and its mirror
  crop    - soft window mask, sigmoid of the Chebyshev distance to a center
            that moves with (lambda_x, lambda_y)
  blur    - 1-d separable Gaussian, sigma = lambda * 2.0, applied as a
            per-image banded matrix whose rows renormalize truncated taps,
            so constant images stay constant at every strength
  rotate  - bilinear resampling of a rotation by 2*pi*lambda about the image
            center, zero outside the frame; quarter-turn angles use exact
            trig values so axis-aligned rotations are exact index shuffles
  noise   - adds a frozen standard-normal field scaled by lambda * 0.1, so
            the gradient in lambda treats the draw as a constant

Every transform also exposes its analytic d(output)/d(lambda) field through
a *_param_field helper; the backward pass contracts the incoming gradient
against the same field, so the helpers and the vjps cannot drift apart.
`compose` chains all six transforms in a configurable order.  Inputs are
never mutated.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from .tensor import Tensor

__all__ = [
    "BLUR_SIGMA_MAX",
    "NOISE_SIGMA_MAX",
    "BLUR_RADIUS",
    "BLUR_IDENTITY_THRESHOLD",
    "TransformParams",
    "NoiseRealization",
    "CompositionOrder",
    "DEFAULT_ORDER",
    "PARAM_COLUMNS",
    "NEUTRAL_LAMBDAS",
    "flip",
    "crop",
    "gaussian_blur",
    "rotate",
    "add_noise",
    "compose",
    "flip_param_field",
    "crop_param_fields",
    "blur_param_field",
    "rotate_param_field",
    "noise_param_field",
]

BLUR_SIGMA_MAX = 2.0
NOISE_SIGMA_MAX = 0.1
BLUR_RADIUS = 6
BLUR_IDENTITY_THRESHOLD = 1e-3

# Column order of a [B, 7] parameter matrix.
PARAM_COLUMNS = (
    "lambda_blur",
    "lambda_noise",
    "lambda_crop_x",
    "lambda_crop_y",
    "lambda_flip0",
    "lambda_flip1",
    "lambda_rot",
)

# Parameter values that leave the image unchanged where an identity exists.
# The crop window has no identity; 0.5 centers it.
NEUTRAL_LAMBDAS = {
    "lambda_blur": 0.0,
    "lambda_noise": 0.0,
    "lambda_crop_x": 0.5,
    "lambda_crop_y": 0.5,
    "lambda_flip0": 0.0,
    "lambda_flip1": 0.0,
    "lambda_rot": 0.0,
}


def _as_lambda(lam, batch: int, dtype) -> Tensor:
    """Normalize a strength parameter to a [B] tensor of the image dtype."""
    if isinstance(lam, Tensor):
        if lam.data.ndim != 1 or lam.data.shape[0] != batch:
            raise ValueError(f"lambda must have shape ({batch},), got {lam.data.shape}")
        if lam.data.dtype != dtype:
            raise TypeError(f"lambda dtype {lam.data.dtype} does not match image dtype {dtype}")
        vals = lam.data
    else:
        vals = np.full(batch, float(lam), dtype=dtype)
        lam = Tensor(vals)
    if vals.min() < 0.0 or vals.max() > 1.0:
        raise ValueError(f"lambda out of [0, 1]: range [{vals.min()}, {vals.max()}]")
    return lam


def _check_images(x) -> tuple:
    shape = x.shape if isinstance(x, np.ndarray) else x.data.shape
    if len(shape) != 4:
        raise ValueError(f"expected image batch [B, C, s, s], got shape {shape}")
    B, C, H, W = shape
    if H != W:
        raise ValueError(f"expected square images, got {H}x{W}")
    return B, C, H, W


def _stable_sigmoid(m: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(m))
    return np.where(m >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


@dataclass(frozen=True)
class TransformParams:
    """Per-image strengths for all six transforms, each a [B] tensor in [0, 1]."""

    lambda_blur: Tensor
    lambda_noise: Tensor
    lambda_crop_x: Tensor
    lambda_crop_y: Tensor
    lambda_flip0: Tensor
    lambda_flip1: Tensor
    lambda_rot: Tensor

    def __post_init__(self):
        batch = None
        for f in fields(self):
            v = getattr(self, f.name)
            if not isinstance(v, Tensor):
                raise TypeError(f"{f.name} must be a Tensor, got {type(v).__name__}")
            if v.data.ndim != 1:
                raise ValueError(f"{f.name} must be 1-d, got shape {v.data.shape}")
            if batch is None:
                batch = v.data.shape[0]
            elif v.data.shape[0] != batch:
                raise ValueError(f"{f.name} has batch {v.data.shape[0]}, expected {batch}")
            if v.data.min() < 0.0 or v.data.max() > 1.0:
                raise ValueError(
                    f"{f.name} out of [0, 1]: range [{v.data.min()}, {v.data.max()}]")

    @property
    def batch_size(self) -> int:
        return self.lambda_blur.data.shape[0]

    @classmethod
    def from_matrix(cls, m: Tensor) -> "TransformParams":
        """Split a [B, 7] matrix into named parameters, preserving the graph."""
        if m.data.ndim != 2 or m.data.shape[1] != len(PARAM_COLUMNS):
            raise ValueError(f"expected [B, {len(PARAM_COLUMNS)}] matrix, got {m.data.shape}")
        cols = {name: m.column(i) for i, name in enumerate(PARAM_COLUMNS)}
        return cls(**cols)

    @classmethod
    def from_scalars(cls, batch: int, dtype=np.float64, **overrides) -> "TransformParams":
        """Constant parameters: neutral values overridden by keyword."""
        vals = dict(NEUTRAL_LAMBDAS)
        for k, v in overrides.items():
            if k not in vals:
                raise ValueError(f"unknown parameter {k!r}")
            vals[k] = v
        return cls(**{k: Tensor(np.full(batch, v, dtype=dtype)) for k, v in vals.items()})

    @classmethod
    def neutral(cls, batch: int, dtype=np.float64) -> "TransformParams":
        return cls.from_scalars(batch, dtype=dtype)


class NoiseRealization:
    """A frozen noise field, drawn once and treated as a constant thereafter."""

    def __init__(self, values: np.ndarray):
        arr = np.asarray(values)
        if arr.ndim != 4:
            raise ValueError(f"noise must be [B, C, s, s], got shape {arr.shape}")
        self.values = arr

    @classmethod
    def draw(cls, rng, shape, dtype=np.float64) -> "NoiseRealization":
        return cls(rng.standard_normal(shape, dtype=dtype).data)


@dataclass(frozen=True)
class CompositionOrder:
    """Application order of the six transforms, a permutation of their names."""

    names: tuple

    _VALID = ("blur", "noise", "crop", "flip0", "flip1", "rotate")

    def __post_init__(self):
        if tuple(sorted(self.names)) != tuple(sorted(self._VALID)):
            raise ValueError(
                f"order must be a permutation of {self._VALID}, got {self.names}")

    @classmethod
    def parse(cls, text: str) -> "CompositionOrder":
        return cls(tuple(t.strip() for t in text.split(",")))


DEFAULT_ORDER = CompositionOrder(("blur", "noise", "crop", "flip0", "flip1", "rotate"))


# -- flip ---------------------------------------------------------------------


def _flip_parts(xd: np.ndarray, lamd: np.ndarray, axis: int):
    np_axis = 2 + axis
    xf = np.flip(xd, axis=np_axis)
    lb = lamd[:, None, None, None]
    out = (1.0 - lb) * xd + lb * xf
    return out, xf - xd, lb, np_axis


def flip(x: Tensor, lam, axis: int) -> Tensor:
    """Continuous mirror: (1 - lambda) * X + lambda * mirror(X) along a
    spatial axis (0 = rows, 1 = columns)."""
    B, C, H, W = _check_images(x)
    if axis not in (0, 1):
        raise ValueError(f"axis must be 0 or 1, got {axis}")
    lam = _as_lambda(lam, B, x.data.dtype)
    out, dfield, lb, np_axis = _flip_parts(x.data, lam.data, axis)

    def vjp_x(g):
        return (1.0 - lb) * g + lb * np.flip(g, axis=np_axis)

    return Tensor._node(out, [
        (x, vjp_x),
        (lam, lambda g: (g * dfield).sum(axis=(1, 2, 3))),
    ])


def flip_param_field(x: np.ndarray, lam: np.ndarray, axis: int) -> np.ndarray:
    """Analytic d(flip)/d(lambda), shape [B, C, s, s]."""
    return _flip_parts(x, lam, axis)[1]


# -- crop ---------------------------------------------------------------------


def _crop_parts(xd: np.ndarray, lx: np.ndarray, ly: np.ndarray):
    B, C, s, _ = xd.shape
    dt = xd.dtype
    rows = np.arange(s, dtype=dt)[None, :, None]
    cols = np.arange(s, dtype=dt)[None, None, :]
    c0 = (lx * s)[:, None, None]
    c1 = (ly * s)[:, None, None]
    d0 = rows - c0
    d1 = cols - c1
    a0, a1 = np.abs(d0), np.abs(d1)
    m = (s / 8.0 - np.maximum(a0, a1)).astype(dt, copy=False)
    mask = _stable_sigmoid(m).astype(dt, copy=False)
    out = xd * mask[:, None]

    sprime = mask * (1.0 - mask)
    row_active = a0 >= a1  # ties attributed to the row coordinate
    fx = xd * (sprime * np.sign(d0) * s * row_active)[:, None]
    fy = xd * (sprime * np.sign(d1) * s * (~row_active))[:, None]
    return out, fx, fy, mask


def crop(x: Tensor, lam_x, lam_y) -> Tensor:
    """Soft window of half-width s/8 centered at (lambda_x * s, lambda_y * s)
    in pixel coordinates; lambda_x moves the window along the row axis.

    The mask is sigmoid(s/8 - chebyshev(pixel, center)).  At positions where
    the row and column deviations tie, the gradient of the distance is
    attributed to the row parameter.
    """
    B, C, H, W = _check_images(x)
    lam_x = _as_lambda(lam_x, B, x.data.dtype)
    lam_y = _as_lambda(lam_y, B, x.data.dtype)
    out, fx, fy, mask = _crop_parts(x.data, lam_x.data, lam_y.data)
    mb = mask[:, None]

    return Tensor._node(out, [
        (x, lambda g: g * mb),
        (lam_x, lambda g: (g * fx).sum(axis=(1, 2, 3))),
        (lam_y, lambda g: (g * fy).sum(axis=(1, 2, 3))),
    ])


def crop_param_fields(x: np.ndarray, lam_x: np.ndarray, lam_y: np.ndarray):
    """Analytic (d(crop)/d(lambda_x), d(crop)/d(lambda_y))."""
    _, fx, fy, _ = _crop_parts(x, lam_x, lam_y)
    return fx, fy


# -- blur ---------------------------------------------------------------------


def _blur_matrices(sigma: np.ndarray, s: int, dt):
    """Per-image banded blur matrix W [B, s, s], its derivative in sigma, and
    the mask of images treated as exact identities (sigma below threshold).

    Row i holds Gaussian taps at offsets |k| <= radius, truncated to the
    frame and renormalized to sum to one, so blurring preserves constants.
    The quotient rule gives
      dW[i, i+k]/dsigma = W[i, i+k] * (k^2 - sum_j w_j j^2) / sigma^3.
    """
    B = sigma.shape[0]
    small = sigma < BLUR_IDENTITY_THRESHOLD
    sig = np.where(small, 1.0, sigma).astype(dt, copy=False)
    k = np.arange(-BLUR_RADIUS, BLUR_RADIUS + 1, dtype=dt)
    u = np.exp(-(k ** 2) / (2.0 * sig[:, None] ** 2))  # [B, taps]
    i_idx = np.arange(s)[:, None]
    k_off = np.arange(-BLUR_RADIUS, BLUR_RADIUS + 1)[None, :]
    j_idx = i_idx + k_off
    valid = (j_idx >= 0) & (j_idx < s)  # [s, taps]
    vf = valid.astype(dt)
    denom = u @ vf.T  # [B, s]
    s2 = (u * k ** 2) @ vf.T

    W = np.zeros((B, s, s), dtype=dt)
    dW = np.zeros((B, s, s), dtype=dt)
    ii, kk = np.nonzero(valid)
    jj = j_idx[ii, kk]
    w_entries = u[:, kk] / denom[:, ii]
    W[:, ii, jj] = w_entries
    dW[:, ii, jj] = w_entries * (k[kk] ** 2 - s2[:, ii] / denom[:, ii]) / sig[:, None] ** 3

    eye = np.eye(s, dtype=dt)
    W[small] = eye
    dW[small] = 0.0
    return W, dW, small


def _blur_parts(xd: np.ndarray, lamd: np.ndarray):
    B, C, s, _ = xd.shape
    dt = xd.dtype
    sigma = lamd * BLUR_SIGMA_MAX
    W, dW, small = _blur_matrices(sigma, s, dt)
    WT = np.swapaxes(W, 1, 2)
    out = np.matmul(np.matmul(W[:, None], xd), WT[:, None])
    d_rows = np.matmul(np.matmul(dW[:, None], xd), WT[:, None])
    d_cols = np.matmul(np.matmul(W[:, None], xd), np.swapaxes(dW, 1, 2)[:, None])
    dfield = (d_rows + d_cols) * BLUR_SIGMA_MAX
    if small.any():
        out[small] = xd[small]
        dfield[small] = 0.0
    return out, dfield, W, WT, small


def gaussian_blur(x: Tensor, lam) -> Tensor:
    """Separable Gaussian blur of width sigma = lambda * 2.0, radius 6 taps,
    boundary taps renormalized.  Sigma below 1e-3 is an exact identity with
    zero gradient in lambda."""
    B, C, H, W_ = _check_images(x)
    lam = _as_lambda(lam, B, x.data.dtype)
    out, dfield, W, WT, small = _blur_parts(x.data, lam.data)

    def vjp_x(g):
        gx = np.matmul(np.matmul(WT[:, None], g), W[:, None])
        if small.any():
            gx[small] = g[small]
        return gx

    return Tensor._node(out, [
        (x, vjp_x),
        (lam, lambda g: (g * dfield).sum(axis=(1, 2, 3))),
    ])


def blur_param_field(x: np.ndarray, lam: np.ndarray) -> np.ndarray:
    """Analytic d(blur)/d(lambda), shape [B, C, s, s]."""
    return _blur_parts(x, lam)[1]


# -- rotate -------------------------------------------------------------------

_QUARTER_COS = np.array([1.0, 0.0, -1.0, 0.0])
_QUARTER_SIN = np.array([0.0, 1.0, 0.0, -1.0])


def _rotate_parts(xd: np.ndarray, lamd: np.ndarray):
    B, C, s, _ = xd.shape
    dt = xd.dtype
    theta = (2.0 * np.pi * lamd).astype(dt, copy=False)
    cos = np.cos(theta)
    sin = np.sin(theta)
    quarter = lamd * 4.0
    exact = quarter == np.round(quarter)
    if exact.any():
        kq = (np.round(quarter).astype(int) % 4)[exact]
        cos[exact] = _QUARTER_COS[kq].astype(dt)
        sin[exact] = _QUARTER_SIN[kq].astype(dt)

    c = (s - 1) / 2.0
    xi = (np.arange(s, dtype=dt) - c)[None, :, None]
    xj = (np.arange(s, dtype=dt) - c)[None, None, :]
    cb, sb = cos[:, None, None], sin[:, None, None]
    u0 = cb * xi - sb * xj + c
    u1 = sb * xi + cb * xj + c

    i0 = np.floor(u0).astype(np.int64)
    j0 = np.floor(u1).astype(np.int64)
    a = (u0 - i0).astype(dt, copy=False)
    b = (u1 - j0).astype(dt, copy=False)

    bidx = np.arange(B)[:, None, None, None]
    cidx = np.arange(C)[None, :, None, None]
    corners = []
    for p in (0, 1):
        for q in (0, 1):
            ii = i0 + p
            jj = j0 + q
            ok = (ii >= 0) & (ii < s) & (jj >= 0) & (jj < s)
            vals = xd[bidx, cidx, ii.clip(0, s - 1)[:, None], jj.clip(0, s - 1)[:, None]]
            vals = vals * ok[:, None]
            corners.append((ii, jj, ok, vals))

    (_, _, _, v00), (_, _, _, v01), (_, _, _, v10), (_, _, _, v11) = corners
    ab, bb = a[:, None], b[:, None]
    out = ((1 - ab) * (1 - bb) * v00 + (1 - ab) * bb * v01
           + ab * (1 - bb) * v10 + ab * bb * v11)

    # Spatial derivative of the bilinear interpolant, then the chain rule
    # through the rotated coordinates; exact within each sampling cell.
    dv_du0 = (1 - bb) * (v10 - v00) + bb * (v11 - v01)
    dv_du1 = (1 - ab) * (v01 - v00) + ab * (v11 - v10)
    du0_dth = (-sb * xi - cb * xj)[:, None]
    du1_dth = (cb * xi - sb * xj)[:, None]
    dfield = ((dv_du0 * du0_dth + dv_du1 * du1_dth) * (2.0 * np.pi)).astype(dt, copy=False)

    weights = ((1 - ab) * (1 - bb), (1 - ab) * bb, ab * (1 - bb), ab * bb)
    return out, dfield, corners, weights, (bidx, cidx)


def rotate(x: Tensor, lam) -> Tensor:
    """Rotation by 2*pi*lambda about the image center with bilinear sampling;
    source positions outside the frame contribute zero.

    When 4*lambda is an exact integer the cosine and sine come from a table
    instead of trig calls, which makes quarter turns exact index
    permutations (and lambda = 0 a bitwise identity)."""
    B, C, H, W = _check_images(x)
    s = H
    lam = _as_lambda(lam, B, x.data.dtype)
    dt = x.data.dtype
    out, dfield, corners, weights, (bidx, cidx) = _rotate_parts(x.data, lam.data)

    def vjp_x(g):
        grad = np.zeros(B * C * s * s, dtype=dt)
        for (ii, jj, ok, _), w in zip(corners, weights):
            lin = ((bidx * C + cidx) * s + ii[:, None]) * s + jj[:, None]
            contrib = g * w
            m = np.broadcast_to(ok[:, None], contrib.shape)
            grad += np.bincount(
                np.broadcast_to(lin, contrib.shape)[m].ravel(),
                weights=contrib[m].ravel(), minlength=B * C * s * s,
            ).astype(dt, copy=False)
        return grad.reshape(B, C, s, s)

    return Tensor._node(out, [
        (x, vjp_x),
        (lam, lambda g: (g * dfield).sum(axis=(1, 2, 3)).astype(dt, copy=False)),
    ])


def rotate_param_field(x: np.ndarray, lam: np.ndarray) -> np.ndarray:
    """Analytic d(rotate)/d(lambda), shape [B, C, s, s]."""
    return _rotate_parts(x, lam)[1]


# -- noise --------------------------------------------------------------------


def add_noise(x: Tensor, lam, noise: NoiseRealization) -> Tensor:
    """X + lambda * 0.1 * eps with a frozen noise field eps."""
    B, C, H, W = _check_images(x)
    lam = _as_lambda(lam, B, x.data.dtype)
    eps = noise.values
    if eps.shape != x.data.shape:
        raise ValueError(f"noise shape {eps.shape} does not match images {x.data.shape}")
    if eps.dtype != x.data.dtype:
        raise TypeError(f"noise dtype {eps.dtype} does not match images {x.data.dtype}")
    lb = lam.data[:, None, None, None]
    out = x.data + lb * (NOISE_SIGMA_MAX * eps)

    return Tensor._node(out, [
        (x, lambda g: g),
        (lam, lambda g: (g * eps).sum(axis=(1, 2, 3)) * NOISE_SIGMA_MAX),
    ])


def noise_param_field(x: np.ndarray, lam: np.ndarray, noise: NoiseRealization) -> np.ndarray:
    """Analytic d(add_noise)/d(lambda) = 0.1 * eps."""
    return NOISE_SIGMA_MAX * noise.values


# -- composition --------------------------------------------------------------


def compose(x: Tensor, params: TransformParams, noise: NoiseRealization,
            order: CompositionOrder = DEFAULT_ORDER) -> Tensor:
    """Apply all six transforms in the given order."""
    if params.batch_size != x.data.shape[0]:
        raise ValueError(
            f"params batch {params.batch_size} does not match images {x.data.shape[0]}")
    out = x
    for name in order.names:
        if name == "blur":
            out = gaussian_blur(out, params.lambda_blur)
        elif name == "noise":
            out = add_noise(out, params.lambda_noise, noise)
        elif name == "crop":
            out = crop(out, params.lambda_crop_x, params.lambda_crop_y)
        elif name == "flip0":
            out = flip(out, params.lambda_flip0, axis=0)
        elif name == "flip1":
            out = flip(out, params.lambda_flip1, axis=1)
        elif name == "rotate":
            out = rotate(out, params.lambda_rot)
    return out
