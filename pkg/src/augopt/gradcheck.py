"""Finite-difference verification of every analytic transform gradient.

Each check draws random images and strengths, computes the analytic
d(output)/d(lambda) field, and compares it against a central finite
difference of the forward pass.  Errors are reported as
max|analytic - fd| / max(max|fd|, 1e-12) over the compared pixels.

The transforms are piecewise smooth, so pixels whose finite-difference
stencil straddles a nondifferentiable locus are excluded, and strengths are
resampled away from parameter values where the loci cover the whole image:

  crop    - the Chebyshev distance has a kink where the row and column
            deviations tie; pixels with |row dev - col dev| below a band of
            0.05 px are excluded (the stencil moves the center by h * s).
  rotate  - bilinear sampling has kinks where a source coordinate crosses an
            integer.  Strengths are redrawn until 4 * lambda is at least
            1e-3 from an integer (quarter turns align kinks with the whole
            grid), and pixels whose source coordinates lie within
            3 * 2 * pi * h * (radius + 1) of an integer are excluded; the
            bound is the largest coordinate motion the stencil can cause.
  compose - the same loci apply inside the chain, so a taint mask is pushed
            through the transforms in application order: crop adds its tie
            band, rotate adds its kink band and spreads taint through the
            four sampling corners, flips mirror the mask, blur dilates it by
            the kernel radius.  Tainted pixels are dropped from the random
            projection that both gradient routes are evaluated on.

Excluded fractions stay small (coverage is reported); everything else is
compared.  The end-to-end check differentiates the transform-network
objective with respect to every transform-network weight on a reduced
configuration and compares each coordinate against central differences.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .models import (
    Encoder,
    LinearClassifier,
    ProjectionHead,
    TransformNet,
    init_weights,
)
from .objectives import ObjectiveConfig, m_objective
from .tensor import Rng, Tensor, no_grad
from .transforms import (
    BLUR_RADIUS,
    CompositionOrder,
    DEFAULT_ORDER,
    NoiseRealization,
    TransformParams,
    add_noise,
    blur_param_field,
    compose,
    crop,
    crop_param_fields,
    flip,
    flip_param_field,
    gaussian_blur,
    noise_param_field,
    rotate,
    rotate_param_field,
)

__all__ = [
    "GradCheckReport",
    "TRANSFORM_NAMES",
    "check_transform",
    "check_compose",
    "check_end_to_end",
    "run_all",
    "format_report",
]

TRANSFORM_NAMES = ("flip0", "flip1", "crop", "blur", "rotate", "noise")

_CROP_TIE_BAND = 0.05  # pixels
_ROTATE_KINK_SAFETY = 3.0
_QUARTER_MARGIN = 1e-3


@dataclass(frozen=True)
class GradCheckReport:
    name: str
    max_rel_err: float
    tol: float
    h: float
    draws: int
    min_coverage: float
    seconds: float

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tol


def format_report(r: GradCheckReport) -> str:
    status = "PASS" if r.passed else "FAIL"
    return (f"{r.name:>10s}: max rel err {r.max_rel_err:.3e} "
            f"(tol {r.tol:.0e}, h {r.h:.0e}, draws {r.draws}, "
            f"coverage {100.0 * r.min_coverage:.1f}%, {r.seconds:.2f}s) {status}")


# -- exclusion masks ----------------------------------------------------------


def _crop_tie_mask(s: int, lx: np.ndarray, ly: np.ndarray) -> np.ndarray:
    rows = np.arange(s, dtype=np.float64)[None, :, None]
    cols = np.arange(s, dtype=np.float64)[None, None, :]
    a0 = np.abs(rows - (lx * s)[:, None, None])
    a1 = np.abs(cols - (ly * s)[:, None, None])
    return np.abs(a0 - a1) < _CROP_TIE_BAND


def _rotate_coords(s: int, lam: np.ndarray):
    theta = 2.0 * np.pi * lam
    c = (s - 1) / 2.0
    xi = (np.arange(s, dtype=np.float64) - c)[None, :, None]
    xj = (np.arange(s, dtype=np.float64) - c)[None, None, :]
    cb = np.cos(theta)[:, None, None]
    sb = np.sin(theta)[:, None, None]
    u0 = cb * xi - sb * xj + c
    u1 = sb * xi + cb * xj + c
    radius = np.sqrt(xi ** 2 + xj ** 2)
    return u0, u1, radius


def _rotate_kink_mask(s: int, lam: np.ndarray, h: float) -> np.ndarray:
    u0, u1, radius = _rotate_coords(s, lam)
    kappa = _ROTATE_KINK_SAFETY * 2.0 * np.pi * h * (radius + 1.0)
    d0 = np.abs(u0 - np.round(u0))
    d1 = np.abs(u1 - np.round(u1))
    return (d0 < kappa) | (d1 < kappa)


def _draw_rot_lambda(rng: Rng, n: int, lo: float, hi: float) -> np.ndarray:
    """Uniform strengths redrawn until no 4 * lambda is near an integer."""
    lam = rng.uniform(lo, hi, (n,)).data
    for _ in range(100):
        q = lam * 4.0
        bad = np.abs(q - np.round(q)) < _QUARTER_MARGIN
        if not bad.any():
            return lam
        lam[bad] = rng.uniform(lo, hi, (int(bad.sum()),)).data
    raise RuntimeError("could not draw rotation strengths away from quarter turns")


def _compose_taint(s: int, lam: dict, order: CompositionOrder, h: float) -> np.ndarray:
    """Pixels of the composed output whose finite difference is unreliable.

    Walks the chain in application order, spreading existing taint the same
    way each transform spreads pixel values, then adding the transform's own
    nondifferentiable loci.
    """
    B = lam["rotate"].shape[0]
    taint = np.zeros((B, s, s), dtype=bool)
    for name in order.names:
        if name == "blur":
            for axis in (1, 2):
                spread = taint.copy()
                for k in range(1, BLUR_RADIUS + 1):
                    spread |= np.roll(taint, k, axis=axis) | np.roll(taint, -k, axis=axis)
                taint = spread
        elif name == "noise":
            pass
        elif name == "crop":
            taint = taint | _crop_tie_mask(s, lam["crop_x"], lam["crop_y"])
        elif name == "flip0":
            taint = taint | np.flip(taint, axis=1)
        elif name == "flip1":
            taint = taint | np.flip(taint, axis=2)
        elif name == "rotate":
            u0, u1, _ = _rotate_coords(s, lam["rotate"])
            i0 = np.floor(u0).astype(np.int64)
            j0 = np.floor(u1).astype(np.int64)
            bidx = np.arange(B)[:, None, None]
            gathered = np.zeros_like(taint)
            for p in (0, 1):
                for q in (0, 1):
                    ii, jj = i0 + p, j0 + q
                    ok = (ii >= 0) & (ii < s) & (jj >= 0) & (jj < s)
                    vals = taint[bidx, ii.clip(0, s - 1), jj.clip(0, s - 1)] & ok
                    gathered |= vals
            taint = gathered | _rotate_kink_mask(s, lam["rotate"], h)
    return taint


# -- per-transform field checks -----------------------------------------------


def _field_error(analytic: np.ndarray, fd: np.ndarray, keep: np.ndarray) -> float:
    diff = np.abs(analytic - fd)[keep]
    scale = max(np.abs(fd)[keep].max(initial=0.0), 1e-12)
    return float(diff.max(initial=0.0) / scale)


def check_transform(name: str, seed: int = 0, draws: int = 10, h: float = 1e-4,
                    tol: float = 1e-4, size: int = 32, batch: int = 2,
                    lam_range=(0.1, 0.9)) -> GradCheckReport:
    """Compare one transform's analytic strength-gradient field against a
    central finite difference of its forward pass."""
    if name not in TRANSFORM_NAMES:
        raise ValueError(f"unknown transform {name!r}, expected one of {TRANSFORM_NAMES}")
    rng = Rng(seed, stream=TRANSFORM_NAMES.index(name))
    lo, hi = lam_range
    t0 = time.perf_counter()
    worst = 0.0
    min_cov = 1.0
    for _ in range(draws):
        x = rng.uniform(0.0, 1.0, (batch, 1, size, size)).data
        eps = NoiseRealization(rng.standard_normal((batch, 1, size, size)).data)
        keep = np.ones((batch, 1, size, size), dtype=bool)

        if name in ("flip0", "flip1"):
            axis = 0 if name == "flip0" else 1
            lam = rng.uniform(lo, hi, (batch,)).data
            analytic = [flip_param_field(x, lam, axis)]
            fwd = [lambda l: flip(Tensor(x), Tensor(l), axis).data]
            lams = [lam]
        elif name == "blur":
            lam = rng.uniform(lo, hi, (batch,)).data
            analytic = [blur_param_field(x, lam)]
            fwd = [lambda l: gaussian_blur(Tensor(x), Tensor(l)).data]
            lams = [lam]
        elif name == "noise":
            lam = rng.uniform(lo, hi, (batch,)).data
            analytic = [noise_param_field(x, lam, eps)]
            fwd = [lambda l: add_noise(Tensor(x), Tensor(l), eps).data]
            lams = [lam]
        elif name == "rotate":
            lam = _draw_rot_lambda(rng, batch, lo, hi)
            analytic = [rotate_param_field(x, lam)]
            fwd = [lambda l: rotate(Tensor(x), Tensor(l)).data]
            lams = [lam]
            keep = keep & ~_rotate_kink_mask(size, lam, h)[:, None]
        else:  # crop: two strength parameters share one tie exclusion
            lx = rng.uniform(lo, hi, (batch,)).data
            ly = rng.uniform(lo, hi, (batch,)).data
            fx, fy = crop_param_fields(x, lx, ly)
            analytic = [fx, fy]
            fwd = [
                lambda l: crop(Tensor(x), Tensor(l), Tensor(ly)).data,
                lambda l: crop(Tensor(x), Tensor(lx), Tensor(l)).data,
            ]
            lams = [lx, ly]
            keep = keep & ~_crop_tie_mask(size, lx, ly)[:, None]

        min_cov = min(min_cov, float(keep.mean()))
        with no_grad():
            for a_field, f, lam in zip(analytic, fwd, lams):
                fd = (f(lam + h) - f(lam - h)) / (2.0 * h)
                worst = max(worst, _field_error(a_field, fd, keep))
    return GradCheckReport(name, worst, tol, h, draws, min_cov, time.perf_counter() - t0)


def check_compose(seed: int = 0, draws: int = 10, h: float = 1e-4, tol: float = 1e-4,
                  size: int = 32, batch: int = 2, order: CompositionOrder = DEFAULT_ORDER,
                  lam_range=(0.1, 0.9)) -> GradCheckReport:
    """Check all seven strength gradients through the full composition.

    Both routes evaluate the same random projection sum(P * output) with P
    zeroed on tainted pixels; the analytic side comes from one backward
    pass, the other from central differences on each strength in turn.
    """
    rng = Rng(seed, stream=613)
    lo, hi = lam_range
    t0 = time.perf_counter()
    worst = 0.0
    min_cov = 1.0
    slots = ("blur", "noise", "crop_x", "crop_y", "flip0", "flip1", "rotate")
    for _ in range(draws):
        x = rng.uniform(0.0, 1.0, (batch, 1, size, size)).data
        eps = NoiseRealization(rng.standard_normal((batch, 1, size, size)).data)
        lam = {k: rng.uniform(lo, hi, (batch,)).data for k in slots}
        lam["rotate"] = _draw_rot_lambda(rng, batch, lo, hi)
        taint = _compose_taint(size, lam, order, h)
        min_cov = min(min_cov, float(1.0 - taint.mean()))
        proj = rng.uniform(-1.0, 1.0, (batch, 1, size, size)).data
        proj[taint[:, None]] = 0.0

        def params_of(vals: dict) -> TransformParams:
            return TransformParams(
                lambda_blur=Tensor(vals["blur"]), lambda_noise=Tensor(vals["noise"]),
                lambda_crop_x=Tensor(vals["crop_x"]), lambda_crop_y=Tensor(vals["crop_y"]),
                lambda_flip0=Tensor(vals["flip0"]), lambda_flip1=Tensor(vals["flip1"]),
                lambda_rot=Tensor(vals["rotate"]))

        tensors = {k: Tensor(v, requires_grad=True) for k, v in lam.items()}
        params = TransformParams(
            lambda_blur=tensors["blur"], lambda_noise=tensors["noise"],
            lambda_crop_x=tensors["crop_x"], lambda_crop_y=tensors["crop_y"],
            lambda_flip0=tensors["flip0"], lambda_flip1=tensors["flip1"],
            lambda_rot=tensors["rotate"])
        out = compose(Tensor(x), params, eps, order)
        (out * Tensor(proj)).sum().backward()

        with no_grad():
            for k in slots:
                for sign_ in (1.0, -1.0):
                    shifted = dict(lam)
                    shifted[k] = lam[k] + sign_ * h
                    if sign_ > 0:
                        up = compose(Tensor(x), params_of(shifted), eps, order).data
                    else:
                        dn = compose(Tensor(x), params_of(shifted), eps, order).data
                fd = ((up - dn) * proj).sum(axis=(1, 2, 3)) / (2.0 * h)
                a = tensors[k].grad
                scale = max(np.abs(fd).max(), 1e-12)
                worst = max(worst, float(np.abs(a - fd).max() / scale))
    return GradCheckReport("compose", worst, tol, h, draws, min_cov, time.perf_counter() - t0)


def check_end_to_end(seed: int = 0, h: float = 1e-5, tol: float = 1e-3,
                     size: int = 8, batch: int = 2) -> GradCheckReport:
    """Differentiate the transform-network objective with respect to every
    transform-network weight and compare each coordinate against central
    differences, on a reduced two-block configuration.

    The objective treats the untransformed embeddings as constants, matching
    how the network is trained.
    """
    rng = Rng(seed, stream=977)
    enc = Encoder(widths=(4, 8))
    head = ProjectionHead(in_dim=8, hidden=8, out_dim=4)
    clf = LinearClassifier(in_dim=8)
    tnet = TransformNet(widths=(2, 4))
    for net in (enc, head, clf, tnet):
        init_weights(net.store, rng)

    x = rng.uniform(0.0, 1.0, (batch, 1, size, size)).data
    labels = Tensor((np.arange(batch) % 2).astype(np.float64))
    eps = NoiseRealization(rng.standard_normal((batch, 1, size, size)).data)
    cfg = ObjectiveConfig(alpha0=1.0, alpha1=10.0)

    with no_grad():
        z_const = head.forward(enc.forward(Tensor(x))).data

    def objective() -> Tensor:
        strengths = tnet.forward(Tensor(x))
        params = TransformParams.from_matrix(strengths)
        xm = compose(Tensor(x), params, eps)
        feats = enc.forward(xm)
        zm = head.forward(feats)
        preds = clf.forward(feats)
        return m_objective(zm, Tensor(z_const), preds, labels, cfg)

    t0 = time.perf_counter()
    loss = objective()
    loss.backward(wrt=tnet.store.tensors())

    worst = 0.0
    for name, p in tnet.store.items():
        analytic = p.grad.copy()
        fd = np.zeros_like(p.data)
        flat_fd = fd.reshape(-1)
        base = p.data.copy()
        with no_grad():
            for i in range(base.size):
                for sign_, slot in ((1.0, 0), (-1.0, 1)):
                    arr = base.copy().reshape(-1)
                    arr[i] += sign_ * h
                    p.data = arr.reshape(base.shape)
                    val = objective().item()
                    if slot == 0:
                        up = val
                    else:
                        dn = val
                flat_fd[i] = (up - dn) / (2.0 * h)
        p.data = base
        scale = max(np.abs(fd).max(), 1e-12)
        err = float(np.abs(analytic - fd).max() / scale)
        worst = max(worst, err)
    return GradCheckReport("end_to_end", worst, tol, h, 1, 1.0, time.perf_counter() - t0)


def run_all(seed: int = 0, draws: int = 10, h: float = 1e-4, tol: float = 1e-4,
            size: int = 32, batch: int = 2, include_end_to_end: bool = True) -> list:
    reports = [check_transform(n, seed=seed, draws=draws, h=h, tol=tol, size=size, batch=batch)
               for n in TRANSFORM_NAMES]
    reports.append(check_compose(seed=seed, draws=draws, h=h, tol=tol, size=size, batch=batch))
    if include_end_to_end:
        reports.append(check_end_to_end(seed=seed))
    return reports
