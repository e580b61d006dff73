"""Attribution maps for the 3D UNet: Grad-CAM over pixel sets, guided
backprop, guided Grad-CAM and DeepLift with the rescale rule.

Every method runs the model in eval mode on a private tape. ``model`` is a
:class:`UNet3D` or any callable ``f(x, activations=None) -> logits`` built
from the tensor ops, which is how the test zoo plugs in toy networks.
Graphs containing dropout or training-mode batch norm are rejected.
"""
from __future__ import annotations

import hashlib
import inspect
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from scipy import ndimage

from . import container
from .errors import AttributionError, UnsupportedOpError
from .tensor import Tape, Tensor, backward
from .tensor.ops import _sigmoid
from .unet import UNet3D

METHODS = ("gradcam", "guided_backprop", "guided_gradcam", "deeplift")
DEFAULT_LAYER = "bottleneck"
RESCALE_EPS = 1e-7
_STOCHASTIC_OPS = {"dropout", "batch_norm_train"}
_LINEAR_OPS = {"add", "sub", "neg", "concat", "conv3d", "conv_transpose3d", "batch_norm_eval", "sum", "mean"}
_RESCALE_OPS = {"relu", "prelu", "sigmoid"}


# ------------------------------------------------------------------ pixel sets


@dataclass(frozen=True)
class PixelSet:
    """Output voxels (rows of d, h, w) whose class logits are summed."""

    indices: np.ndarray
    class_id: int

    def __post_init__(self):
        idx = np.asarray(self.indices, dtype=np.int64).reshape(-1, 3)
        if len(idx) == 0:
            raise AttributionError("pixel set is empty")
        object.__setattr__(self, "indices", np.unique(idx, axis=0))

    @classmethod
    def single(cls, d: int, h: int, w: int, class_id: int) -> "PixelSet":
        return cls(np.array([[d, h, w]]), class_id)

    @classmethod
    def from_mask(cls, mask, class_id: int) -> "PixelSet":
        mask = np.asarray(mask, dtype=bool)
        if mask.ndim != 3:
            raise AttributionError(f"pixel mask must be (D, H, W), got shape {mask.shape}")
        return cls(np.argwhere(mask), class_id)

    @classmethod
    def all_voxels(cls, shape, class_id: int) -> "PixelSet":
        return cls.from_mask(np.ones(tuple(shape), dtype=bool), class_id)

    @classmethod
    def predicted(cls, model, x, class_id: int) -> "PixelSet":
        """Voxels the model itself labels ``class_id`` (probability >= 0.5)."""
        logits = _forward(model, _as_batch(x, _model_dtype(model)))[0].data
        mask = _sigmoid(logits[0, class_id]) >= 0.5
        if not mask.any():
            raise AttributionError(f"model predicts no voxel of class {class_id}")
        return cls.from_mask(mask, class_id)

    def __len__(self) -> int:
        return len(self.indices)

    def __and__(self, other: "PixelSet") -> np.ndarray:
        a = {tuple(r) for r in self.indices.tolist()}
        return np.array(sorted(a & {tuple(r) for r in other.indices.tolist()}), dtype=np.int64).reshape(-1, 3)

    def union(self, other: "PixelSet") -> "PixelSet":
        if other.class_id != self.class_id:
            raise AttributionError("cannot merge pixel sets of different classes")
        return PixelSet(np.concatenate([self.indices, other.indices]), self.class_id)

    def mask(self, shape) -> np.ndarray:
        shape = tuple(shape)
        if (self.indices < 0).any() or (self.indices >= np.array(shape)).any():
            raise AttributionError(f"pixel indices fall outside the output grid {shape}")
        out = np.zeros(shape, dtype=bool)
        out[tuple(self.indices.T)] = True
        return out


@dataclass
class AttributionMap:
    method: str
    class_id: int
    pixel_count: int
    values: np.ndarray
    layer: Optional[str] = None
    extra: dict = field(default_factory=dict)

    def checksum(self) -> str:
        return hashlib.sha256(np.ascontiguousarray(self.values).tobytes()).hexdigest()


# ------------------------------------------------------------------ plumbing


def _model_dtype(model):
    if isinstance(model, UNet3D):
        return model.dtype
    return getattr(model, "dtype", np.float64)


def _as_batch(x, dtype) -> np.ndarray:
    x = np.asarray(x.data if isinstance(x, Tensor) else x)
    if x.ndim == 4:
        x = x[None]
    if x.ndim != 5 or x.shape[0] != 1:
        raise AttributionError(f"expected one (C, D, H, W) volume, got shape {x.shape}")
    return x.astype(dtype, copy=False)


def _forward(model, x, requires_grad=False):
    """Eval-mode logits plus the dict of named activations."""
    xt = Tensor(x, requires_grad=requires_grad)
    acts: dict[str, Tensor] = {}
    if isinstance(model, UNet3D):
        logits = model.forward(xt, training=False, activations=acts)
    else:
        takes_acts = "activations" in inspect.signature(model).parameters
        logits = model(xt, activations=acts) if takes_acts else model(xt)
    return logits, acts, xt


def _check_graph(tape: Tape, input_id: int) -> None:
    dependent = {input_id}
    for nid, node in enumerate(tape.nodes):
        hits = [p in dependent for p in node.parents]
        if not any(hits):
            continue
        dependent.add(nid)
        if node.op in _STOCHASTIC_OPS:
            raise AttributionError(f"graph contains training-mode op {node.op!r}; attribution needs eval mode")
        if node.op in ("mul", "div") and all(hits):
            raise UnsupportedOpError(f"op {node.op!r} with two input-dependent operands has no rescale rule")
        if node.op == "div" and hits[1]:
            raise UnsupportedOpError("op 'div' with an input-dependent denominator has no rescale rule")
        if node.op in ("sum", "mean"):
            axis = node.attrs.get("axis")
            axes = (axis,) if isinstance(axis, int) else axis
            if axes is None or 0 in axes or -len(node.inputs[0].shape) in axes:
                raise UnsupportedOpError(f"op {node.op!r} reduces over the batch axis")
        elif node.op == "concat" and node.attrs.get("axis", 1) % len(node.inputs[0].shape) == 0:
            raise UnsupportedOpError("op 'concat' along the batch axis")
        elif node.op not in _LINEAR_OPS | _RESCALE_OPS | {"mul", "div"}:
            raise UnsupportedOpError(f"op {node.op!r} has no attribution rule")


def _seed(logits: Tensor, pixels: PixelSet, sign: float = 1.0, batch_row: int = 0) -> np.ndarray:
    n, c = logits.shape[:2]
    if not 0 <= pixels.class_id < c:
        raise AttributionError(f"class {pixels.class_id} outside [0, {c})")
    seed = np.zeros(logits.shape, dtype=logits.dtype)
    seed[batch_row, pixels.class_id] = pixels.mask(logits.shape[2:]) * sign
    return seed


def upsample(vol: np.ndarray, shape) -> np.ndarray:
    """Trilinear resize of a (d, h, w) grid to ``shape`` with voxel-center alignment."""
    vol = np.asarray(vol)
    if vol.shape == tuple(shape):
        return vol.copy()
    coords = np.meshgrid(
        *[(np.arange(n, dtype=np.float64) + 0.5) * (m / n) - 0.5 for n, m in zip(shape, vol.shape)], indexing="ij"
    )
    return ndimage.map_coordinates(vol.astype(np.float64), coords, order=1, mode="nearest").astype(vol.dtype)


# ------------------------------------------------------------------ grad-cam


def _cam(model, x, layer: str, pixels: PixelSet, sign: float = 1.0):
    x = _as_batch(x, _model_dtype(model))
    with Tape() as tape:
        logits, acts, xt = _forward(model, x, requires_grad=True)
    _check_graph(tape, tape.lookup(xt))
    if layer not in acts:
        raise AttributionError(f"unknown layer {layer!r}; recorded layers: {sorted(acts)}")
    grads = backward(tape, logits, seed=_seed(logits, pixels, sign))
    A = acts[layer].data[0]
    alpha = grads[acts[layer]][0].reshape(A.shape[0], -1).mean(axis=1)
    pre = np.tensordot(alpha, A, axes=1)
    return pre, x.shape[2:]


def grad_cam_pre_relu(model, x, layer: str = DEFAULT_LAYER, pixels: Optional[PixelSet] = None, class_id: int = 0, sign: float = 1.0) -> np.ndarray:
    """Channel-weighted activation sum on the layer grid, before the ReLU."""
    pixels = pixels if pixels is not None else PixelSet.predicted(model, x, class_id)
    return _cam(model, x, layer, pixels, sign)[0]


def grad_cam(model, x, layer: str = DEFAULT_LAYER, pixels: Optional[PixelSet] = None, class_id: int = 0) -> AttributionMap:
    """Grad-CAM for the summed logits of ``pixels``, upsampled to the input grid.

    With ``pixels`` omitted the model's own predicted mask for ``class_id`` is used.
    """
    pixels = pixels if pixels is not None else PixelSet.predicted(model, x, class_id)
    pre, shape = _cam(model, x, layer, pixels)
    values = upsample(np.maximum(pre, 0), shape)
    return AttributionMap("gradcam", pixels.class_id, len(pixels), values, layer, {"layer_shape": list(pre.shape)})


@dataclass(frozen=True)
class AdditivityReport:
    rel_err: float
    tolerance: float
    passed: bool
    sizes: tuple[int, int]


def seg_grad_cam_additivity_probe(model, x, layer: str, m1: PixelSet, m2: PixelSet, tolerance: float = 1e-5) -> AdditivityReport:
    """Check pre-ReLU map(m1 | m2) against map(m1) + map(m2) for disjoint sets."""
    if m1.class_id != m2.class_id:
        raise AttributionError("probe sets must target the same class")
    if len(m1 & m2):
        raise AttributionError("probe sets overlap")
    if isinstance(model, UNet3D):
        model = model.astype(np.float64)
    x = np.asarray(x, dtype=np.float64)
    a = grad_cam_pre_relu(model, x, layer, m1)
    b = grad_cam_pre_relu(model, x, layer, m2)
    ab = grad_cam_pre_relu(model, x, layer, m1.union(m2))
    err = float(np.linalg.norm(ab - (a + b)) / max(np.linalg.norm(ab), np.finfo(np.float64).tiny))
    return AdditivityReport(err, tolerance, err < tolerance, (len(m1), len(m2)))


# ------------------------------------------------------------------ guided backprop


def _guided(node, g):
    pre = node.inputs[0]
    gx = g * ((pre > 0) & (g > 0))
    return (gx,) if node.op == "relu" else (gx, None)


GUIDED_RULES = {"relu": _guided, "prelu": _guided}


def guided_backprop(model, x, pixels: Optional[PixelSet] = None, class_id: int = 0) -> AttributionMap:
    """Input gradient where every ReLU/PReLU only passes positive signal through
    positive pre-activations; summed over input channels."""
    pixels = pixels if pixels is not None else PixelSet.predicted(model, x, class_id)
    x = _as_batch(x, _model_dtype(model))
    with Tape() as tape:
        logits, _, xt = _forward(model, x, requires_grad=True)
    _check_graph(tape, tape.lookup(xt))
    grads = backward(tape, logits, seed=_seed(logits, pixels), rules=GUIDED_RULES)
    values = grads[xt][0].sum(axis=0)
    return AttributionMap("guided_backprop", pixels.class_id, len(pixels), values)


def guided_grad_cam(model, x, layer: str = DEFAULT_LAYER, pixels: Optional[PixelSet] = None, class_id: int = 0) -> AttributionMap:
    pixels = pixels if pixels is not None else PixelSet.predicted(model, x, class_id)
    cam = grad_cam(model, x, layer, pixels)
    gb = guided_backprop(model, x, pixels)
    return combine_guided(cam, gb)


def combine_guided(cam: AttributionMap, gb: AttributionMap) -> AttributionMap:
    if cam.values.shape != gb.values.shape:
        raise AttributionError(f"map shapes differ: {cam.values.shape} vs {gb.values.shape}")
    return AttributionMap(
        "guided_gradcam", cam.class_id, cam.pixel_count, cam.values * gb.values, cam.layer, dict(cam.extra)
    )


# ------------------------------------------------------------------ deeplift


def _local_slope(node, pre):
    if node.op == "relu":
        return (pre > 0).astype(pre.dtype)
    if node.op == "prelu":
        alpha = node.inputs[1].reshape((1, -1) + (1,) * (pre.ndim - 2)) if pre.ndim > 1 else node.inputs[1]
        return np.where(pre > 0, 1, alpha).astype(pre.dtype)
    s = _sigmoid(pre)
    return s * (1 - s)


def _rescale(node, g):
    pre, out = node.inputs[0], node.out
    d_in = pre[:1] - pre[1:]
    d_out = out[:1] - out[1:]
    small = np.abs(d_in) < RESCALE_EPS
    ratio = np.where(small, _local_slope(node, pre[:1]), d_out / np.where(small, 1, d_in))
    gx = np.zeros_like(g)
    gx[:1] = g[:1] * ratio
    return (gx,) if node.op != "prelu" else (gx, None)


RESCALE_RULES = {op: _rescale for op in _RESCALE_OPS}


def deeplift_rescale(model, x, baseline=None, pixels: Optional[PixelSet] = None, class_id: int = 0) -> AttributionMap:
    """Per-voxel contributions to f(x) - f(baseline), where f sums the class
    logits over ``pixels``. The baseline defaults to an all-zero volume."""
    pixels = pixels if pixels is not None else PixelSet.predicted(model, x, class_id)
    dtype = _model_dtype(model)
    x = _as_batch(x, dtype)
    base = np.zeros_like(x) if baseline is None else _as_batch(baseline, dtype)
    if base.shape != x.shape:
        raise AttributionError(f"baseline shape {base.shape[1:]} != input shape {x.shape[1:]}")
    pair = np.concatenate([x, base])
    with Tape() as tape:
        logits, _, xt = _forward(model, pair, requires_grad=True)
    _check_graph(tape, tape.lookup(xt))
    seed = _seed(logits, pixels)
    grads = backward(tape, logits, seed=seed, rules=RESCALE_RULES)
    contrib = grads[xt][0] * (x[0] - base[0])
    sel = seed[0].astype(np.float64)
    f_x = float((logits.data[0] * sel).sum(dtype=np.float64))
    f_b = float((logits.data[1] * sel).sum(dtype=np.float64))
    total = float(contrib.sum(dtype=np.float64))
    extra = {"f_input": f_x, "f_baseline": f_b, "sum_contributions": total}
    return AttributionMap("deeplift", pixels.class_id, len(pixels), contrib.sum(axis=0), None, extra)


def completeness_error(m: AttributionMap) -> float:
    """Relative gap between summed DeepLift contributions and the output delta."""
    delta = m.extra["f_input"] - m.extra["f_baseline"]
    return abs(m.extra["sum_contributions"] - delta) / max(abs(delta), np.finfo(np.float64).tiny)


def explain(method: str, model, x, class_id: int, layer: str = DEFAULT_LAYER, pixels: Optional[PixelSet] = None, baseline=None) -> AttributionMap:
    if method == "gradcam":
        return grad_cam(model, x, layer, pixels, class_id)
    if method == "guided_backprop":
        return guided_backprop(model, x, pixels, class_id)
    if method == "guided_gradcam":
        return guided_grad_cam(model, x, layer, pixels, class_id)
    if method == "deeplift":
        return deeplift_rescale(model, x, baseline, pixels, class_id)
    raise AttributionError(f"unknown method {method!r}; choose from {', '.join(METHODS)}")


# ------------------------------------------------------------------ persistence


def save_attribution(m: AttributionMap, path, sidecar=None) -> str:
    """Write ``m`` to the binary container and append a JSON line to ``sidecar``."""
    meta = {"method": m.method, "class_id": m.class_id, "pixel_count": m.pixel_count, "layer": m.layer, "extra": m.extra}
    container.save(path, {"values": m.values}, meta)
    digest = m.checksum()
    if sidecar is not None:
        rec = {"file": Path(path).name, "method": m.method, "class_id": m.class_id, "layer": m.layer,
               "pixel_count": m.pixel_count, "sha256": digest}
        with open(sidecar, "a") as fh:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    return digest


def load_attribution(path) -> AttributionMap:
    tensors, meta = container.load(path)
    return AttributionMap(meta["method"], meta["class_id"], meta["pixel_count"], tensors["values"], meta["layer"], meta.get("extra", {}))


# ------------------------------------------------------------------ rendering

MASK_COLORS = np.array([[230, 60, 60], [60, 200, 90], [70, 110, 230]], dtype=np.float64) / 255


def _take(vol, axis, index):
    if not 0 <= axis < 3:
        raise AttributionError(f"slice axis {axis} outside [0, 3)")
    if not 0 <= index < vol.shape[axis]:
        raise AttributionError(f"slice index {index} outside [0, {vol.shape[axis]}) on axis {axis}")
    return np.take(vol, index, axis=axis)


def _gray(sl):
    sl = sl.astype(np.float64)
    lo, hi = sl.min(), sl.max()
    g = (sl - lo) / (hi - lo) if hi > lo else np.zeros_like(sl)
    return np.repeat(g[..., None], 3, axis=-1)


def default_colormap(method: str) -> str:
    return "inferno" if method == "gradcam" else "RdBu_r"


def overlay_rgb(m: AttributionMap, volume, slice_axis: int, slice_index: int, colormap=None, alpha: float = 0.6, mask=None) -> np.ndarray:
    """uint8 RGB slice: anatomy blended with the map, plus an optional mask panel."""
    from matplotlib import colormaps

    vol = np.asarray(volume)
    if vol.ndim == 4:
        vol = vol[0]
    if vol.shape != m.values.shape:
        raise AttributionError(f"volume shape {vol.shape} != map shape {m.values.shape}")
    gray = _gray(_take(vol, slice_axis, slice_index))
    a = _take(m.values, slice_axis, slice_index).astype(np.float64)
    cmap = colormaps[colormap or default_colormap(m.method)]
    scale = float(np.abs(m.values).max())
    if scale == 0:
        norm = np.zeros_like(a)
    else:
        norm = a / scale
    if m.method == "gradcam":
        pos = np.clip(norm, 0, 1)
        color, weight = cmap(pos)[..., :3], pos
    else:
        color, weight = cmap((norm + 1) / 2)[..., :3], np.abs(norm)
    w = (alpha * weight)[..., None]
    panels = [(1 - w) * gray + w * color]
    if mask is not None:
        mk = np.asarray(mask, dtype=bool)
        panel = gray.copy()
        for c in range(mk.shape[0]):
            sel = _take(mk[c], slice_axis, slice_index)
            panel[sel] = 0.5 * panel[sel] + 0.5 * MASK_COLORS[c % len(MASK_COLORS)]
        panels.append(panel)
    rgb = np.concatenate(panels, axis=1)
    return np.round(np.clip(rgb, 0, 1) * 255).astype(np.uint8)


def render_overlay(m: AttributionMap, volume, slice_axis: int, slice_index: int, path, colormap=None, alpha: float = 0.6, mask=None, zoom: int = 1) -> Path:
    from PIL import Image

    rgb = overlay_rgb(m, volume, slice_axis, slice_index, colormap, alpha, mask)
    if zoom > 1:
        rgb = np.repeat(np.repeat(rgb, zoom, axis=0), zoom, axis=1)
    path = Path(path)
    Image.fromarray(rgb).save(path, format="PNG")
    return path
