"""Hand-crafted residual front end: DCT kernel banks, image-to-residual
convolution, and the quantize-and-truncate maps. Nothing here is trainable."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .codec import ImagePlane

SUPPORTED_KERNEL_SIZES = (3, 5, 8)


@dataclass(frozen=True)
class QtSpec:
    """Threshold/quantization pair: round(z / q) clipped to [-T, T]."""

    T: int
    q: float

    def __post_init__(self):
        if int(self.T) != self.T or self.T < 1:
            raise ValueError(f"threshold must be a positive integer, got {self.T!r}")
        if not self.q > 0:
            raise ValueError(f"quantization step must be positive, got {self.q!r}")
        object.__setattr__(self, "T", int(self.T))
        object.__setattr__(self, "q", float(self.q))

    def label(self) -> str:
        q = self.q
        return f"{self.T}:{int(q) if q == int(q) else q}"


#: Quantize-and-truncate combinations used by the default pipeline.
DEFAULT_QT_SPECS = (QtSpec(4, 1), QtSpec(4, 2), QtSpec(4, 4))


@dataclass(frozen=True)
class KernelBank:
    """k*k unit-Frobenius-norm convolution kernels with their (k, l) labels."""

    size: int
    kernels: np.ndarray  # (size*size, size, size)
    labels: tuple

    def __post_init__(self):
        k = self.size
        kernels = np.asarray(self.kernels, dtype=np.float64)
        if kernels.shape != (k * k, k, k):
            raise ValueError(f"expected {k * k} kernels of size {k}x{k}")
        norms = np.sqrt((kernels**2).sum(axis=(1, 2)))
        if np.abs(norms - 1.0).max() > 1e-10:
            raise ValueError("kernels must have unit Frobenius norm")
        kernels = kernels.copy()
        kernels.setflags(write=False)
        object.__setattr__(self, "kernels", kernels)
        object.__setattr__(self, "labels", tuple(self.labels))


def dct_basis(k: int) -> KernelBank:
    """Orthonormal k x k DCT basis patterns, (k, l) lexicographic.

    Size 8 uses the w_0 = 1/sqrt(2), w_k = 1 weights with divisor 4; sizes 3
    and 5 use w_0 = 1, w_k = sqrt(2) with divisor k. Both conventions yield
    the same orthonormal separable cosine family.
    """
    if k not in SUPPORTED_KERNEL_SIZES:
        raise ValueError(f"kernel size must be one of {SUPPORTED_KERNEL_SIZES}, got {k}")
    idx = np.arange(k).astype(np.float64)
    if k == 8:
        w = np.ones(k)
        w[0] = 1.0 / np.sqrt(2.0)
        rows = (w[:, None] / 2.0) * np.cos(np.pi * idx[:, None] * (2 * idx[None, :] + 1) / (2 * k))
    else:
        w = np.full(k, np.sqrt(2.0))
        w[0] = 1.0
        rows = (w[:, None] / np.sqrt(k)) * np.cos(
            np.pi * idx[:, None] * (2 * idx[None, :] + 1) / (2 * k)
        )
    kernels = np.einsum("km,ln->klmn", rows, rows).reshape(k * k, k, k)
    labels = tuple((a, b) for a in range(k) for b in range(k))
    return KernelBank(size=k, kernels=kernels, labels=labels)


def _pad_amounts(k: int) -> tuple[int, int]:
    """Same-padding split: symmetric for odd k; 3 left/top, 4 right/bottom for k=8."""
    if k % 2:
        return (k - 1) // 2, (k - 1) // 2
    return k // 2 - 1, k // 2


def convolve_batch(planes: np.ndarray, bank: KernelBank) -> np.ndarray:
    """Cross-correlate a batch of planes with every kernel in the bank.

    planes: (n, H, W) real; returns (n, k*k, H, W) with same-padding, stride 1.
    """
    planes = np.asarray(planes)
    n, h, w = planes.shape
    k = bank.size
    if h < k or w < k:
        raise ValueError(f"plane {h}x{w} is smaller than the {k}x{k} kernels")
    lo, hi = _pad_amounts(k)
    padded = np.pad(planes, ((0, 0), (lo, hi), (lo, hi)))
    sn, sh, sw = padded.strides
    patches = np.lib.stride_tricks.as_strided(
        padded, shape=(n, h, w, k, k), strides=(sn, sh, sw, sh, sw), writeable=False
    )
    kmat = bank.kernels.reshape(k * k, k * k).astype(planes.dtype, copy=False)
    # Per-image GEMM keeps the (n, k*k, H, W) result C-contiguous without a
    # transpose pass.
    out = np.empty((n, k * k, h, w), dtype=planes.dtype)
    for i in range(n):
        cols = patches[i].reshape(h * w, k * k)
        out[i] = (kmat @ cols.T).reshape(k * k, h, w)
    return out


def convolve_residuals(plane: ImagePlane, bank: KernelBank) -> np.ndarray:
    """All k*k residual maps of one plane: (k*k, H, W), same dimensions as input."""
    return convolve_batch(plane.values[None], bank)[0]


def quantize_truncate(values: np.ndarray, spec: QtSpec) -> np.ndarray:
    """Element-wise round(z / q) clipped to [-T, T].

    Rounding is half-away-from-zero, preserving the map's odd symmetry.
    """
    z = np.asarray(values, dtype=np.float64)
    rounded = np.sign(z) * np.floor(np.abs(z) / spec.q + 0.5)
    return np.clip(rounded, -spec.T, spec.T).astype(np.int8)


@dataclass(frozen=True)
class ResidualStack:
    """Quantized residual groups, one per QtSpec, each (k*k, H, W) in [-T, T]."""

    specs: tuple
    groups: tuple  # of int8 arrays, ordered like specs
    labels: tuple  # (k, l) order shared by every group

    def __post_init__(self):
        if len(self.specs) != len(self.groups):
            raise ValueError("one residual group per QtSpec required")
        for spec, group in zip(self.specs, self.groups):
            if np.abs(group).max(initial=0) > spec.T:
                raise ValueError(f"group entries exceed threshold {spec.T}")


def front_stage(plane: ImagePlane, bank: KernelBank, specs) -> ResidualStack:
    """Convolve once, then quantize/truncate per spec (spec-major ordering)."""
    specs = tuple(specs)
    if not specs:
        raise ValueError("at least one QtSpec required")
    residuals = convolve_residuals(plane, bank)
    groups = tuple(quantize_truncate(residuals, spec) for spec in specs)
    return ResidualStack(specs=specs, groups=groups, labels=bank.labels)


def _quantize_truncate_inplace(residuals: np.ndarray, spec: QtSpec) -> np.ndarray:
    """Fused copy of the Q&T map staying in the residuals' own float dtype.

    Same half-away-from-zero staircase as quantize_truncate; saves the f64
    round trip on the training path.
    """
    dt = residuals.dtype
    out = residuals * dt.type(1.0 / spec.q)
    np.add(out, np.copysign(dt.type(0.5), out), out=out)
    np.trunc(out, out=out)
    np.clip(out, -spec.T, spec.T, out=out)
    return out


def front_stage_batch(planes: np.ndarray, bank: KernelBank, specs, dtype=np.float32) -> list:
    """Batched front stage for the training loop.

    planes: (n, H, W); returns one (n, k*k, H, W) array per spec in ``dtype``,
    ready to feed the learnable stage.
    """
    specs = tuple(specs)
    if not specs:
        raise ValueError("at least one QtSpec required")
    residuals = convolve_batch(np.asarray(planes, dtype=dtype), bank)
    return [_quantize_truncate_inplace(residuals, spec) for spec in specs]


def save_residual_stack(stack: ResidualStack, out_dir) -> None:
    """Debug dump: one FPL1 plane per map plus a JSON sidecar giving the
    (spec, k, l) order. The pipeline itself streams stacks in memory."""
    import json
    from pathlib import Path

    from .containers import write_fpl

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    order = []
    for gi, (spec, group) in enumerate(zip(stack.specs, stack.groups)):
        for mi, (k, l) in enumerate(stack.labels):
            name = f"g{gi}_k{k}l{l}.fpl"
            write_fpl(out_dir / name, group[mi].astype(np.float64))
            order.append({"file": name, "spec": spec.label(), "k": k, "l": l})
    sidecar = {"specs": [s.label() for s in stack.specs], "maps": order}
    (out_dir / "residuals.json").write_text(json.dumps(sidecar, indent=2, sort_keys=True))


def load_residual_stack(in_dir) -> ResidualStack:
    """Inverse of save_residual_stack."""
    import json
    from pathlib import Path

    from .containers import read_fpl

    in_dir = Path(in_dir)
    sidecar = json.loads((in_dir / "residuals.json").read_text())
    specs = parse_qt_specs(",".join(sidecar["specs"]))
    by_spec: dict = {label: [] for label in sidecar["specs"]}
    labels = []
    for rec in sidecar["maps"]:
        by_spec[rec["spec"]].append(read_fpl(in_dir / rec["file"]).astype(np.int8))
        if rec["spec"] == sidecar["specs"][0]:
            labels.append((rec["k"], rec["l"]))
    groups = tuple(np.stack(by_spec[label]) for label in sidecar["specs"])
    return ResidualStack(specs=specs, groups=groups, labels=tuple(labels))


def parse_qt_specs(text: str):
    """Parse "4:1,4:2,4:4" into QtSpec tuples."""
    specs = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        t_str, _, q_str = part.partition(":")
        if not q_str:
            raise ValueError(f"bad Q&T spec {part!r}, expected T:q")
        specs.append(QtSpec(int(t_str), float(q_str)))
    if not specs:
        raise ValueError("empty Q&T spec list")
    return tuple(specs)
