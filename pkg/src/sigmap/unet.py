"""The U-Net pair: configuration, parameters, forward pass, checkpoints.

Architecture (per net): 4 encoder blocks with 2x2 max pooling, a
bottleneck block, 4 decoder blocks with 2x2-stride transposed-conv
upsampling and skip concatenation, and a linear 1x1 output convolution.
Each block is (conv 3x3 -> BN -> ReLU) twice; channels double down the
ladder base*(1, 2, 4, 8, 16). Weights use Kaiming-uniform fan-in init.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .errors import InputDataError

CKPT_MAGIC = b"SIGMAPCKPT\x00v1"


@dataclass(frozen=True)
class UNetConfig:
    in_channels: int
    base_channels: int = 8  # paper-scale runs use 64
    depth: int = 4
    out_channels: int = 1

    def __post_init__(self):
        if min(self.in_channels, self.base_channels, self.depth, self.out_channels) < 1:
            raise ValueError("all UNetConfig fields must be positive")

    @property
    def conv_blocks(self) -> int:
        return 2 * self.depth + 1

    @property
    def ladder(self) -> tuple[int, ...]:
        return tuple(self.base_channels * 2**i for i in range(self.depth + 1))

    def to_dict(self) -> dict:
        return {
            "in_channels": self.in_channels,
            "base_channels": self.base_channels,
            "depth": self.depth,
            "out_channels": self.out_channels,
        }


def _layer_plan(cfg: UNetConfig):
    """(name, shape, is_param) for every tensor in build order."""
    plan: list[tuple[str, tuple[int, ...], bool]] = []

    def block(prefix, cin, cout):
        for j, ci in ((1, cin), (2, cout)):
            plan.append((f"{prefix}.conv{j}.w", (cout, ci, 3, 3), True))
            plan.append((f"{prefix}.conv{j}.b", (cout,), True))
            plan.append((f"{prefix}.bn{j}.gamma", (cout,), True))
            plan.append((f"{prefix}.bn{j}.beta", (cout,), True))
            plan.append((f"{prefix}.bn{j}.running_mean", (cout,), False))
            plan.append((f"{prefix}.bn{j}.running_var", (cout,), False))

    ladder = cfg.ladder
    cin = cfg.in_channels
    for i in range(cfg.depth):
        block(f"enc{i}", cin, ladder[i])
        cin = ladder[i]
    block("bot", ladder[cfg.depth - 1], ladder[cfg.depth])
    for i in reversed(range(cfg.depth)):
        plan.append((f"dec{i}.up.w", (ladder[i + 1], ladder[i], 2, 2), True))
        plan.append((f"dec{i}.up.b", (ladder[i],), True))
        block(f"dec{i}", 2 * ladder[i], ladder[i])
    plan.append(("head.w", (cfg.out_channels, ladder[0], 1, 1), True))
    plan.append(("head.b", (cfg.out_channels,), True))
    return plan


def param_count(cfg: UNetConfig) -> int:
    """Trainable parameter count (conv weights/biases, BN gamma/beta;
    running statistics excluded)."""
    return sum(
        int(np.prod(shape)) for _, shape, is_param in _layer_plan(cfg) if is_param
    )


class UNet:
    """One U-Net: named parameter Tensors plus BN running buffers."""

    def __init__(self, cfg: UNetConfig, rng: np.random.Generator | None = None):
        self.cfg = cfg
        self.params: dict[str, Tensor] = {}
        self.buffers: dict[str, np.ndarray] = {}
        rng = rng or np.random.default_rng(0)
        for name, shape, is_param in _layer_plan(cfg):
            if not is_param:
                fill = 1.0 if name.endswith("running_var") else 0.0
                self.buffers[name] = np.full(shape, fill, dtype=np.float32)
                continue
            if name == "head.w":
                # regression head starts at the flat prior (bias mid-range,
                # zero weights) so training does not spend its early steps
                # chasing the output DC level
                data = np.zeros(shape, dtype=np.float32)
            elif name == "head.b":
                data = np.full(shape, 0.5, dtype=np.float32)
            elif name.endswith(".w"):
                fan_in = int(np.prod(shape[1:])) if len(shape) == 4 else shape[0]
                if ".up." in name:  # transposed conv stores (Cin, Cout, 2, 2)
                    fan_in = shape[0] * shape[2] * shape[3]
                bound = np.sqrt(6.0 / fan_in)
                data = rng.uniform(-bound, bound, size=shape).astype(np.float32)
            elif name.endswith("gamma"):
                data = np.ones(shape, dtype=np.float32)
            else:  # biases and beta start at zero
                data = np.zeros(shape, dtype=np.float32)
            self.params[name] = Tensor(data, requires_grad=True)

    def _block(self, x: Tensor, prefix: str, train: bool) -> Tensor:
        p = self.params
        b = self.buffers
        for j in (1, 2):
            x = ag.conv2d(x, p[f"{prefix}.conv{j}.w"], p[f"{prefix}.conv{j}.b"])
            x = ag.batchnorm2d(
                x,
                p[f"{prefix}.bn{j}.gamma"],
                p[f"{prefix}.bn{j}.beta"],
                b[f"{prefix}.bn{j}.running_mean"],
                b[f"{prefix}.bn{j}.running_var"],
                train,
            )
            x = ag.relu(x)
        return x

    def forward(self, x, train: bool = False) -> Tensor:
        if not isinstance(x, Tensor):
            x = Tensor(x)
        h, w = x.shape[2], x.shape[3]
        div = 2**self.cfg.depth
        if h % div or w % div:
            raise ValueError(f"spatial dims must be divisible by {div}, got {h}x{w}")
        if x.shape[1] != self.cfg.in_channels:
            raise ValueError(
                f"expected {self.cfg.in_channels} input channels, got {x.shape[1]}"
            )
        skips = []
        for i in range(self.cfg.depth):
            x = self._block(x, f"enc{i}", train)
            skips.append(x)
            x = ag.maxpool2(x)
        x = self._block(x, "bot", train)
        for i in reversed(range(self.cfg.depth)):
            x = ag.conv_transpose2(
                x, self.params[f"dec{i}.up.w"], self.params[f"dec{i}.up.b"]
            )
            x = ag.concat_channels(skips[i], x)
            x = self._block(x, f"dec{i}", train)
        return ag.conv2d(x, self.params["head.w"], self.params["head.b"], padding=0)

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {name: p.data for name, p in self.params.items()}
        out.update(self.buffers)
        return out

    def snapshot(self) -> dict[str, np.ndarray]:
        return {name: a.copy() for name, a in self.state_arrays().items()}

    def load_snapshot(self, snap: dict[str, np.ndarray]) -> None:
        for name, p in self.params.items():
            p.data = snap[name].copy()
        for name in self.buffers:
            self.buffers[name] = snap[name].copy()

    def digest(self) -> int:
        """CRC32 over all parameters and buffers in build order."""
        crc = 0
        for name, _, _ in _layer_plan(self.cfg):
            arr = (
                self.params[name].data if name in self.params else self.buffers[name]
            )
            crc = zlib.crc32(np.ascontiguousarray(arr, dtype="<f4").tobytes(), crc)
        return crc


def unet_forward(cfg: UNetConfig, params: UNet, x, train: bool = False) -> np.ndarray:
    """Functional wrapper: run a forward pass, return the output array."""
    return params.forward(x, train=train).data


@dataclass
class CascadedModel:
    """Stage-1 (isotropic PG) and stage-2 (signal strength) networks."""

    iso: UNet
    dir: UNet


# -- checkpoint format --------------------------------------------------
#
# 13-byte magic, u32 LE header length, JSON header with both network
# configs, u32 blob count; per blob: u16 name length + UTF-8 name,
# u8 ndim + u32 dims, u32 byte length, little-endian float32 payload,
# u32 CRC32 of the payload.


def _write_blob(fh, name: str, arr: np.ndarray) -> None:
    payload = np.ascontiguousarray(arr, dtype="<f4").tobytes()
    nb = name.encode("utf-8")
    fh.write(struct.pack("<H", len(nb)))
    fh.write(nb)
    fh.write(struct.pack("<B", arr.ndim))
    for d in arr.shape:
        fh.write(struct.pack("<I", d))
    fh.write(struct.pack("<I", len(payload)))
    fh.write(payload)
    fh.write(struct.pack("<I", zlib.crc32(payload)))


def save_model(path, model: CascadedModel, meta: dict | None = None) -> None:
    header = json.dumps(
        {
            "version": 1,
            "iso": model.iso.cfg.to_dict(),
            "dir": model.dir.cfg.to_dict(),
            "meta": meta or {},
        },
        sort_keys=True,
        separators=(",", ":"),
    ).encode("utf-8")
    blobs: list[tuple[str, np.ndarray]] = []
    for net_name, net in (("iso", model.iso), ("dir", model.dir)):
        for name, arr in net.state_arrays().items():
            blobs.append((f"{net_name}.{name}", arr))
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        fh.write(struct.pack("<I", len(blobs)))
        for name, arr in blobs:
            _write_blob(fh, name, arr)


def load_model(path) -> CascadedModel:
    with open(path, "rb") as fh:
        blob = fh.read()
    if not blob.startswith(CKPT_MAGIC):
        raise InputDataError(f"{path}: not a sigmap checkpoint (bad magic)")
    off = len(CKPT_MAGIC)
    try:
        (hlen,) = struct.unpack_from("<I", blob, off)
        off += 4
        header = json.loads(blob[off:off + hlen].decode("utf-8"))
        off += hlen
        (count,) = struct.unpack_from("<I", blob, off)
        off += 4
        arrays: dict[str, np.ndarray] = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", blob, off)
            off += 2
            name = blob[off:off + nlen].decode("utf-8")
            off += nlen
            (ndim,) = struct.unpack_from("<B", blob, off)
            off += 1
            shape = []
            for _ in range(ndim):
                (d,) = struct.unpack_from("<I", blob, off)
                off += 4
                shape.append(d)
            (nbytes,) = struct.unpack_from("<I", blob, off)
            off += 4
            payload = blob[off:off + nbytes]
            if len(payload) != nbytes:
                raise InputDataError(f"{path}: truncated blob {name}")
            off += nbytes
            (crc,) = struct.unpack_from("<I", blob, off)
            off += 4
            if zlib.crc32(payload) != crc:
                raise InputDataError(f"{path}: CRC mismatch in blob {name}")
            arrays[name] = np.frombuffer(payload, dtype="<f4").reshape(shape).copy()
    except (struct.error, UnicodeDecodeError, ValueError) as exc:
        raise InputDataError(f"{path}: malformed checkpoint: {exc}") from exc

    model = CascadedModel(
        iso=UNet(UNetConfig(**header["iso"])),
        dir=UNet(UNetConfig(**header["dir"])),
    )
    for net_name, net in (("iso", model.iso), ("dir", model.dir)):
        snap = {}
        for name in net.state_arrays():
            key = f"{net_name}.{name}"
            if key not in arrays:
                raise InputDataError(f"{path}: missing blob {key}")
            snap[name] = arrays[key]
        net.load_snapshot(snap)
    return model
