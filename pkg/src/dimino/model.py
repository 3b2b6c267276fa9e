"""The dimension-informed operator model.

Pipeline: LayerNorm -> FFW_pre -> DimGate -> spectral block stack -> head,
with redimensionalization multiplying the dimensionless prediction by the
target characteristic scales.  Setting ``use_dimnorm=False`` builds the
baseline twin: raw field and constant channels in, physical prediction out,
no per-sample scaling anywhere.
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional

import numpy as np

from . import autodiff as ad
from . import dims
from .autodiff import Tape, Tensor
from .data import Sample

CKPT_MAGIC = b"DINOCKPT"
CKPT_VERSION = 1


class ModelError(Exception):
    pass


class LengthMismatch(ModelError):
    pass


class ModeOverflow(ModelError):
    pass


class FieldSetMismatch(ModelError):
    pass


class CorruptCheckpoint(ModelError):
    pass


@dataclass(frozen=True)
class DimGateConfig:
    """Gate layout: m inputs block-expanded over (1-gamma)*n channels."""

    n: int
    m: int
    gamma: float = 0.5
    use_log_inputs: bool = True

    def __post_init__(self):
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError(f"gamma must lie in [0, 1], got {self.gamma}")

    @property
    def l(self) -> int:
        return ad.gate_block_length(self.n, self.m, self.gamma)


def expand_gate(c: np.ndarray, cfg: DimGateConfig) -> np.ndarray:
    """Expand an m-vector to n channels: block repeats, then ones."""
    c = np.asarray(c, dtype=np.float64)
    if c.shape != (cfg.m,):
        raise LengthMismatch(f"expected {cfg.m} gate inputs, got shape {c.shape}")
    out = np.ones(cfg.n)
    l = cfg.l
    if l > 0:
        idx = np.arange(cfg.m * l) // l
        out[: cfg.m * l] = c[idx]
    return out


@dataclass
class ModelConfig:
    system: str
    in_fields: List[str]
    target_fields: List[str]
    rank: int
    width: int = 32
    depth: int = 4
    modes: int = 12
    gamma: float = 0.5
    use_dimnorm: bool = True
    expose_constants: bool = True  # baseline twin only
    gate_ffw: bool = True
    gate_log_inputs: bool = True
    postprocess_order: str = "phi-last"  # or "def1"
    scale_mode: str = "per-sample"  # or "per-dataset"
    precision: str = "f64"
    init_seed: int = 0

    def __post_init__(self):
        if self.depth < 1:
            raise ValueError("depth must be >= 1")
        if self.postprocess_order not in ("phi-last", "def1"):
            raise ValueError(f"bad postprocess_order {self.postprocess_order!r}")
        if self.precision not in ("f64", "f32"):
            raise ValueError(f"bad precision {self.precision!r}")

    @property
    def m(self) -> int:
        return len(dims.REGISTRY[self.system]) if self.use_dimnorm else 0

    @property
    def constant_names(self) -> List[str]:
        return sorted(
            n
            for n in dims.SCALE_DIMS[self.system]
            if n not in ("x", "t") and n not in self.in_fields
        )

    @property
    def in_channels(self) -> int:
        c = len(self.in_fields)
        if not self.use_dimnorm and self.expose_constants:
            # constants + prediction-interval broadcast channels
            c += len(self.constant_names) + 1
        return c

    @property
    def out_channels(self) -> int:
        return len(self.target_fields)

    @property
    def mode_shape(self) -> tuple:
        if self.rank == 1:
            return (self.modes,)
        return (2 * self.modes, self.modes)

    @property
    def dtype(self):
        return np.float64 if self.precision == "f64" else np.float32

    @property
    def cdtype(self):
        return np.complex128 if self.precision == "f64" else np.complex64


def _fan_in_uniform(rng, shape, fan_in):
    bound = 1.0 / np.sqrt(max(fan_in, 1))
    return rng.uniform(-bound, bound, size=shape)


def init_params(config: ModelConfig) -> Dict[str, np.ndarray]:
    """Parameters in declaration (checkpoint) order."""
    rng = np.random.default_rng(config.init_seed)
    n, cin, cout = config.width, config.in_channels, config.out_channels
    p: Dict[str, np.ndarray] = {}
    p["pre_w1"] = _fan_in_uniform(rng, (cin, n), cin)
    p["pre_b1"] = np.zeros(n)
    p["pre_w2"] = _fan_in_uniform(rng, (n, n), n)
    p["pre_b2"] = np.zeros(n)
    if config.use_dimnorm and config.gate_ffw and config.m > 0:
        m = config.m
        p["cfw_w1"] = _fan_in_uniform(rng, (m, m), m)
        p["cfw_b1"] = np.zeros(m)
        p["cfw_w2"] = _fan_in_uniform(rng, (m, m), m)
        p["cfw_b2"] = np.ones(m)  # start near an all-pass gate
    spec_scale = 1.0 / (n * int(np.prod(config.mode_shape)))
    for i in range(config.depth):
        shape = (n, n) + config.mode_shape
        p[f"block{i}_spec"] = spec_scale * (
            rng.standard_normal(shape) + 1j * rng.standard_normal(shape)
        )
        p[f"block{i}_byp_w"] = _fan_in_uniform(rng, (n, n), n)
        p[f"block{i}_byp_b"] = np.zeros(n)
    p["head_w1"] = _fan_in_uniform(rng, (n, n), n)
    p["head_b1"] = np.zeros(n)
    p["head_w2"] = _fan_in_uniform(rng, (n, cout), n)
    p["head_b2"] = np.zeros(cout)
    if config.postprocess_order == "def1":
        p["post2_w1"] = _fan_in_uniform(rng, (cout, cout), cout)
        p["post2_b1"] = np.zeros(cout)
        p["post2_w2"] = _fan_in_uniform(rng, (cout, cout), cout)
        p["post2_b2"] = np.zeros(cout)
    for k, v in p.items():
        p[k] = v.astype(config.cdtype if np.iscomplexobj(v) else config.dtype)
    return p


@dataclass
class ForwardResult:
    tape: Tape
    output: Tensor
    u_star: Tensor
    leaves: Dict[str, Tensor]
    out_scales: np.ndarray


class DimINOModel:
    def __init__(self, config: ModelConfig, params: Dict[str, np.ndarray] = None):
        self.config = config
        self.params = params if params is not None else init_params(config)
        # shared field scales, populated when scale_mode == "per-dataset"
        self.dataset_field_scales: Optional[dict] = None

    # -- characteristic scales -------------------------------------------

    def sample_scales(self, sample: Sample) -> dims.CharacteristicScales:
        scales = dims.characteristic_scales_from_sample(sample)
        if self.config.scale_mode == "per-dataset" and self.dataset_field_scales:
            scales.update(self.dataset_field_scales)
        return scales

    def _gate_inputs(self, samples):
        spec = dims.REGISTRY[self.config.system]
        return np.stack(
            [dims.compute_dimensionless(spec, self.sample_scales(s)) for s in samples]
        )

    def _out_scales(self, samples):
        return np.stack(
            [
                [self.sample_scales(s)[name].value for name in self.config.target_fields]
                for s in samples
            ]
        )

    def _input_array(self, samples):
        cfg = self.config
        for s in samples:
            if set(cfg.in_fields) - set(s.fields):
                raise FieldSetMismatch(
                    f"sample fields {sorted(s.fields)} != model fields {cfg.in_fields}"
                )
        chans = []
        for name in cfg.in_fields:
            arrs = []
            for s in samples:
                arr = s.fields[name]
                if cfg.use_dimnorm:
                    # divide by the characteristic scale so the channel is
                    # dimensionless and exactly invariant under similarity
                    # transforms by powers of two
                    arr = arr / self.sample_scales(s)[name].value
                arrs.append(arr)
            chans.append(np.stack(arrs))
        if not cfg.use_dimnorm and cfg.expose_constants:
            shape = chans[0].shape
            for name in cfg.constant_names:
                vals = np.array([s.constants[name].value for s in samples])
                chans.append(np.broadcast_to(vals.reshape(-1, *[1] * (len(shape) - 1)), shape).copy())
            tvals = np.array([s.t_final for s in samples])
            chans.append(np.broadcast_to(tvals.reshape(-1, *[1] * (len(shape) - 1)), shape).copy())
        return np.stack(chans, axis=-1).astype(cfg.dtype)

    # -- forward ----------------------------------------------------------

    def forward(self, samples: List[Sample], train: bool = False,
                tape: Tape = None, leaves: Dict[str, Tensor] = None) -> ForwardResult:
        cfg = self.config
        points = samples[0].grid.points
        if cfg.modes > points[-1] // 2 or (cfg.rank == 2 and 2 * cfg.modes > points[0]):
            raise ModeOverflow(
                f"{cfg.modes} retained modes exceed grid {points}"
            )
        spatial_axes = tuple(range(1, 1 + cfg.rank))
        spatial = samples[0].grid.points
        if tape is None:
            tape = Tape()
            leaves = {
                name: tape.leaf(arr, requires_grad=train)
                for name, arr in self.params.items()
            }
        x = tape.leaf(self._input_array(samples))

        if cfg.use_dimnorm:
            x = ad.layernorm(x, spatial_axes)
        x = ad.linear(x, leaves["pre_w1"], leaves["pre_b1"])
        x = ad.gelu(x)
        x = ad.linear(x, leaves["pre_w2"], leaves["pre_b2"])

        if cfg.use_dimnorm and cfg.m > 0:
            c = self._gate_inputs(samples)
            if cfg.gate_log_inputs:
                c = np.log(c)
            cl = tape.leaf(c.astype(cfg.dtype))
            if cfg.gate_ffw:
                cl = ad.linear(cl, leaves["cfw_w1"], leaves["cfw_b1"])
                cl = ad.gelu(cl)
                cl = ad.linear(cl, leaves["cfw_w2"], leaves["cfw_b2"])
            gate = ad.gate_expand(cl, cfg.width, cfg.gamma)
            x = ad.gate_mul(x, gate)

        for i in range(cfg.depth):
            xh = ad.rfftn(x, spatial_axes)
            y = ad.mode_mix(xh, leaves[f"block{i}_spec"], (cfg.modes,) * cfg.rank)
            y = ad.irfftn(y, spatial_axes, spatial)
            y = ad.add(y, ad.linear(x, leaves[f"block{i}_byp_w"], leaves[f"block{i}_byp_b"]))
            x = ad.gelu(y) if i < cfg.depth - 1 else y

        x = ad.linear(x, leaves["head_w1"], leaves["head_b1"])
        x = ad.gelu(x)
        u_star = ad.linear(x, leaves["head_w2"], leaves["head_b2"])

        if cfg.use_dimnorm:
            out_scales = self._out_scales(samples)
            sc = out_scales.reshape(
                len(samples), *[1] * cfg.rank, cfg.out_channels
            ).astype(cfg.dtype)
            out = ad.const_mul(u_star, sc)
            if cfg.postprocess_order == "def1":
                out = ad.linear(out, leaves["post2_w1"], leaves["post2_b1"])
                out = ad.gelu(out)
                out = ad.linear(out, leaves["post2_w2"], leaves["post2_b2"])
        else:
            out_scales = np.ones((len(samples), cfg.out_channels))
            out = u_star
        return ForwardResult(tape, out, u_star, leaves, out_scales)

    def predict(self, samples: List[Sample]) -> np.ndarray:
        """Physical-space prediction, shape (B, *grid, out_channels)."""
        return self.forward(samples).output.data

    def dimnorm_forward(self, samples: List[Sample]):
        """Gated latent of the input stage plus the captured scales."""
        cfg = self.config
        spatial_axes = tuple(range(1, 1 + cfg.rank))
        tape = Tape()
        x = tape.leaf(self._input_array(samples))
        if cfg.use_dimnorm:
            x = ad.layernorm(x, spatial_axes)
        x = ad.linear(x, tape.leaf(self.params["pre_w1"]), tape.leaf(self.params["pre_b1"]))
        x = ad.gelu(x)
        x = ad.linear(x, tape.leaf(self.params["pre_w2"]), tape.leaf(self.params["pre_b2"]))
        if cfg.use_dimnorm and cfg.m > 0:
            c = self._gate_inputs(samples)
            if cfg.gate_log_inputs:
                c = np.log(c)
            cl = tape.leaf(c.astype(cfg.dtype))
            if cfg.gate_ffw:
                cl = ad.linear(cl, tape.leaf(self.params["cfw_w1"]), tape.leaf(self.params["cfw_b1"]))
                cl = ad.gelu(cl)
                cl = ad.linear(cl, tape.leaf(self.params["cfw_w2"]), tape.leaf(self.params["cfw_b2"]))
            gate = ad.gate_expand(cl, cfg.width, cfg.gamma)
            x = ad.gate_mul(x, gate)
        scales = [self.sample_scales(s) for s in samples]
        return x.data, scales


def spectral_block_forward(x: np.ndarray, spec_w: np.ndarray, byp_w: np.ndarray,
                           byp_b: np.ndarray, modes, activation: str = "gelu"
                           ) -> np.ndarray:
    """Standalone spectral block on (B, *spatial, C) input, for oracles."""
    rank = len(modes)
    spatial_axes = tuple(range(1, 1 + rank))
    spatial = x.shape[1:1 + rank]
    tape = Tape()
    xl = tape.leaf(x)
    xh = ad.rfftn(xl, spatial_axes)
    y = ad.mode_mix(xh, tape.leaf(spec_w), modes)
    y = ad.irfftn(y, spatial_axes, spatial)
    y = ad.add(y, ad.linear(xl, tape.leaf(byp_w), tape.leaf(byp_b)))
    if activation == "gelu":
        y = ad.gelu(y)
    return y.data


# -- checkpoint I/O -------------------------------------------------------

_DTYPE_CODES = {"float64": 0, "float32": 1, "complex128": 2, "complex64": 3}
_DTYPE_NAMES = {v: k for k, v in _DTYPE_CODES.items()}


def save_model(model: DimINOModel, path) -> None:
    blob = bytearray()
    blob += CKPT_MAGIC
    blob += struct.pack("<I", CKPT_VERSION)
    cfg_json = json.dumps(asdict(model.config), sort_keys=True).encode()
    blob += struct.pack("<I", len(cfg_json)) + cfg_json
    for name, arr in model.params.items():
        nb = name.encode()
        blob += struct.pack("<H", len(nb)) + nb
        blob += struct.pack("<BB", _DTYPE_CODES[arr.dtype.name], arr.ndim)
        blob += struct.pack(f"<{arr.ndim}I", *arr.shape)
        blob += np.ascontiguousarray(arr).tobytes()
    digest = hashlib.blake2b(bytes(blob), digest_size=8).digest()
    with open(path, "wb") as fh:
        fh.write(bytes(blob) + digest)


def load_model(path) -> DimINOModel:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < len(CKPT_MAGIC) + 12 or raw[: len(CKPT_MAGIC)] != CKPT_MAGIC:
        raise CorruptCheckpoint(f"{path}: bad or truncated magic")
    body, digest = raw[:-8], raw[-8:]
    if hashlib.blake2b(body, digest_size=8).digest() != digest:
        raise CorruptCheckpoint(f"{path}: content hash mismatch")
    off = len(CKPT_MAGIC)
    (version,) = struct.unpack_from("<I", body, off)
    off += 4
    if version != CKPT_VERSION:
        raise CorruptCheckpoint(
            f"{path}: checkpoint version {version}, expected {CKPT_VERSION}"
        )
    (cfg_len,) = struct.unpack_from("<I", body, off)
    off += 4
    config = ModelConfig(**json.loads(body[off:off + cfg_len].decode()))
    off += cfg_len
    params = {}
    try:
        while off < len(body):
            (nlen,) = struct.unpack_from("<H", body, off)
            off += 2
            name = body[off:off + nlen].decode()
            off += nlen
            code, ndim = struct.unpack_from("<BB", body, off)
            off += 2
            shape = struct.unpack_from(f"<{ndim}I", body, off)
            off += 4 * ndim
            dtype = np.dtype(_DTYPE_NAMES[code])
            nbytes = int(np.prod(shape)) * dtype.itemsize
            params[name] = np.frombuffer(
                body[off:off + nbytes], dtype=dtype
            ).reshape(shape).copy()
            off += nbytes
    except (struct.error, KeyError, ValueError) as exc:
        raise CorruptCheckpoint(f"{path}: malformed parameter table") from exc
    return DimINOModel(config, params)
