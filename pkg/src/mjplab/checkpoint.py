"""Binary ``MJPC`` checkpoints.

Layout (little-endian)::

    "MJPC" | version u32
    config_len u32 | config text (UTF-8 key = value lines)
    n_params u32 | n_params x tensor
    has_opt u32 | [step u32 | lr f64 | n u32 | n x tensor]   (optimizer moments)

    tensor := name_len u32 | name UTF-8 | ndim u32 | ndim x u32 dims | float64 payload

The config text holds the run configuration followed by ``model.*`` keys
for the architecture (image size, channels, PE/IDX flags).
"""

from __future__ import annotations

import struct

import numpy as np

from .config import RunConfig, parse_pairs, resolve
from .errors import FormatError
from .tensor import AdamWState, Tensor
from .vit import ModelSnapshot, ViTConfig, no_decay_names

MAGIC = b"MJPC"
VERSION = 1

_MODEL_KEYS = ("img_h", "img_w", "channels", "patch", "dim", "depth", "heads", "mlp_ratio",
               "classes", "use_pe", "use_idx", "dal", "dal_hidden")


def _write_tensor(fh, name: str, arr: np.ndarray) -> None:
    raw = name.encode("utf-8")
    fh.write(struct.pack("<I", len(raw)))
    fh.write(raw)
    fh.write(struct.pack("<I", arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


class _Reader:
    def __init__(self, raw: bytes):
        self.raw, self.pos = raw, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise FormatError("truncated checkpoint")
        out = self.raw[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def f64(self) -> float:
        return struct.unpack("<d", self.take(8))[0]

    def tensor(self):
        name = self.take(self.u32()).decode("utf-8")
        ndim = self.u32()
        shape = struct.unpack(f"<{ndim}I", self.take(4 * ndim)) if ndim else ()
        count = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(self.take(8 * count), dtype="<f8").astype(np.float64).reshape(shape)
        return name, arr


def config_text(run: RunConfig | None, model: ViTConfig) -> str:
    text = run.to_text() if run is not None else ""
    md = model.to_dict()
    for k in _MODEL_KEYS:
        v = md[k]
        text += f"model.{k} = {('true' if v else 'false') if isinstance(v, bool) else v}\n"
    return text


def _parse_model(text: str) -> tuple[dict, str]:
    model, rest = {}, []
    for line in text.splitlines():
        if line.startswith("model."):
            key, val = (s.strip() for s in line[len("model."):].split("=", 1))
            model[key] = val
        else:
            rest.append(line)
    kw = {}
    for k in _MODEL_KEYS:
        if k not in model:
            raise FormatError(f"checkpoint config lacks model.{k}")
        v = model[k]
        if k in ("use_pe", "use_idx"):
            kw[k] = v == "true"
        elif k == "dal":
            kw[k] = v
        else:
            kw[k] = int(v)
    return kw, "\n".join(rest)


def save_checkpoint(path, snap: ModelSnapshot, run: RunConfig | None = None,
                    opt: AdamWState | None = None) -> None:
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        blob = config_text(run, snap.config).encode("utf-8")
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(struct.pack("<I", len(snap.params)))
        for name, p in snap.params.items():
            _write_tensor(fh, name, p.data)
        if opt is None:
            fh.write(struct.pack("<I", 0))
            return
        fh.write(struct.pack("<I", 1))
        fh.write(struct.pack("<Id", opt.step, opt.lr))
        fh.write(struct.pack("<I", 2 * len(opt.m)))
        for name in opt.m:
            _write_tensor(fh, "m/" + name, opt.m[name])
            _write_tensor(fh, "v/" + name, opt.v[name])


def load_checkpoint(path):
    """Return ``(snapshot, run_config or None, optimizer state or None)``."""
    with open(path, "rb") as fh:
        r = _Reader(fh.read())
    if r.take(4) != MAGIC:
        raise FormatError("not an MJPC checkpoint")
    version = r.u32()
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    text = r.take(r.u32()).decode("utf-8")
    model_kw, run_text = _parse_model(text)
    model = ViTConfig(**model_kw)
    run = resolve(parse_pairs(run_text)) if run_text.strip() else None
    params = {}
    for _ in range(r.u32()):
        name, arr = r.tensor()
        frozen = name in ("embed.pos", "embed.unk") and not model.use_pe
        params[name] = Tensor(arr, requires_grad=not frozen, name=name)
    snap = ModelSnapshot(model, params)
    opt = None
    if r.u32():
        step, lr = struct.unpack("<Id", r.take(12))
        opt = AdamWState(lr=lr, step=step)
        if run is not None:
            opt.weight_decay = run.weight_decay
            opt.betas = (run.beta1, run.beta2)
        for _ in range(r.u32()):
            name, arr = r.tensor()
            kind, pname = name.split("/", 1)
            (opt.m if kind == "m" else opt.v)[pname] = arr.copy()
        skip = no_decay_names(snap.trainable())
        opt.decay = {k: k not in skip for k in opt.m}
    if r.pos != len(r.raw):
        raise FormatError("trailing bytes after checkpoint payload")
    return snap, run, opt
