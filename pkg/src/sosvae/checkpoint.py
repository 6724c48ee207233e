"""Binary checkpoints.

Layout: the magic ``SOSVAE1``, a little-endian uint64 header length, a JSON
header (sorted keys), then raw little-endian float64 blocks in the order the
header lists them. Nothing time-dependent is stored, so identical runs give
identical bytes.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .autodiff import ParamSet
from .data import ExperimentMask
from .networks import AdamState, Architecture
from .trainers import ModelBundle, TrainConfig

MAGIC = b"SOSVAE1"
FORMAT_VERSION = 1
_LEN = struct.Struct("<Q")
_F64 = np.dtype("<f8")


class CheckpointError(ValueError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CorruptCheckpointError(CheckpointError):
    pass


class ArchitectureMismatchError(CheckpointError):
    pass


def _blocks(bundle: ModelBundle) -> list[tuple[str, np.ndarray]]:
    out = []
    for name in sorted(bundle.encoders):
        out += [(f"encoder/{name}/{k}", v.value) for k, v in bundle.encoders[name].items()]
    out += [(f"decoder/{k}", v.value) for k, v in bundle.decoder.items()]
    out += [(f"classifier/{k}", v.value) for k, v in bundle.classifier.items()]
    for name in sorted(bundle.optimizers):
        st = bundle.optimizers[name]
        for k in sorted(st.m):
            out.append((f"optimizer/{name}/m/{k}", st.m[k]))
            out.append((f"optimizer/{name}/v/{k}", st.v[k]))
    return out


def to_bytes(bundle: ModelBundle) -> bytes:
    blocks = _blocks(bundle)
    optim = {name: {"lr": st.lr, "beta1": st.beta1, "beta2": st.beta2, "eps": st.eps,
                    "decay_epoch": st.decay_epoch, "decay_factor": st.decay_factor,
                    "decay_repeat": st.decay_repeat, "step": st.step}
             for name, st in bundle.optimizers.items()}
    header = {
        "format_version": FORMAT_VERSION,
        "method": bundle.method,
        "arch": bundle.arch.to_dict(),
        "config": bundle.config.to_dict(),
        "seed": bundle.config.seed,
        "blocks": [{"name": n, "shape": list(a.shape)} for n, a in blocks],
        "optimizer": optim,
        "masks": None if bundle.masks is None else [
            {"experiment": m.experiment, "q": m.q, "indices": m.indices.tolist()} for m in bundle.masks],
    }
    hdr = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    payload = b"".join(np.ascontiguousarray(a, dtype=_F64).tobytes() for _, a in blocks)
    return MAGIC + _LEN.pack(len(hdr)) + hdr + payload


def save_checkpoint(bundle: ModelBundle, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(to_bytes(bundle))
    return path


def from_bytes(raw: bytes, expect_arch: dict | None = None) -> ModelBundle:
    if not raw.startswith(MAGIC):
        raise CorruptCheckpointError("missing SOSVAE1 magic")
    pos = len(MAGIC)
    if len(raw) < pos + _LEN.size:
        raise CorruptCheckpointError("truncated before the header length")
    (n,) = _LEN.unpack_from(raw, pos)
    pos += _LEN.size
    if len(raw) < pos + n:
        raise CorruptCheckpointError("truncated header")
    try:
        header = json.loads(raw[pos:pos + n])
    except ValueError as err:
        raise CorruptCheckpointError(f"unreadable header: {err}") from err
    pos += n
    version = header.get("format_version")
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(f"checkpoint format {version}, this build reads {FORMAT_VERSION}")
    arch = Architecture(**header["arch"])
    if expect_arch:
        diff = {k: (getattr(arch, k), v) for k, v in expect_arch.items() if getattr(arch, k) != v}
        if diff:
            detail = ", ".join(f"{k}: checkpoint has {a!r}, requested {b!r}" for k, (a, b) in diff.items())
            raise ArchitectureMismatchError(detail)
    sizes = [int(np.prod(b["shape"], dtype=np.int64)) * _F64.itemsize for b in header["blocks"]]
    if len(raw) - pos != sum(sizes):
        raise CorruptCheckpointError(f"payload is {len(raw) - pos} bytes, header declares {sum(sizes)}")
    arrays = {}
    for b, size in zip(header["blocks"], sizes):
        block = np.frombuffer(raw, dtype=_F64, count=size // _F64.itemsize, offset=pos)
        arrays[b["name"]] = block.reshape(b["shape"]).astype(np.float64)
        pos += size

    def group(prefix: str) -> dict[str, np.ndarray]:
        return {k[len(prefix):]: v for k, v in arrays.items() if k.startswith(prefix)}

    enc_names = sorted({k.split("/")[1] if k.count("/") == 2 else "/".join(k.split("/")[1:3])
                        for k in arrays if k.startswith("encoder/")})
    encoders = {name: ParamSet.from_arrays({k: v for k, v in group(f"encoder/{name}/").items() if "/" not in k})
                for name in enc_names}
    optimizers = {}
    for name, h in header["optimizer"].items():
        st = AdamState(**h)
        st.m = group(f"optimizer/{name}/m/")
        st.v = group(f"optimizer/{name}/v/")
        optimizers[name] = st
    masks = header.get("masks")
    if masks is not None:
        masks = [ExperimentMask(m["experiment"], np.asarray(m["indices"], dtype=np.int64), m["q"]) for m in masks]
    return ModelBundle(method=header["method"], arch=arch, encoders=encoders,
                       decoder=ParamSet.from_arrays(group("decoder/")),
                       classifier=ParamSet.from_arrays(group("classifier/")),
                       config=TrainConfig.from_dict(header["config"]), masks=masks, optimizers=optimizers)


def load_checkpoint(path, expect_arch: dict | None = None) -> ModelBundle:
    return from_bytes(Path(path).read_bytes(), expect_arch)
