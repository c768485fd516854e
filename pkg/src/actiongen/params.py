"""Parameter registry, Gaussian initialization, and the checkpoint format.

Checkpoint files are a single deterministic binary: one JSON header line
(version, metadata, sorted tensor directory with offsets) followed by the
raw little-endian float64 payload. Parameter names follow the
``<model>.<block>.<index>.<tensor>`` scheme, e.g.
``generator.encoder.0.attn.wq`` or ``d1.conv.2.kernel``.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

from .diffcore import DTYPE, ConfigError, NormState, Tensor

CHECKPOINT_VERSION = 1
_MAGIC = "actiongen-checkpoint"

INIT_STD = 0.02


def gaussian_init(rng: np.random.Generator, shape, std: float = INIT_STD) -> np.ndarray:
    return rng.normal(0.0, std, size=shape).astype(DTYPE)


class ParamStore:
    """Ordered registry of trainable tensors and norm states.

    Creation order is deterministic, so a fixed seed reproduces parameters
    bit for bit. Group selection is by name prefix, which is also how the
    generator and critic parameters share one checkpoint file.
    """

    def __init__(self, rng: np.random.Generator):
        self.rng = rng
        self.params: dict[str, Tensor] = {}
        self.norms: dict[str, NormState] = {}

    def param(self, name: str, shape, std: float = INIT_STD, value: np.ndarray | None = None) -> Tensor:
        if name in self.params:
            raise ConfigError(f"duplicate parameter name: {name}")
        if value is None:
            value = gaussian_init(self.rng, shape, std)
        t = Tensor(np.array(value, dtype=DTYPE), requires_grad=True)
        if t.shape != tuple(shape):
            raise ConfigError(f"parameter {name}: value shape {t.shape} != declared {tuple(shape)}")
        self.params[name] = t
        return t

    def norm_state(self, name: str, num_features: int, **kwargs) -> NormState:
        if name in self.norms:
            raise ConfigError(f"duplicate norm state name: {name}")
        st = NormState(num_features=num_features, **kwargs)
        self.norms[name] = st
        return st

    def group(self, prefix: str) -> dict[str, Tensor]:
        return {k: v for k, v in self.params.items() if k.startswith(prefix)}

    def train(self):
        for st in self.norms.values():
            st.train()

    def eval(self):
        for st in self.norms.values():
            st.eval()

    def set_track_stats(self, flag: bool):
        for st in self.norms.values():
            st.track_stats = flag

    def zero_grads(self):
        for p in self.params.values():
            p.zero_grad()

    def num_params(self, prefix: str = "") -> int:
        return sum(p.size for k, p in self.params.items() if k.startswith(prefix))

    def digest(self, prefix: str = "") -> str:
        """MD5 over the trainable values of a group, for update-isolation checks."""
        h = hashlib.md5()
        for name in sorted(self.params):
            if name.startswith(prefix):
                h.update(name.encode())
                h.update(self.params[name].data.tobytes())
        return h.hexdigest()

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {name: p.data for name, p in self.params.items()}
        for name, st in self.norms.items():
            out[f"{name}.running_mean"] = st.running_mean
            out[f"{name}.running_var"] = st.running_var
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray]):
        expected = set(self.state_arrays())
        got = set(arrays)
        if expected != got:
            missing = sorted(expected - got)[:5]
            extra = sorted(got - expected)[:5]
            raise ConfigError(f"checkpoint does not match model: missing {missing}, unexpected {extra}")
        for name, p in self.params.items():
            arr = np.asarray(arrays[name], dtype=DTYPE)
            if arr.shape != p.shape:
                raise ConfigError(f"checkpoint tensor {name}: shape {arr.shape} != {p.shape}")
            p.data = arr.copy()
        for name, st in self.norms.items():
            st.running_mean = np.asarray(arrays[f"{name}.running_mean"], dtype=DTYPE).copy()
            st.running_var = np.asarray(arrays[f"{name}.running_var"], dtype=DTYPE).copy()


def save_checkpoint(path, arrays: dict[str, np.ndarray], meta: dict | None = None) -> None:
    """Write named float64 arrays plus JSON-safe metadata to one file."""
    path = Path(path)
    directory = {}
    offset = 0
    names = sorted(arrays)
    for name in names:
        arr = np.ascontiguousarray(arrays[name], dtype=DTYPE)
        directory[name] = {"shape": list(arr.shape), "offset": offset, "count": int(arr.size)}
        offset += arr.size
    header = {
        "magic": _MAGIC,
        "version": CHECKPOINT_VERSION,
        "meta": meta or {},
        "tensors": directory,
    }
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8"))
        fh.write(b"\n")
        for name in names:
            fh.write(np.ascontiguousarray(arrays[name], dtype=DTYPE).tobytes())


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    with open(path, "rb") as fh:
        header_line = fh.readline()
        try:
            header = json.loads(header_line.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise ConfigError(f"{path}: not a checkpoint file") from exc
        if header.get("magic") != _MAGIC:
            raise ConfigError(f"{path}: not a checkpoint file")
        if header.get("version") != CHECKPOINT_VERSION:
            raise ConfigError(
                f"{path}: checkpoint version {header.get('version')} unsupported "
                f"(expected {CHECKPOINT_VERSION})"
            )
        blob = fh.read()
    arrays = {}
    for name, entry in header["tensors"].items():
        start = entry["offset"] * 8
        stop = start + entry["count"] * 8
        arr = np.frombuffer(blob[start:stop], dtype=DTYPE).reshape(entry["shape"])
        arrays[name] = arr.copy()
    return arrays, header["meta"]
