"""NNP1 model checkpoints.

Layout: ``b"NNP1\\n"`` + compact JSON header + ``b"\\n"`` + float32 little-endian
payload. The payload holds every parameter in header order, followed by the ADAM
first and second moments in the same order when ``optimizer.adam`` is true.
"""

from pathlib import Path

import numpy as np

from ..io import _split_header, atomic_write, dumps_json
from .layers import Model, build_layer
from .optim import Adam

MAGIC = b"NNP1\n"


def model_to_bytes(model: Model, optimizer: Adam | None = None, meta=None) -> bytes:
    params = model.parameters()
    entries, chunks, offset = [], [], 0
    for name, p in params.items():
        entries.append({"name": name, "shape": list(p.shape), "offset": offset})
        chunks.append(np.asarray(p, dtype="<f4").tobytes())
        offset += p.size
    opt = {"adam": optimizer is not None}
    if optimizer is not None:
        opt.update(optimizer.state())
        for store in (optimizer.m, optimizer.v):
            for name, p in params.items():
                chunks.append(np.asarray(store.get(name, np.zeros_like(p)), dtype="<f4").tobytes())
    header = {
        "format": "NNP1",
        "layers": [layer.config() for layer in model.layers],
        "heads": list(model.heads),
        "input_shift": [float(v) for v in model.input_shift],
        "input_scale": [float(v) for v in model.input_scale],
        "output_shift": model.output_shift,
        "output_scale": model.output_scale,
        "params": entries,
        "optimizer": opt,
        "meta": meta or {},
    }
    return MAGIC + dumps_json(header).encode() + b"\n" + b"".join(chunks)


def model_from_bytes(data: bytes):
    """Return ``(model, optimizer or None, meta)``."""
    h, pos = _split_header(data, MAGIC)
    layers = [build_layer(cfg) for cfg in h["layers"]]
    model = Model(layers, tuple(h["heads"]), h["input_shift"], h["input_scale"],
                  h["output_shift"], h["output_scale"])
    total = sum(int(np.prod(e["shape"])) for e in h["params"])
    flat = np.frombuffer(data, dtype="<f4", offset=pos)

    def unpack(base):
        return {e["name"]: flat[base + e["offset"]: base + e["offset"] + int(np.prod(e["shape"]))]
                .reshape(e["shape"]).astype(np.float32) for e in h["params"]}

    model.set_parameters(unpack(0))
    opt = None
    o = h["optimizer"]
    if o.get("adam"):
        opt = Adam(o["lr"], o["beta1"], o["beta2"], o["epsilon"])
        opt.step_count = o["step_count"]
        opt.m = unpack(total)
        opt.v = unpack(2 * total)
    return model, opt, h["meta"]


def save_model(path, model, optimizer=None, meta=None):
    return atomic_write(path, model_to_bytes(model, optimizer, meta))


def load_model(path):
    return model_from_bytes(Path(path).read_bytes())
