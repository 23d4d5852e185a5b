"""Flat binary checkpoint container.

Layout: a UTF-8 text header (model geometry, one ``key=value`` per line,
terminated by a blank line) followed by one record per parameter tensor:

    uint32 name length | name bytes | uint32 ndim | uint32 dims... | f64 payload

All integers and floats are little-endian. Parameters are written in
registry order, so identically trained models serialize to identical
bytes.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .embed import ViewGeometry
from .encoder import EncoderConfig
from .errors import FormatError
from .model import IntentModel, ModelConfig

MAGIC = "driverintent-checkpoint 1"


def save_checkpoint(model: IntentModel, path) -> None:
    cfg = model.config
    enc = cfg.encoder
    lines = [
        MAGIC,
        f"n_layers={enc.n_layers}",
        f"dim={enc.dim}",
        f"n_heads={enc.n_heads}",
        f"n_mem={enc.n_mem}",
        f"mlp_ratio={enc.mlp_ratio!r}",
        f"n_classes={enc.n_classes}",
        f"patch_size={cfg.patch_size}",
        "views=" + ";".join(f"{g.channels}x{g.height}x{g.width}" for g in cfg.views),
        "classes=" + ",".join(cfg.class_names),
        f"tensors={len(model.params)}",
    ]
    with open(path, "wb") as fh:
        # Blank line terminates the text header; binary records follow.
        fh.write(("\n".join(lines) + "\n\n").encode("utf-8"))
        for name, tensor in model.params.items():
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<I", tensor.values.ndim))
            fh.write(struct.pack(f"<{tensor.values.ndim}I", *tensor.shape))
            fh.write(tensor.values.astype("<f8").tobytes())


def _read_exact(fh, n: int, path) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise FormatError(f"truncated checkpoint (wanted {n} bytes, got {len(data)})",
                          path)
    return data


def load_checkpoint(path) -> IntentModel:
    path = Path(path)
    with open(path, "rb") as fh:
        header_bytes = b""
        while not header_bytes.endswith(b"\n\n"):
            chunk = fh.read(1)
            if not chunk:
                raise FormatError("unterminated header", path)
            header_bytes += chunk
            if len(header_bytes) > 65536:
                raise FormatError("header too large", path)
        try:
            lines = header_bytes.decode("utf-8").strip().split("\n")
        except UnicodeDecodeError as exc:
            raise FormatError(f"header is not UTF-8: {exc}", path) from exc
        if lines[0] != MAGIC:
            raise FormatError(f"bad magic line {lines[0]!r}", path)
        fields = {}
        for line in lines[1:]:
            key, _, value = line.partition("=")
            fields[key] = value
        try:
            enc = EncoderConfig(
                n_layers=int(fields["n_layers"]),
                dim=int(fields["dim"]),
                n_heads=int(fields["n_heads"]),
                n_mem=int(fields["n_mem"]),
                mlp_ratio=float(fields["mlp_ratio"]),
                n_classes=int(fields["n_classes"]),
            )
            views = tuple(
                ViewGeometry(*(int(x) for x in spec.split("x")))
                for spec in fields["views"].split(";")
            )
            config = ModelConfig(
                views=views,
                patch_size=int(fields["patch_size"]),
                encoder=enc,
                class_names=tuple(fields["classes"].split(",")),
            )
            n_tensors = int(fields["tensors"])
        except (KeyError, ValueError) as exc:
            raise FormatError(f"bad header field: {exc}", path) from exc

        model = IntentModel.create(config, seed=0)
        loaded: dict[str, np.ndarray] = {}
        for _ in range(n_tensors):
            (name_len,) = struct.unpack("<I", _read_exact(fh, 4, path))
            name = _read_exact(fh, name_len, path).decode("utf-8")
            (ndim,) = struct.unpack("<I", _read_exact(fh, 4, path))
            dims = struct.unpack(f"<{ndim}I", _read_exact(fh, 4 * ndim, path))
            count = int(np.prod(dims, dtype=np.int64)) if ndim else 1
            payload = _read_exact(fh, 8 * count, path)
            # frombuffer yields a read-only view; parameters must be writable.
            loaded[name] = np.frombuffer(payload, dtype="<f8").reshape(dims).copy()
        if fh.read(1):
            raise FormatError("trailing bytes after last tensor record", path)

    if set(loaded) != set(model.params):
        missing = set(model.params) - set(loaded)
        extra = set(loaded) - set(model.params)
        raise FormatError(
            f"parameter names mismatch (missing {sorted(missing)}, "
            f"unexpected {sorted(extra)})", path,
        )
    for name, tensor in model.params.items():
        if loaded[name].shape != tensor.values.shape:
            raise FormatError(
                f"tensor {name} has shape {loaded[name].shape}, expected "
                f"{tensor.values.shape}", path,
            )
        if not np.all(np.isfinite(loaded[name])):
            raise FormatError(f"tensor {name} contains non-finite values", path)
        tensor.values = np.ascontiguousarray(loaded[name])
    return model
