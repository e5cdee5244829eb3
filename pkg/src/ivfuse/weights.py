"""Binary weights container and checkpoint persistence.

Layout (all integers little-endian u32):

    magic "FSN1" | version | entry count |
    per entry: name length | UTF-8 name | 4 dims | raw little-endian floats

Version 1 stores float32 payloads and is the interchange format for trained
weights; version 2 stores float64 and carries full-precision training
checkpoints (parameters, ADAM moments, step/epoch counters) so that resuming
reproduces the optimizer trajectory bit for bit.  Network hyperparameters
travel as scalar ``meta.*`` entries, which lets a weights file rebuild its
network without a side channel.  Unknown magic or version is rejected.
"""

from __future__ import annotations

import struct

import numpy as np

from .model import NetConfig, build_network

MAGIC = b"FSN1"
VERSION_F32 = 1
VERSION_F64 = 2
_DTYPES = {VERSION_F32: np.dtype("<f4"), VERSION_F64: np.dtype("<f8")}


class WeightsError(ValueError):
    """A weights file is malformed, truncated or of an unknown version."""


def save_entries(entries, path, version=VERSION_F32):
    """Write named 4-D arrays; entries are sorted by name for determinism."""
    if version not in _DTYPES:
        raise WeightsError(f"unsupported weights version {version}")
    dtype = _DTYPES[version]
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", version, len(entries)))
        for name in sorted(entries):
            arr = np.asarray(entries[name])
            if arr.ndim != 4:
                raise WeightsError(f"entry {name!r} must be 4-D; got shape {arr.shape}")
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<4I", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype=dtype).tobytes())


def load_entries(path):
    """Read back (version, dict name -> array); validates layout strictly."""
    with open(path, "rb") as fh:
        blob = fh.read()

    def take(n, what):
        nonlocal offset
        if offset + n > len(blob):
            raise WeightsError(f"truncated weights file {path}: missing {what}")
        piece = blob[offset : offset + n]
        offset += n
        return piece

    offset = 0
    if take(4, "magic") != MAGIC:
        raise WeightsError(f"{path} is not a weights file (bad magic)")
    version, count = struct.unpack("<II", take(8, "header"))
    if version not in _DTYPES:
        raise WeightsError(f"{path} has unsupported version {version}")
    dtype = _DTYPES[version]
    entries = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<I", take(4, "name length"))
        name = take(name_len, "name").decode("utf-8")
        dims = struct.unpack("<4I", take(16, f"dims of {name!r}"))
        n = int(np.prod(dims))
        arr = np.frombuffer(take(n * dtype.itemsize, f"data of {name!r}"), dtype=dtype)
        entries[name] = arr.reshape(dims).copy()
    if offset != len(blob):
        raise WeightsError(f"{path} has {len(blob) - offset} trailing bytes")
    return version, entries


def _scalar_entry(value):
    return np.full((1, 1, 1, 1), float(value))


_META_FIELDS = ("base_channels", "levels", "kernel_size", "in_channels_visible",
                "in_channels_ir", "out_channels")


def _meta_entries(cfg):
    return {f"meta.{f}": _scalar_entry(getattr(cfg, f)) for f in _META_FIELDS}


def _config_from_entries(entries, path):
    kwargs = {}
    for f in _META_FIELDS:
        key = f"meta.{f}"
        if key not in entries:
            raise WeightsError(f"{path} lacks required entry {key!r}")
        kwargs[f] = int(entries[key].reshape(()))
    return NetConfig(**kwargs)


def save_network(net, path):
    """Interchange save: float32 parameters plus network meta."""
    entries = {name: p.data for name, p in net.params.items()}
    entries.update(_meta_entries(net.config))
    save_entries(entries, path, version=VERSION_F32)


def load_network(path, dtype=np.float64):
    """Rebuild a FusionNet from a version-1 or version-2 weights file."""
    _, entries = load_entries(path)
    cfg = _config_from_entries(entries, path)
    net = build_network(cfg, seed=0, dtype=dtype)
    _load_params(net, entries, path, dtype)
    return net


def _load_params(net, entries, path, dtype):
    for name, p in net.params.items():
        if name not in entries:
            raise WeightsError(f"{path} lacks parameter {name!r}")
        arr = entries[name]
        if arr.shape != p.data.shape:
            raise WeightsError(
                f"{path} parameter {name!r} has shape {arr.shape}; "
                f"expected {p.data.shape}"
            )
        p.data = arr.astype(dtype, copy=True)


def save_checkpoint(net, adam, epoch, path):
    """Full-precision training checkpoint (weights version 2)."""
    entries = {name: p.data for name, p in net.params.items()}
    entries.update(_meta_entries(net.config))
    for name, m in adam.m.items():
        entries[f"opt.m.{name}"] = m
    for name, v in adam.v.items():
        entries[f"opt.v.{name}"] = v
    entries["opt.t"] = _scalar_entry(adam.t)
    entries["meta.epoch"] = _scalar_entry(epoch)
    save_entries(entries, path, version=VERSION_F64)


def load_checkpoint(path):
    """Returns (net, AdamState, completed epochs) from a version-2 file."""
    from .trainer import AdamState  # local import: trainer depends on this module

    version, entries = load_entries(path)
    if version != VERSION_F64:
        raise WeightsError(f"{path} is not a training checkpoint (version {version})")
    cfg = _config_from_entries(entries, path)
    net = build_network(cfg, seed=0)
    _load_params(net, entries, path, np.float64)
    m, v = {}, {}
    for name, p in net.params.items():
        for store, prefix in ((m, "opt.m."), (v, "opt.v.")):
            key = prefix + name
            if key not in entries:
                raise WeightsError(f"{path} lacks optimizer entry {key!r}")
            if entries[key].shape != p.data.shape:
                raise WeightsError(f"{path} optimizer entry {key!r} has a wrong shape")
            store[name] = entries[key].astype(np.float64, copy=True)
    if "opt.t" not in entries or "meta.epoch" not in entries:
        raise WeightsError(f"{path} lacks opt.t/meta.epoch entries")
    adam = AdamState(m=m, v=v, t=int(entries["opt.t"].reshape(())))
    epoch = int(entries["meta.epoch"].reshape(()))
    return net, adam, epoch
