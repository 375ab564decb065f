"""Versioned binary checkpoints of the full learner state.

Layout: ``b"TSCK"``, u32 version, u64 header length, a UTF-8 JSON header, then
the arrays listed in the header as contiguous little-endian float64 (bool
arrays are stored as 0/1 floats). The header records every array's name,
shape and byte offset, plus the hyperparameters and scalar state.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import FormatError
from .model import AdamState, Hyperparameters, Model, NodeParams, Priors, SuffStats

MAGIC = b"TSCK"
VERSION = 1
_PREFIX = struct.Struct("<4sIQ")

_ARRAYS = {
    "params": ("mu", "L", "a", "A"),
    "stats": ("N_hat", "n_hat", "S1", "S2", "alpha"),
    "priors": ("mu0", "Psi", "lam", "nu", "mu_bar", "Sigma_bar", "eta"),
    "opt": ("m_a", "v_a", "m_mu", "v_mu", "m_L", "v_L"),
}


def _collect(model: Model):
    groups = {"params": model.params, "stats": model.stats,
              "priors": model.priors, "opt": model.opt}
    for group, names in _ARRAYS.items():
        for name in names:
            yield f"{group}.{name}", np.asarray(getattr(groups[group], name), dtype=np.float64)
    yield "dead", model.dead.astype(np.float64)


def save_checkpoint(model: Model, path) -> None:
    entries = []
    blobs = []
    offset = 0
    for key, arr in _collect(model):
        raw = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        entries.append({"name": key, "shape": list(arr.shape), "offset": offset})
        blobs.append(raw)
        offset += len(raw)
    header = {
        "format": "tilestream-checkpoint",
        "hyperparameters": model.hyper.to_dict(),
        "t": model.t,
        "steps_since_m": model.steps_since_m,
        "adam_steps": model.opt.steps,
        "n_teleports": model.n_teleports,
        "rng_state": model.rng.bit_generator.state,
        "arrays": entries,
        "payload_bytes": offset,
    }
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(_PREFIX.pack(MAGIC, VERSION, len(head)))
        fh.write(head)
        for raw in blobs:
            fh.write(raw)
    tmp.replace(path)


def read_header(path) -> dict:
    with open(path, "rb") as fh:
        prefix = fh.read(_PREFIX.size)
        if len(prefix) < _PREFIX.size:
            raise FormatError(f"{path}: truncated checkpoint")
        magic, version, hlen = _PREFIX.unpack(prefix)
        if magic != MAGIC:
            raise FormatError(f"{path}: not a checkpoint (magic {magic!r})")
        if version != VERSION:
            raise FormatError(f"{path}: unsupported checkpoint version {version}")
        head = fh.read(hlen)
    if len(head) != hlen:
        raise FormatError(f"{path}: truncated checkpoint header")
    try:
        return json.loads(head.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: corrupt checkpoint header: {exc}") from None


def load_checkpoint(path, backend=None) -> Model:
    path = Path(path)
    raw = path.read_bytes()
    header = read_header(path)
    base = _PREFIX.size + _PREFIX.unpack_from(raw)[2]
    if len(raw) - base != header["payload_bytes"]:
        raise FormatError(f"{path}: payload size does not match header")

    arrays = {}
    for entry in header["arrays"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = base + entry["offset"]
        if start + 8 * count > len(raw):
            raise FormatError(f"{path}: array {entry['name']} overruns the payload")
        arrays[entry["name"]] = np.frombuffer(
            raw, dtype="<f8", count=count, offset=start).reshape(shape).astype(np.float64)

    def group(name, cls):
        return cls(**{f: arrays[f"{name}.{f}"] for f in _ARRAYS[name]})

    try:
        hyper = Hyperparameters.from_dict(header["hyperparameters"])
        params = group("params", NodeParams)
        stats = group("stats", SuffStats)
        priors = group("priors", Priors)
        opt = group("opt", AdamState)
    except KeyError as exc:
        raise FormatError(f"{path}: missing checkpoint field {exc}") from None
    opt.steps = int(header["adam_steps"])
    for arr in (params.mu, params.L, params.A, stats.alpha):
        arr.flags.writeable = False

    rng = np.random.default_rng()
    rng.bit_generator.state = header["rng_state"]
    model = Model(hyper, params, priors, stats, opt, t=header["t"],
                  dead=arrays["dead"] > 0.5, rng=rng, backend=backend,
                  steps_since_m=header["steps_since_m"])
    model.n_teleports = int(header.get("n_teleports", 0))
    return model
