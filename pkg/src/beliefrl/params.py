"""Flat parameter vector with named slices, plus checkpoint I/O.

A checkpoint is two files: ``<stem>.manifest`` (plain ``key = value`` lines)
and ``<stem>.bin`` (the flat vector as little-endian float64).
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .autodiff import ContractError, Tape, Var

CHECKPOINT_FORMAT = "beliefrl-checkpoint/1"


class IntegrityError(RuntimeError):
    """Checkpoint blob does not match its manifest."""


@dataclass(frozen=True)
class ParamSpec:
    name: str
    shape: tuple[int, ...]
    # "uniform" (±1/sqrt(fan_in)), "zeros", or ("const", value)
    init: object = "uniform"


class ParamStore:
    """Named, disjoint, contiguous slices over one float64 vector."""

    def __init__(self, specs: list[ParamSpec]) -> None:
        names = [s.name for s in specs]
        if len(set(names)) != len(names):
            raise ContractError("duplicate parameter names")
        self.specs = tuple(specs)
        self.layout: dict[str, tuple[int, tuple[int, ...]]] = {}
        offset = 0
        for s in specs:
            self.layout[s.name] = (offset, tuple(s.shape))
            offset += int(np.prod(s.shape, dtype=np.int64))
        self.size = offset
        self.vector = np.zeros(self.size)

    def __contains__(self, name: str) -> bool:
        return name in self.layout

    def view(self, name: str) -> np.ndarray:
        off, shape = self.layout[name]
        n = int(np.prod(shape, dtype=np.int64))
        return self.vector[off : off + n].reshape(shape)

    def initialize(self, rng: np.random.Generator) -> None:
        for s in self.specs:
            v = self.view(s.name)
            if s.init == "uniform":
                fan_in = s.shape[-1] if len(s.shape) > 1 else 1
                bound = 1.0 / math.sqrt(fan_in)
                v[...] = rng.uniform(-bound, bound, size=s.shape)
            elif s.init == "zeros":
                v[...] = 0.0
            elif isinstance(s.init, tuple) and s.init[0] == "const":
                v[...] = s.init[1]
            else:
                raise ContractError(f"unknown init {s.init!r} for {s.name}")

    def flatten_grads(self, grads: dict[str, np.ndarray]) -> np.ndarray:
        flat = np.zeros(self.size)
        for name, g in grads.items():
            off, shape = self.layout[name]
            n = int(np.prod(shape, dtype=np.int64))
            flat[off : off + n] = np.asarray(g).reshape(-1)
        return flat

    def bind(self, tape: Tape | None) -> dict[str, Var]:
        """Expose every slice as a Var; leaves on `tape` if given, constants otherwise."""
        if tape is None:
            return {s.name: Var(self.view(s.name)) for s in self.specs}
        return {s.name: tape.leaf(s.name, self.view(s.name)) for s in self.specs}

    def copy(self) -> ParamStore:
        other = ParamStore(list(self.specs))
        other.vector[:] = self.vector
        return other


def save_checkpoint(store: ParamStore, stem: Path | str, meta: dict[str, object]) -> tuple[Path, Path]:
    stem = Path(stem)
    stem.parent.mkdir(parents=True, exist_ok=True)
    blob = store.vector.astype("<f8").tobytes()
    bin_path = stem.with_suffix(".bin")
    man_path = stem.with_suffix(".manifest")
    bin_path.write_bytes(blob)
    lines = [
        f"format = {CHECKPOINT_FORMAT}",
        f"n_params = {store.size}",
        f"blob = {bin_path.name}",
        f"blob_sha256 = {hashlib.sha256(blob).hexdigest()}",
    ]
    for k in sorted(meta):
        lines.append(f"meta.{k} = {meta[k]}")
    for s in store.specs:
        off, shape = store.layout[s.name]
        lines.append(f"param.{s.name} = {off} {'x'.join(str(d) for d in shape)}")
    man_path.write_text("\n".join(lines) + "\n")
    return man_path, bin_path


def read_manifest(path: Path | str) -> dict[str, str]:
    out: dict[str, str] = {}
    for line in Path(path).read_text().splitlines():
        if not line.strip() or line.startswith("#"):
            continue
        key, _, val = line.partition("=")
        out[key.strip()] = val.strip()
    return out


def load_checkpoint(stem: Path | str, specs: list[ParamSpec] | None = None) -> tuple[ParamStore, dict[str, str]]:
    """Load and verify a checkpoint. If `specs` is given the layout must match it."""
    stem = Path(stem)
    if stem.suffix in (".manifest", ".bin"):
        stem = stem.with_suffix("")
    man = read_manifest(stem.with_suffix(".manifest"))
    if man.get("format") != CHECKPOINT_FORMAT:
        raise IntegrityError(f"unsupported checkpoint format {man.get('format')!r}")
    blob = (stem.parent / man["blob"]).read_bytes()
    if hashlib.sha256(blob).hexdigest() != man["blob_sha256"]:
        raise IntegrityError(f"blob hash mismatch for {stem}")
    layout = []
    for k, v in man.items():
        if k.startswith("param."):
            off, dims = v.split()
            layout.append((int(off), k[len("param.") :], tuple(int(d) for d in dims.split("x"))))
    layout.sort()
    if specs is None:
        specs = [ParamSpec(name, shape) for _, name, shape in layout]
    store = ParamStore(specs)
    for off, name, shape in layout:
        if name not in store.layout or store.layout[name] != (off, shape):
            raise IntegrityError(f"layout mismatch for parameter {name}")
    if len(layout) != len(store.specs):
        raise IntegrityError("parameter set differs from expected layout")
    vec = np.frombuffer(blob, dtype="<f8")
    if vec.size != store.size or int(man["n_params"]) != store.size:
        raise IntegrityError("blob length does not match parameter count")
    store.vector[:] = vec
    meta = {k[len("meta.") :]: v for k, v in man.items() if k.startswith("meta.")}
    return store, meta
