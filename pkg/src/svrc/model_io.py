"""Binary model files and the on-disk anchor/derivation registry.

Anchor file (``anchors/<anchor_id>.model``)::

    "SANC"  version u8  manifest_len u32  manifest (UTF-8 JSON)
    weights: little-endian doubles, tensors in manifest order, C order
    STNH record (main quantizer)  STNH record (hyper quantizer)

Derivation file (``derivations/<anchor_id>/<derivation_id>.stanh``)::

    "SDRV"  version u8  manifest_len u32  manifest (UTF-8 JSON)
    STNH record (main quantizer)  STNH record (hyper quantizer)

The JSON manifest holds the scalar fields and metadata; for anchors it also
lists ``[name, shape]`` for every weight tensor. Floats survive the JSON
round trip exactly (shortest repr), and keys are sorted, so
save -> load -> save reproduces the same bytes.

Anchor file size is ``9 + manifest_len + 8 * parameter_count(M, N) +
record_size(L_main) + record_size(L_hyper)`` bytes, where a quantizer
record takes ``7 + 16 (L - 1)`` bytes.
"""

from __future__ import annotations

import json
import os
import re
import struct
from pathlib import Path

import numpy as np

from . import entropy
from . import quantizer as qz
from .io_utils import atomic_write
from .model import AnchorModel
from .train import Derivation

ANCHOR_MAGIC = b"SANC"
DERIVATION_MAGIC = b"SDRV"
FORMAT_VERSION = 1
REGISTRY_ENV = "SVRC_REGISTRY"

_PREAMBLE = struct.Struct("<4sBI")
_ID_PATTERN = re.compile(r"^([A-Za-z]+)(\d+)$")


class ModelFormatError(ValueError):
    """Malformed, truncated or wrong-version model file."""


class RegistryError(LookupError):
    """A referenced anchor or derivation is not in the registry."""


# ------------------------------------------------------------------ ids


def parse_id(text: str, prefix: str) -> int:
    """Numeric part of an id such as ``A1`` or ``D12`` (1..65535)."""
    match = _ID_PATTERN.match(str(text))
    if not match or match.group(1) != prefix:
        raise ValueError(f"invalid id {text!r}: expected {prefix}<number>")
    number = int(match.group(2))
    if not 1 <= number <= 0xFFFF:
        raise ValueError(f"id {text!r} out of range 1..65535")
    return number


def format_id(number: int, prefix: str) -> str:
    return f"{prefix}{number}"


# ------------------------------------------------------------ encoding


def _json_default(value):
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, np.ndarray):
        return value.tolist()
    raise TypeError(f"cannot serialize {type(value).__name__} in model metadata")


def _pack(magic: bytes, manifest: dict, body: bytes) -> bytes:
    text = json.dumps(manifest, sort_keys=True, separators=(",", ":"), default=_json_default).encode("utf-8")
    return _PREAMBLE.pack(magic, FORMAT_VERSION, len(text)) + text + body


def _unpack(data: bytes, magic: bytes, kind: str) -> tuple[dict, int]:
    if len(data) < _PREAMBLE.size:
        raise ModelFormatError(f"truncated {kind} file ({len(data)} bytes)")
    found, version, length = _PREAMBLE.unpack_from(data)
    if found != magic:
        raise ModelFormatError(f"not a {kind} file (magic {found!r}, expected {magic!r})")
    if version != FORMAT_VERSION:
        raise ModelFormatError(f"unsupported {kind} file version {version} (expected {FORMAT_VERSION})")
    end = _PREAMBLE.size + length
    if len(data) < end:
        raise ModelFormatError(f"truncated {kind} manifest")
    try:
        manifest = json.loads(data[_PREAMBLE.size : end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ModelFormatError(f"corrupt {kind} manifest: {exc}") from None
    return manifest, end


def _read_layers(data: bytes, offset: int, kind: str) -> tuple[qz.StanhLayer, qz.StanhLayer]:
    try:
        main, offset = qz.from_bytes(data, offset)
        hyper, offset = qz.from_bytes(data, offset)
    except ValueError as exc:
        raise ModelFormatError(f"{kind} file: {exc}") from None
    if offset != len(data):
        raise ModelFormatError(f"{kind} file has {len(data) - offset} trailing bytes")
    return main, hyper


def anchor_to_bytes(model: AnchorModel) -> bytes:
    weights = model.weights()
    names = sorted(weights)
    manifest = {
        "anchor_id": model.anchor_id,
        "lam": float(model.lam),
        "M": int(model.M),
        "N": int(model.N),
        "filters": list(model.factorized.filters),
        "meta": model.meta,
        "tensors": [[name, list(np.shape(weights[name]))] for name in names],
    }
    body = b"".join(np.ascontiguousarray(weights[name], dtype="<f8").tobytes() for name in names)
    return _pack(ANCHOR_MAGIC, manifest, body) + qz.to_bytes(model.stanh_main) + qz.to_bytes(model.stanh_hyper)


def anchor_from_bytes(data: bytes) -> AnchorModel:
    manifest, offset = _unpack(data, ANCHOR_MAGIC, "anchor")
    params: dict[str, np.ndarray] = {}
    fparams: dict[str, np.ndarray] = {}
    try:
        for name, shape in manifest["tensors"]:
            count = int(np.prod(shape, dtype=np.int64))
            end = offset + 8 * count
            if len(data) < end:
                raise ModelFormatError(f"truncated anchor weights at tensor {name!r}")
            value = np.frombuffer(data, dtype="<f8", count=count, offset=offset).astype(np.float64).reshape(shape)
            offset = end
            if name.startswith("factorized."):
                fparams[name[len("factorized.") :]] = value
            else:
                params[name] = value
        main, hyper = _read_layers(data, offset, "anchor")
        factorized = entropy.FactorizedModel(int(manifest["N"]), tuple(manifest["filters"]), params=fparams)
        return AnchorModel(
            params, factorized, main, hyper, manifest["lam"], manifest["M"], manifest["N"],
            manifest["anchor_id"], manifest["meta"],
        )
    except KeyError as exc:
        raise ModelFormatError(f"anchor manifest lacks field {exc}") from None


def derivation_to_bytes(derivation: Derivation) -> bytes:
    manifest = {
        "anchor_id": derivation.anchor_id,
        "derivation_id": derivation.derivation_id,
        "lam": float(derivation.lam),
        "meta": derivation.meta,
    }
    return (
        _pack(DERIVATION_MAGIC, manifest, b"")
        + qz.to_bytes(derivation.stanh_main)
        + qz.to_bytes(derivation.stanh_hyper)
    )


def derivation_from_bytes(data: bytes) -> Derivation:
    manifest, offset = _unpack(data, DERIVATION_MAGIC, "derivation")
    main, hyper = _read_layers(data, offset, "derivation")
    try:
        return Derivation(
            manifest["anchor_id"], manifest["derivation_id"], manifest["lam"], main, hyper, manifest["meta"]
        )
    except KeyError as exc:
        raise ModelFormatError(f"derivation manifest lacks field {exc}") from None


def _read(path) -> bytes:
    with open(path, "rb") as fh:
        return fh.read()


def save_anchor(model: AnchorModel, path) -> None:
    atomic_write(path, anchor_to_bytes(model))


def load_anchor(path) -> AnchorModel:
    return anchor_from_bytes(_read(path))


def save_derivation(derivation: Derivation, path) -> None:
    atomic_write(path, derivation_to_bytes(derivation))


def load_derivation(path) -> Derivation:
    return derivation_from_bytes(_read(path))


# ------------------------------------------------------------ registry


def default_registry_path() -> Path:
    return Path(os.environ.get(REGISTRY_ENV, "registry"))


class Registry:
    """Directory of anchors and their derivations.

    Reads are lock-free; writes replace whole files atomically. Loaded
    anchors are cached, since a model is immutable after load.
    """

    def __init__(self, root=None):
        self.root = Path(root) if root is not None else default_registry_path()
        self._anchors: dict[str, AnchorModel] = {}

    def anchor_path(self, anchor_id: str) -> Path:
        parse_id(anchor_id, "A")
        return self.root / "anchors" / f"{anchor_id}.model"

    def derivation_path(self, anchor_id: str, derivation_id: str) -> Path:
        parse_id(anchor_id, "A")
        parse_id(derivation_id, "D")
        return self.root / "derivations" / anchor_id / f"{derivation_id}.stanh"

    def has_anchor(self, anchor_id: str) -> bool:
        return self.anchor_path(anchor_id).is_file()

    def save_anchor(self, model: AnchorModel) -> Path:
        path = self.anchor_path(model.anchor_id)
        save_anchor(model, path)
        self._anchors.pop(model.anchor_id, None)
        return path

    def load_anchor(self, anchor_id: str) -> AnchorModel:
        if anchor_id not in self._anchors:
            path = self.anchor_path(anchor_id)
            if not path.is_file():
                raise RegistryError(f"anchor {anchor_id} not found in registry {self.root}")
            model = load_anchor(path)
            if model.anchor_id != anchor_id:
                raise ModelFormatError(f"{path} holds anchor {model.anchor_id}, not {anchor_id}")
            self._anchors[anchor_id] = model
        return self._anchors[anchor_id]

    def save_derivation(self, derivation: Derivation) -> Path:
        if not self.has_anchor(derivation.anchor_id):
            raise RegistryError(
                f"anchor {derivation.anchor_id} not found in registry {self.root}; "
                f"cannot store derivation {derivation.derivation_id}"
            )
        anchor = self.load_anchor(derivation.anchor_id)
        derivation.apply(anchor)  # level counts must match
        path = self.derivation_path(derivation.anchor_id, derivation.derivation_id)
        save_derivation(derivation, path)
        return path

    def load_derivation(self, anchor_id: str, derivation_id: str) -> Derivation:
        if not self.has_anchor(anchor_id):
            raise RegistryError(
                f"anchor {anchor_id} not found in registry {self.root} "
                f"(required by derivation {derivation_id})"
            )
        path = self.derivation_path(anchor_id, derivation_id)
        if not path.is_file():
            raise RegistryError(f"derivation {derivation_id} of anchor {anchor_id} not found in registry {self.root}")
        derivation = load_derivation(path)
        if derivation.anchor_id != anchor_id or derivation.derivation_id != derivation_id:
            raise ModelFormatError(
                f"{path} holds {derivation.anchor_id}/{derivation.derivation_id}, not {anchor_id}/{derivation_id}"
            )
        return derivation

    def find_derivation(self, derivation_id: str) -> Derivation:
        """Look up a derivation by id alone; it must be unique across anchors."""
        parse_id(derivation_id, "D")
        hits = sorted((self.root / "derivations").glob(f"*/{derivation_id}.stanh"))
        if not hits:
            raise RegistryError(f"derivation {derivation_id} not found in registry {self.root}")
        if len(hits) > 1:
            owners = ", ".join(p.parent.name for p in hits)
            raise RegistryError(f"derivation {derivation_id} is ambiguous (anchors {owners}); pass --anchor")
        return self.load_derivation(hits[0].parent.name, derivation_id)

    def derivation_ids(self, anchor_id: str) -> list[str]:
        folder = self.root / "derivations" / anchor_id
        ids = [p.stem for p in folder.glob("D*.stanh") if _ID_PATTERN.match(p.stem)]
        return sorted(ids, key=lambda s: parse_id(s, "D"))

    def anchor_ids(self) -> list[str]:
        ids = [p.stem for p in (self.root / "anchors").glob("A*.model") if _ID_PATTERN.match(p.stem)]
        return sorted(ids, key=lambda s: parse_id(s, "A"))

    def next_derivation_id(self, anchor_id: str) -> str:
        used = [parse_id(d, "D") for d in self.derivation_ids(anchor_id)]
        return format_id(max(used, default=0) + 1, "D")
