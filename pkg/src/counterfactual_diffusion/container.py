"""Checkpoint container.

Layout, all integers little-endian::

    55 AA 43 4B | header length (4) | header JSON (utf-8) | tensors | xor checksum (1)

The header lists every tensor as ``{"name", "shape"}`` in storage order; tensor data is
raw float32 concatenated in that order.
"""

from __future__ import annotations

import json
import logging
from collections.abc import Mapping
from dataclasses import dataclass, field
from math import prod
from pathlib import Path
from typing import Any

import numpy as np
import torch

from .exceptions import DecodeError, MissingArtifactError

_LOGGER = logging.getLogger(__name__)

_CONTAINER_PREFIX = bytes([0x55, 0xAA, 0x43, 0x4B])
_LENGTH_SIZE = 4
_FLOAT = np.dtype("<f4")


def xor_checksum(data: bytes) -> int:
    if not data:
        return 0
    return int(np.bitwise_xor.reduce(np.frombuffer(data, dtype=np.uint8)))


@dataclass
class Container:
    kind: str
    meta: dict[str, Any] = field(default_factory=dict)
    tensors: dict[str, torch.Tensor] = field(default_factory=dict)

    def encode(self) -> bytes:
        """Serialize header and tensors, appending the checksum."""
        arrays = {
            name: tensor.detach().to(torch.float32).contiguous().cpu().numpy().astype(_FLOAT)
            for name, tensor in self.tensors.items()
        }
        header = json.dumps(
            {
                "kind": self.kind,
                "meta": self.meta,
                "tensors": [
                    {"name": name, "shape": list(array.shape)} for name, array in arrays.items()
                ],
            },
            sort_keys=True,
        ).encode()
        body = b"".join(
            [
                _CONTAINER_PREFIX,
                len(header).to_bytes(_LENGTH_SIZE, "little"),
                header,
                *(array.tobytes() for array in arrays.values()),
            ]
        )
        return body + bytes([xor_checksum(body)])

    @classmethod
    def decode(cls, data: bytes) -> Container:
        """Validate prefix, lengths and checksum, then rebuild the tensors."""
        fixed = len(_CONTAINER_PREFIX) + _LENGTH_SIZE
        if len(data) < fixed + 1 or data[: len(_CONTAINER_PREFIX)] != _CONTAINER_PREFIX:
            raise DecodeError("Invalid container format")

        checksum = data[-1]
        checksum_expected = xor_checksum(data[:-1])
        if checksum_expected != checksum:
            raise DecodeError(f"Expected checksum {checksum_expected:x} found {checksum:x}")

        header_len = int.from_bytes(data[len(_CONTAINER_PREFIX) : fixed], "little")
        if fixed + header_len > len(data) - 1:
            raise DecodeError("Header size mismatch")
        try:
            header = json.loads(data[fixed : fixed + header_len])
        except ValueError as exc:
            raise DecodeError(f"Malformed header: {exc}") from exc

        offset = fixed + header_len
        tensors: dict[str, torch.Tensor] = {}
        for entry in header["tensors"]:
            count = prod(entry["shape"])
            end = offset + count * _FLOAT.itemsize
            if end > len(data) - 1:
                raise DecodeError(f"Tensor {entry['name']} truncated")
            array = np.frombuffer(data, dtype=_FLOAT, count=count, offset=offset)
            array = array.reshape(entry["shape"]).astype(np.float32)
            tensors[entry["name"]] = torch.from_numpy(array)
            offset = end
        if offset != len(data) - 1:
            raise DecodeError("Payload size mismatch")

        return cls(kind=header["kind"], meta=header["meta"], tensors=tensors)


def write_container(
    path: Path,
    kind: str,
    meta: Mapping[str, Any],
    tensors: Mapping[str, torch.Tensor],
) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(Container(kind, dict(meta), dict(tensors)).encode())
    _LOGGER.info("Wrote %s checkpoint %s", kind, path)


def read_container(path: Path, kind: str, phase: str) -> Container:
    """Read a container, naming the producing phase when the file is missing."""
    if not path.exists():
        raise MissingArtifactError(str(path), phase)
    container = Container.decode(path.read_bytes())
    if container.kind != kind:
        raise DecodeError(f"Expected a {kind} checkpoint in {path}, found {container.kind}")
    return container
