import pytest
import torch

from counterfactual_diffusion.container import (
    Container,
    read_container,
    write_container,
    xor_checksum,
)
from counterfactual_diffusion.exceptions import DecodeError, MissingArtifactError


@pytest.mark.parametrize(
    "data,checksum",
    [
        ("", 0x00),
        ("55aa", 0xFF),
        ("55aa00000002 0102", 0xFE),
    ],
)
def test_xor_checksum(data, checksum):
    assert xor_checksum(bytes.fromhex(data)) == checksum


def test_empty_container_layout():
    data = Container("table").encode()
    header = b'{"kind": "table", "meta": {}, "tensors": []}'

    assert data[:4] == bytes.fromhex("55aa434b")
    assert int.from_bytes(data[4:8], "little") == len(header)
    assert data[8:-1] == header
    assert data[-1] == xor_checksum(data[:-1])


def test_container_tensors():
    tensors = {
        "weights": torch.arange(6, dtype=torch.float32).view(2, 3),
        "bias": torch.tensor([0.5, -1.5], dtype=torch.float64),
    }
    decoded = Container.decode(Container("denoiser", {"seed": 3}, tensors).encode())

    assert decoded.kind == "denoiser"
    assert decoded.meta == {"seed": 3}
    assert list(decoded.tensors) == ["weights", "bias"]
    assert torch.equal(decoded.tensors["weights"], tensors["weights"])
    assert decoded.tensors["bias"].dtype == torch.float32
    assert decoded.tensors["bias"].tolist() == [0.5, -1.5]


def _valid() -> bytes:
    return Container("table", {}, {"w": torch.ones(2)}).encode()


@pytest.mark.parametrize(
    "corrupt",
    [
        lambda data: data[:5],
        lambda data: b"\x00" + data[1:],
        lambda data: data[:-1] + bytes([data[-1] ^ 0x01]),
        lambda data: data[:-2] + bytes([data[-1]]),
        lambda data: data[:-1] + b"\x00\x00\x00\x00" + bytes([data[-1]]),
    ],
)
def test_container_corrupt(corrupt):
    with pytest.raises(DecodeError):
        Container.decode(corrupt(_valid()))


def test_read_container(tmp_path):
    path = tmp_path / "nested" / "denoiser.ckpt"
    write_container(path, "denoiser", {"a": 1}, {"w": torch.zeros(3)})
    assert read_container(path, "denoiser", "train").meta == {"a": 1}

    with pytest.raises(DecodeError):
        read_container(path, "classifier", "train")

    with pytest.raises(MissingArtifactError) as info:
        read_container(tmp_path / "missing.ckpt", "denoiser", "train")
    assert info.value.phase == "train"
    assert "run 'train' first" in str(info.value)
