"""Predict-only classifier behind a process boundary.

Every message travels in a ``Frame`` whose first payload byte is the message type. The
server side is started with ``python -m counterfactual_diffusion.bridge CHECKPOINT`` and
speaks over stdin/stdout.
"""

from __future__ import annotations

import logging
import subprocess
import sys
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import TYPE_CHECKING, BinaryIO, ClassVar, Self

import numpy as np
import torch

from .const import ERROR_REPLY, FRAME_LENGTH_SIZE, FRAME_PREFIX, PREDICT_REPLY, PREDICT_REQUEST
from .container import xor_checksum
from .exceptions import BridgeError, DecodeError
from .models import Prediction, load_classifier
from .schedule import LatentImage

if TYPE_CHECKING:
    from .pipeline import BlackBoxClassifier

_LOGGER = logging.getLogger(__name__)

_MESSAGE_REGISTRY: dict[int, type[Message]] = {}


@dataclass(frozen=True)
class Frame:
    """``55 AA <length:4 big endian> <payload> <xor of all preceding bytes>``."""

    header_size: ClassVar[int] = len(FRAME_PREFIX) + FRAME_LENGTH_SIZE
    payload: bytes

    def encode(self) -> bytes:
        body = FRAME_PREFIX + len(self.payload).to_bytes(FRAME_LENGTH_SIZE, "big") + self.payload
        return body + bytes([xor_checksum(body)])

    @staticmethod
    def payload_length(header: bytes) -> int:
        if header[: len(FRAME_PREFIX)] != FRAME_PREFIX:
            raise DecodeError(f"Bad frame prefix {header[: len(FRAME_PREFIX)].hex()}")
        return int.from_bytes(header[len(FRAME_PREFIX) : Frame.header_size], "big")

    @classmethod
    def decode(cls, data: bytes) -> Self:
        if len(data) <= cls.header_size:
            raise DecodeError(f"Frame of {len(data)} bytes is too short")
        length = cls.payload_length(data)
        if len(data) != cls.header_size + length + 1:
            raise DecodeError(f"Frame announces {length} payload bytes, found {len(data)}")
        if (expected := xor_checksum(data[:-1])) != data[-1]:
            raise DecodeError(f"Expected checksum {expected:x} found {data[-1]:x}")
        return cls(payload=data[cls.header_size : -1])

    @classmethod
    def read(cls, stream: BinaryIO) -> Self | None:
        """Next frame from ``stream``, ``None`` on a clean end of stream."""
        header = stream.read(cls.header_size)
        if not header:
            return None
        if len(header) < cls.header_size:
            raise DecodeError("Truncated frame header")
        rest = stream.read(cls.payload_length(header) + 1)
        return cls.decode(header + rest)


@dataclass
class Message:
    type: ClassVar[int]

    def __init_subclass__(cls, /, **kwargs):
        super().__init_subclass__(**kwargs)
        if message_type := getattr(cls, "type", None):
            _MESSAGE_REGISTRY[message_type] = cls

    @classmethod
    def decode(cls, data: bytes) -> Message:
        if len(data) < 1:
            raise DecodeError("Failed to parse message")
        if (registered_cls := _MESSAGE_REGISTRY.get(data[0])) is None:
            raise DecodeError(f"Unknown message type {data[0]:x}")
        return registered_cls.decode(data)

    def encode(self) -> bytes:
        raise NotImplementedError()

    @classmethod
    def from_frame(cls, data: bytes) -> Message:
        return cls.decode(Frame.decode(data).payload)

    def to_frame(self) -> bytes:
        return Frame(self.encode()).encode()


@dataclass(eq=False)
class PredictRequest(Message):
    """Image to classify, float32 pixels in C, H, W order."""

    type: ClassVar[int] = PREDICT_REQUEST
    image: LatentImage

    @classmethod
    def decode(cls, data: bytes) -> Self:
        if len(data) < 4:
            raise DecodeError("Message too short")
        if data[0] != cls.type:
            raise DecodeError("Failed to parse message")
        shape = (data[1], data[2], data[3])
        pixels = np.frombuffer(data[4:], dtype=">f4")
        if pixels.size != shape[0] * shape[1] * shape[2]:
            raise DecodeError(f"Expected {shape} pixels, found {pixels.size}")
        return cls(image=torch.from_numpy(pixels.astype(np.float32).reshape(shape)))

    def encode(self) -> bytes:
        channels, height, width = self.image.shape
        pixels = self.image.detach().numpy().astype(">f4").tobytes()
        return bytes([self.type, channels, height, width, *pixels])


@dataclass
class PredictReply(Message):
    """Label followed by float64 probabilities."""

    type: ClassVar[int] = PREDICT_REPLY
    label: int
    probabilities: tuple[float, ...]

    @classmethod
    def decode(cls, data: bytes) -> Self:
        if len(data) < 3:
            raise DecodeError("Message too short")
        if data[0] != cls.type:
            raise DecodeError("Failed to parse message")
        count = data[2]
        if len(data) != 3 + 8 * count:
            raise DecodeError(f"Expected {count} probabilities")
        probabilities = np.frombuffer(data[3:], dtype=">f8")
        return cls(label=data[1], probabilities=tuple(float(p) for p in probabilities))

    def encode(self) -> bytes:
        probabilities = np.asarray(self.probabilities, dtype=">f8").tobytes()
        return bytes([self.type, self.label, len(self.probabilities), *probabilities])

    def prediction(self) -> Prediction:
        return Prediction(label=self.label, probabilities=self.probabilities)


@dataclass
class ErrorReply(Message):
    type: ClassVar[int] = ERROR_REPLY
    message: str

    @classmethod
    def decode(cls, data: bytes) -> Self:
        if len(data) < 1 or data[0] != cls.type:
            raise DecodeError("Failed to parse message")
        try:
            return cls(message=data[1:].decode())
        except UnicodeDecodeError as exc:
            raise DecodeError("Error message is not valid UTF-8") from exc

    def encode(self) -> bytes:
        return bytes([self.type, *self.message.encode()])


class BridgeClassifier:
    """Runs the classifier in a child process and forwards ``predict`` only."""

    def __init__(self, checkpoint: Path, python: str = sys.executable) -> None:
        self._lock = threading.Lock()
        self._process = subprocess.Popen(
            [python, "-m", "counterfactual_diffusion.bridge", str(checkpoint)],
            stdin=subprocess.PIPE,
            stdout=subprocess.PIPE,
        )
        _LOGGER.debug("Started classifier bridge pid %s", self._process.pid)

    def predict(self, image: LatentImage) -> Prediction:
        request = PredictRequest(image=image.to(torch.float32)).to_frame()
        with self._lock:
            try:
                self._process.stdin.write(request)
                self._process.stdin.flush()
                frame = Frame.read(self._process.stdout)
            except (BrokenPipeError, DecodeError) as exc:
                raise BridgeError(f"Classifier bridge failed: {exc}") from exc
        if frame is None:
            raise BridgeError(f"Classifier bridge exited with {self._process.poll()}")
        reply = Message.decode(frame.payload)
        if isinstance(reply, ErrorReply):
            raise BridgeError(reply.message)
        if not isinstance(reply, PredictReply):
            raise BridgeError(f"Unexpected reply {reply}")
        return reply.prediction()

    def close(self) -> None:
        if self._process.poll() is None:
            self._process.stdin.close()
            try:
                self._process.wait(timeout=10)
            except subprocess.TimeoutExpired:
                self._process.kill()
                self._process.wait()

    def __enter__(self) -> Self:
        return self

    def __exit__(self, *exc_info) -> None:
        self.close()


def handle(data: bytes, classifier: BlackBoxClassifier) -> bytes:
    """Answer one request frame."""
    try:
        request = Message.from_frame(data)
        if not isinstance(request, PredictRequest):
            return ErrorReply(f"Unsupported request {request}").to_frame()
        prediction = classifier.predict(request.image)
        reply = PredictReply(label=prediction.label, probabilities=prediction.probabilities)
    except Exception as exc:
        _LOGGER.error("Failed to answer request: %s", exc)
        return ErrorReply(str(exc)).to_frame()
    return reply.to_frame()


def serve(classifier: BlackBoxClassifier, stdin: BinaryIO, stdout: BinaryIO) -> None:
    while (frame := Frame.read(stdin)) is not None:
        stdout.write(handle(frame.encode(), classifier))
        stdout.flush()


def main() -> None:
    logging.basicConfig(level=logging.WARNING, stream=sys.stderr)
    if len(sys.argv) != 2:
        sys.stderr.write("usage: python -m counterfactual_diffusion.bridge CHECKPOINT\n")
        raise SystemExit(2)
    serve(load_classifier(Path(sys.argv[1])), sys.stdin.buffer, sys.stdout.buffer)


if __name__ == "__main__":
    main()
