from functools import partial
from io import BytesIO

import anyio
import pytest
import torch
from conftest import TINY_SIZE, ScriptedClassifier

from counterfactual_diffusion.bridge import (
    BridgeClassifier,
    ErrorReply,
    Frame,
    Message,
    PredictReply,
    PredictRequest,
    handle,
    serve,
)
from counterfactual_diffusion.denoiser import TrainConfig
from counterfactual_diffusion.embeddings import filter_by_prediction, train_class_embeddings
from counterfactual_diffusion.exceptions import DecodeError
from counterfactual_diffusion.models import (
    BackboneConfig,
    TorchClassifier,
    build_net,
    load_classifier,
    save_classifier,
)
from counterfactual_diffusion.pipeline import (
    MANIFEST_NAME,
    EscalationSchedule,
    generate_counterfactual,
    run_benchmark,
)


@pytest.mark.parametrize(
    "payload,frame",
    [
        ("0102", "55aa00000002 0102 fe"),
        ("", "55aa00000000 ff"),
        ("be6f6b", "55aa00000003 be6f6b 46"),
    ],
)
def test_frame(payload, frame):
    assert Frame(bytes.fromhex(payload)).encode() == bytes.fromhex(frame)
    assert Frame.decode(bytes.fromhex(frame)).payload == bytes.fromhex(payload)


@pytest.mark.parametrize(
    "frame",
    [
        "56aa00000002 0102 fe",
        "55aa00000003 0102 fe",
        "55aa00000002 0102 ff",
        "55aa0000",
        "55aa00000000",
    ],
)
def test_frame_invalid(frame):
    with pytest.raises(DecodeError):
        Frame.decode(bytes.fromhex(frame))


def test_error_reply_frame():
    assert ErrorReply("ok").to_frame() == bytes.fromhex("55aa00000003 be6f6b 46")
    assert Message.from_frame(bytes.fromhex("55aa00000003 be6f6b 46")) == ErrorReply("ok")


@pytest.mark.parametrize(
    "data,result",
    [
        (
            "b1 01 02 3fd0000000000000 3fe8000000000000",
            PredictReply(label=1, probabilities=(0.25, 0.75)),
        ),
        ("be 626164", ErrorReply(message="bad")),
    ],
)
def test_decode_reply(data, result):
    assert Message.decode(bytes.fromhex(data)) == result
    assert result.encode() == bytes.fromhex(data)


def test_decode_request():
    data = bytes.fromhex("b0 01 01 02 3f800000 bf800000")
    message = Message.decode(data)
    assert isinstance(message, PredictRequest)
    assert torch.equal(message.image, torch.tensor([[[1.0, -1.0]]]))
    assert message.encode() == data


@pytest.mark.parametrize(
    "data",
    [
        "",
        "ff",
        "b0 01 01 02 3f800000",
        "b1 01 02 3fd0000000000000",
        "be ff",
    ],
)
def test_decode_invalid(data):
    with pytest.raises(DecodeError):
        Message.decode(bytes.fromhex(data))


def test_reply_prediction():
    prediction = PredictReply(label=0, probabilities=(0.75, 0.25)).prediction()
    assert prediction.label == 0
    assert prediction.probabilities == (0.75, 0.25)


def test_read_frames():
    frames = [Frame(b"\x01"), Frame(b"\x02\x03")]
    stream = BytesIO(b"".join(frame.encode() for frame in frames))
    assert Frame.read(stream) == frames[0]
    assert Frame.read(stream) == frames[1]
    assert Frame.read(stream) is None

    encoded = frames[0].encode()
    with pytest.raises(DecodeError):
        Frame.read(BytesIO(encoded[:-1]))
    with pytest.raises(DecodeError):
        Frame.read(BytesIO(encoded[:3]))


def _request(image: torch.Tensor) -> bytes:
    return PredictRequest(image=image).to_frame()


def test_handle_predicts():
    reply = handle(_request(torch.zeros(1, 2, 2)), ScriptedClassifier(1))
    assert Message.from_frame(reply) == PredictReply(1, (0.0, 1.0))


def test_handle_reports_errors():
    class Broken:
        def predict(self, image):
            raise RuntimeError("boom")

    reply = Message.from_frame(handle(_request(torch.zeros(1, 1, 1)), Broken()))
    assert reply == ErrorReply("boom")

    reply = Message.from_frame(handle(b"\x00", Broken()))
    assert isinstance(reply, ErrorReply)

    reply = handle(ErrorReply("x").to_frame(), Broken())
    assert isinstance(Message.from_frame(reply), ErrorReply)


def test_serve_answers_in_order():
    classifier = ScriptedClassifier(0, 1, 1)
    stdin = BytesIO(b"".join(_request(torch.zeros(1, 2, 2)) for _ in range(3)))
    stdout = BytesIO()

    serve(classifier, stdin, stdout)

    stdout.seek(0)
    labels = []
    while (frame := Frame.read(stdout)) is not None:
        labels.append(Message.decode(frame.payload).label)
    assert labels == [0, 1, 1]


@pytest.fixture
def classifier_checkpoint(tmp_path):
    config = BackboneConfig(
        channels=1, image_size=TINY_SIZE, width=8, feature_dim=16, groups=2, outputs=2
    )
    path = tmp_path / "classifier.ckpt"
    save_classifier(path, TorchClassifier(build_net(config, seed=3)))
    return path


def test_bridge_matches_in_process(classifier_checkpoint, tiny_images):
    local = load_classifier(classifier_checkpoint)
    with BridgeClassifier(classifier_checkpoint) as bridged:
        for image in tiny_images:
            assert bridged.predict(image) == local.predict(image)


def test_bridged_counterfactual_identical(
    classifier_checkpoint, tiny_images, tiny_denoiser, table, schedule
):
    esc = EscalationSchedule(((2, 1.0), (3, 2.0)))
    local = load_classifier(classifier_checkpoint)
    expected = generate_counterfactual(
        tiny_images[0], None, local, table, tiny_denoiser, schedule, esc
    )
    with BridgeClassifier(classifier_checkpoint) as bridged:
        result = generate_counterfactual(
            tiny_images[0], None, bridged, table, tiny_denoiser, schedule, esc
        )
    assert result.record() == expected.record()
    assert torch.equal(result.explanation, expected.explanation)


def test_bridged_benchmark_manifest_identical(
    tmp_path, classifier_checkpoint, tiny_dataset, tiny_denoiser, table, schedule
):
    esc = EscalationSchedule(((2, 1.0), (3, 2.0)))

    def benchmark(classifier, out_dir):
        anyio.run(
            partial(
                run_benchmark,
                tiny_dataset,
                classifier,
                table,
                tiny_denoiser,
                schedule,
                esc,
                out_dir,
            )
        )
        return (out_dir / MANIFEST_NAME).read_bytes()

    local = benchmark(load_classifier(classifier_checkpoint), tmp_path / "local")
    with BridgeClassifier(classifier_checkpoint) as bridged:
        remote = benchmark(bridged, tmp_path / "bridged")
    assert remote == local


def test_bridged_distillation_identical(
    classifier_checkpoint, tiny_dataset, tiny_denoiser, table, schedule
):
    cfg = TrainConfig(iterations=3, batch_size=2, learning_rate=1e-2, seed=4)
    local = load_classifier(classifier_checkpoint)
    class_id = local.predict(tiny_dataset.images[0]).label

    def class_tokens(classifier):
        return train_class_embeddings(
            tiny_dataset, classifier, class_id, tiny_denoiser, schedule, cfg, table
        )

    expected = class_tokens(local)
    with BridgeClassifier(classifier_checkpoint) as bridged:
        subset = filter_by_prediction(tiny_dataset, bridged, class_id)
        result = class_tokens(bridged)
    assert subset == filter_by_prediction(tiny_dataset, local, class_id)
    assert torch.equal(result.weights, expected.weights)
    assert result.trained == expected.trained
