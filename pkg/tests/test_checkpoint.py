import numpy as np
import pytest

from gradfair.components.checkpoint import (
    HEADER,
    MAGIC,
    Snapshot,
    load_checkpoint,
    save_checkpoint,
)
from gradfair.model import NetworkConfig, build_network, forward_loss, predict
from gradfair.types import CheckpointError, Mode, Variant


@pytest.fixture(scope="module")
def snapshot():
    config = NetworkConfig(input_dim=4, hidden_width=5, lambda_=10.0, n_protected=1)
    net = build_network(config, rng_seed=7)
    rng = np.random.default_rng(0)
    x = rng.normal(size=(12, 4))
    # moves the running batch-norm statistics away from their initial values
    forward_loss(net, x, rng.integers(0, 2, 12), rng.integers(0, 2, (12, 1)), Mode.TRAIN)
    yield Snapshot.take(net, rng_seed=7, epoch=3, attributes=["gender"])


def test_round_trip_is_bit_exact(snapshot, tmp_path):
    filename = save_checkpoint(snapshot, tmp_path / "model.gradfair")
    loaded = load_checkpoint(filename)
    assert loaded.config == snapshot.config
    assert (loaded.rng_seed, loaded.epoch, loaded.attributes) == (7, 3, ["gender"])
    assert set(loaded.state) == set(snapshot.state)
    for name, array in snapshot.state.items():
        assert loaded.state[name].tobytes() == array.tobytes()
    assert loaded.digest() == snapshot.digest()


def test_round_trip_predictions(snapshot, tmp_path):
    x = np.random.default_rng(1).normal(size=(20, 4))
    before = predict(snapshot.restore(), x)[0]
    loaded = load_checkpoint(save_checkpoint(snapshot, tmp_path / "model.gradfair"))
    assert np.array_equal(predict(loaded.restore(), x)[0], before)


def test_truncated_file_rejected(snapshot, tmp_path):
    filename = save_checkpoint(snapshot, tmp_path / "model.gradfair")
    blob = filename.read_bytes()
    filename.write_bytes(blob[: len(blob) // 2])
    with pytest.raises(CheckpointError, match="truncated"):
        load_checkpoint(filename)
    filename.write_bytes(blob[:10])
    with pytest.raises(CheckpointError, match="truncated"):
        load_checkpoint(filename)


def test_corrupt_payload_rejected(snapshot, tmp_path):
    filename = save_checkpoint(snapshot, tmp_path / "model.gradfair")
    blob = bytearray(filename.read_bytes())
    blob[-20] ^= 0xFF
    filename.write_bytes(bytes(blob))
    with pytest.raises(CheckpointError, match="checksum"):
        load_checkpoint(filename)


def test_bad_magic_rejected(tmp_path):
    filename = tmp_path / "model.gradfair"
    filename.write_bytes(b"NOTGRAD!" + bytes(HEADER.size))
    with pytest.raises(CheckpointError, match="not a gradfair checkpoint"):
        load_checkpoint(filename)


def test_version_mismatch_rejected(snapshot, tmp_path):
    filename = save_checkpoint(snapshot, tmp_path / "model.gradfair")
    blob = filename.read_bytes()
    _, _, length, checksum = HEADER.unpack_from(blob)
    filename.write_bytes(HEADER.pack(MAGIC, 99, length, checksum) + blob[HEADER.size :])
    with pytest.raises(CheckpointError, match="version 99"):
        load_checkpoint(filename)


def test_variant_mismatch_rejected(snapshot, tmp_path):
    filename = save_checkpoint(snapshot, tmp_path / "model.gradfair")
    with pytest.raises(CheckpointError, match="'pred' network, expected 'auto'"):
        load_checkpoint(filename, variant=Variant.AUTO)
    other = snapshot.config.model_copy(update=dict(hidden_width=6))
    with pytest.raises(CheckpointError, match="does not match"):
        load_checkpoint(filename, config=other)
    assert load_checkpoint(filename, variant="pred").config.variant == Variant.PRED


def test_digest_changes_with_state(snapshot):
    state = {name: array.copy() for name, array in snapshot.state.items()}
    state["trunk.0.bias"][0] += 1e-12
    assert snapshot.model_copy(update=dict(state=state)).digest() != snapshot.digest()
