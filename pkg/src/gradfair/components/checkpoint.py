"""Network snapshots and the checkpoint file format.

A checkpoint file is a fixed header followed by a payload:

- magic ``b"GRADFAIR"`` (8 bytes)
- format version, little-endian uint32
- payload length, little-endian uint64
- sha256 of the payload (32 bytes)
- payload, an ``.npz`` archive holding every state array and the snapshot
  metadata as JSON, float arrays stored as raw float64 so a round-trip is exact

"""

import hashlib
import io
import json
import logging
import struct
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from pydantic import ConfigDict, Field

from gradfair.model import GradNetwork, NetworkConfig, build_network
from gradfair.types import CheckpointError, GradBaseModel, Variant


logger = logging.getLogger(__name__)

MAGIC = b"GRADFAIR"
VERSION = 1
HEADER = struct.Struct("<8sIQ32s")
META_KEY = "__meta__"


class Snapshot(GradBaseModel):
    """Network state at the end of one epoch."""

    config: NetworkConfig = Field(description="Network architecture")
    rng_seed: int = Field(description="Seed the network was built with")
    epoch: int = Field(default=0, description="Epoch the state was taken at, 0 if untrained", ge=0)
    attributes: list[str] = Field(
        default=[], description="Protected attribute of each attribute branch"
    )
    state: dict[str, np.ndarray] = Field(description="Output of GradNetwork.state_dict")
    model_config = ConfigDict(arbitrary_types_allowed=True)

    @classmethod
    def take(
        cls, net: GradNetwork, rng_seed: int, epoch: int = 0, attributes: Sequence[str] = ()
    ) -> "Snapshot":
        return cls(
            config=net.config,
            rng_seed=rng_seed,
            epoch=epoch,
            attributes=list(attributes),
            state=net.state_dict(),
        )

    def restore(self) -> GradNetwork:
        """Network holding exactly the snapshot state."""
        net = build_network(self.config, self.rng_seed)
        net.load_state_dict(self.state)
        return net

    def meta(self) -> dict:
        return dict(
            config=self.config.model_dump(mode="json", by_alias=True),
            rng_seed=self.rng_seed,
            epoch=self.epoch,
            attributes=self.attributes,
        )

    def digest(self) -> str:
        """sha256 over the metadata and the bytes of every state array."""
        sha = hashlib.sha256(json.dumps(self.meta(), sort_keys=True).encode())
        for name in sorted(self.state):
            array = np.ascontiguousarray(self.state[name], dtype=np.float64)
            sha.update(name.encode())
            sha.update(str(array.shape).encode())
            sha.update(array.tobytes())
        return sha.hexdigest()


def save_checkpoint(snapshot: Snapshot, path: str | Path) -> Path:
    """Write ``snapshot`` to ``path``.

    Parameters
    ----------
    snapshot: Snapshot
        The snapshot to persist.
    path: str | Path
        Destination file, overwritten if it exists.

    Returns
    -------
    path: Path
        The written file.

    """
    path = Path(path)
    if META_KEY in snapshot.state:
        raise CheckpointError(f"'{META_KEY}' is reserved and cannot name a state array")
    buffer = io.BytesIO()
    arrays = {name: np.asarray(array, dtype=np.float64) for name, array in snapshot.state.items()}
    np.savez(buffer, **arrays, **{META_KEY: np.array(json.dumps(snapshot.meta()))})
    payload = buffer.getvalue()
    header = HEADER.pack(MAGIC, VERSION, len(payload), hashlib.sha256(payload).digest())
    path.write_bytes(header + payload)
    logger.debug(f"Saved epoch {snapshot.epoch} checkpoint to {path}")
    return path


def load_checkpoint(
    path: str | Path,
    variant: Optional[Variant | str] = None,
    config: Optional[NetworkConfig] = None,
) -> Snapshot:
    """Read a checkpoint written by :func:`save_checkpoint`.

    Parameters
    ----------
    path: str | Path
        Checkpoint file.
    variant: Variant, optional
        Reject checkpoints of another GRAD variant.
    config: NetworkConfig, optional
        Reject checkpoints whose architecture differs.

    Returns
    -------
    snapshot: Snapshot
        The restored snapshot, validated against the network architecture.

    Raises
    ------
    CheckpointError
        Bad magic, unsupported version, truncated payload, checksum failure or a
        variant/config mismatch. Nothing is returned on failure.

    """
    path = Path(path)
    blob = path.read_bytes()
    if len(blob) < HEADER.size:
        raise CheckpointError(f"{path}: truncated checkpoint, {len(blob)} bytes")
    magic, version, length, checksum = HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise CheckpointError(f"{path}: not a gradfair checkpoint")
    if version != VERSION:
        raise CheckpointError(f"{path}: checkpoint version {version}, expected {VERSION}")
    payload = blob[HEADER.size :]
    if len(payload) != length:
        raise CheckpointError(
            f"{path}: truncated checkpoint, payload of {len(payload)} bytes, expected {length}"
        )
    if hashlib.sha256(payload).digest() != checksum:
        raise CheckpointError(f"{path}: checksum mismatch")

    with np.load(io.BytesIO(payload), allow_pickle=False) as archive:
        meta = json.loads(archive[META_KEY].item())
        state = {name: archive[name].copy() for name in archive.files if name != META_KEY}
    snapshot = Snapshot(state=state, **meta)

    if variant is not None and snapshot.config.variant != Variant(variant):
        raise CheckpointError(
            f"{path}: checkpoint holds a '{snapshot.config.variant.value}' network, "
            f"expected '{Variant(variant).value}'"
        )
    if config is not None and snapshot.config != config:
        raise CheckpointError(
            f"{path}: checkpoint network {snapshot.config.model_dump(by_alias=True)} "
            f"does not match {config.model_dump(by_alias=True)}"
        )
    try:
        snapshot.restore()
    except ValueError as e:
        raise CheckpointError(f"{path}: state does not fit the network: {e}") from e
    return snapshot
