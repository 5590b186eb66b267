import logging
import struct
from collections.abc import Sequence
from pathlib import Path

import numpy as np
from numpy.typing import NDArray
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from tinyron.domain.errors import FormatError, StorageError
from tinyron.domain.models import DatasetManifest, ManifestEntry, Sample
from tinyron.formats import read_ppm, read_voc, write_ppm, write_voc
from tinyron.network import TinyRON
from tinyron.settings import ModelConfig

logger = logging.getLogger(__name__)

WEIGHT_MAGIC = b"RONW"
WEIGHT_VERSION = 1
WEIGHT_SUFFIX = ".ronw"
_HEADER = struct.Struct("<4sII")
_FLOAT = np.dtype("<f4")


def _write_atomic(path: Path, data: bytes, what: str) -> None:
    """Write via a sibling .tmp file and Path.replace."""
    tmp = path.with_suffix(path.suffix + ".tmp")
    try:
        tmp.write_bytes(data)
        tmp.replace(path)
    except OSError as exc:
        msg = f"Failed to write {what} {path}"
        raise StorageError(msg) from exc


class DatasetRepository:
    """Directory of PPM images, VOC annotations and a manifest.json."""

    MANIFEST = "manifest.json"

    def __init__(self, root: Path) -> None:
        """Point at root; nothing is read or created until used."""
        self._root = root

    def save(
        self,
        samples: Sequence[Sample],
        class_names: Sequence[str],
    ) -> DatasetManifest:
        """Write every sample and the manifest; existing files are overwritten."""
        images = self._root / "images"
        annotations = self._root / "annotations"
        try:
            images.mkdir(parents=True, exist_ok=True)
            annotations.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            msg = f"Cannot create dataset directory {self._root}"
            raise StorageError(msg) from exc

        entries = []
        for sample in samples:
            image_name = f"images/{sample.image_id}.ppm"
            annotation_name = f"annotations/{sample.image_id}.xml"
            write_ppm(self._root / image_name, sample.image)
            write_voc(
                self._root / annotation_name,
                sample.annotation,
                class_names,
                filename=Path(image_name).name,
            )
            entries.append(
                ManifestEntry(
                    image_id=sample.image_id,
                    image=image_name,
                    annotation=annotation_name,
                ),
            )
        manifest = DatasetManifest(classes=list(class_names), entries=entries)
        _write_atomic(
            self._root / self.MANIFEST,
            manifest.model_dump_json(indent=2).encode("utf-8"),
            "dataset manifest",
        )
        logger.info("Saved %d samples to %s", len(entries), self._root)
        return manifest

    def manifest(self) -> DatasetManifest:
        """Read and validate manifest.json."""
        path = self._root / self.MANIFEST
        try:
            raw = path.read_bytes()
        except OSError as exc:
            msg = f"No dataset manifest at {path}"
            raise StorageError(msg) from exc
        try:
            return DatasetManifest.model_validate_json(raw)
        except ValidationError as exc:
            msg = f"Corrupt dataset manifest {path}"
            raise FormatError(msg) from exc

    def load(self) -> tuple[list[str], list[Sample]]:
        """Return the class list and every sample, in manifest order."""
        manifest = self.manifest()
        samples = []
        for entry in manifest.entries:
            annotation = read_voc(self._root / entry.annotation, manifest.classes)
            annotation = annotation.model_copy(update={"image_id": entry.image_id})
            image = read_ppm(self._root / entry.image)
            samples.append(Sample(image=image, annotation=annotation))
        logger.info("Loaded %d samples from %s", len(samples), self._root)
        return list(manifest.classes), samples


class TensorEntry(BaseModel):
    """Location of one parameter inside the weight blob."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    name: str
    shape: list[int]
    offset: int = Field(ge=0)


class WeightManifest(BaseModel):
    """JSON header of a weight file."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    model: ModelConfig
    seed: int = 0
    tensors: list[TensorEntry]


def encode_weights(model: TinyRON) -> bytes:
    """Serialize every parameter as little-endian float32 behind a JSON manifest."""
    entries = []
    blobs = []
    offset = 0
    for name, param in model.named_parameters().items():
        blob = param.data.astype(_FLOAT).tobytes()
        entries.append(TensorEntry(name=name, shape=list(param.shape), offset=offset))
        blobs.append(blob)
        offset += len(blob)
    manifest = WeightManifest(model=model.config, seed=model.seed, tensors=entries)
    header = manifest.model_dump_json().encode("utf-8")
    prefix = _HEADER.pack(WEIGHT_MAGIC, WEIGHT_VERSION, len(header))
    return prefix + header + b"".join(blobs)


def decode_weights(
    data: bytes,
    *,
    source: str = "<bytes>",
) -> tuple[WeightManifest, dict[str, NDArray[np.float32]]]:
    """Parse a weight file into its manifest and named float32 arrays."""
    if len(data) < _HEADER.size:
        msg = f"{source}: truncated weight header ({len(data)} bytes)"
        raise FormatError(msg)
    magic, version, length = _HEADER.unpack_from(data)
    if magic != WEIGHT_MAGIC:
        msg = f"{source}: bad magic {magic!r} at byte 0"
        raise FormatError(msg)
    if version != WEIGHT_VERSION:
        msg = f"{source}: unsupported weight file version {version} at byte 4"
        raise FormatError(msg)
    start = _HEADER.size
    try:
        manifest = WeightManifest.model_validate_json(data[start : start + length])
    except ValidationError as exc:
        msg = f"{source}: corrupt manifest at bytes {start}..{start + length}"
        raise FormatError(msg) from exc

    blob = start + length
    arrays = {}
    for entry in manifest.tensors:
        count = int(np.prod(entry.shape))
        end = blob + entry.offset + count * _FLOAT.itemsize
        if end > len(data):
            msg = f"{source}: tensor {entry.name} runs past the end of file (byte {end})"
            raise FormatError(msg)
        values = np.frombuffer(
            data,
            dtype=_FLOAT,
            count=count,
            offset=blob + entry.offset,
        )
        arrays[entry.name] = values.reshape(entry.shape).astype(np.float32)
    return manifest, arrays


def restore(manifest: WeightManifest, arrays: dict[str, NDArray[np.float32]]) -> TinyRON:
    """Rebuild the model a weight file describes and copy its parameters in."""
    model = TinyRON(manifest.model, manifest.seed)
    params = model.named_parameters()
    if set(params) != set(arrays):
        missing = sorted(set(params) - set(arrays))
        extra = sorted(set(arrays) - set(params))
        msg = (
            f"Weight file does not fit its model: missing {missing}, "
            f"unexpected {extra}"
        )
        raise FormatError(msg)
    for name, param in params.items():
        if param.data.shape != arrays[name].shape:
            msg = f"Weight {name}: file shape {arrays[name].shape}, model {param.shape}"
            raise FormatError(msg)
        param.data[...] = arrays[name]
    return model


class CheckpointRepository:
    """Weight files of one training run: ckpt_<iter>, final and nan_<iter> dumps."""

    def __init__(self, directory: Path) -> None:
        """Initialize repository, creating directory if absent."""
        self._directory = directory
        try:
            self._directory.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            msg = f"Cannot create checkpoint directory {directory}"
            raise StorageError(msg) from exc

    @property
    def directory(self) -> Path:
        """Run directory."""
        return self._directory

    def _path(self, name: str) -> Path:
        return self._directory / f"{name}{WEIGHT_SUFFIX}"

    def save(self, name: str, model: TinyRON) -> Path:
        """Write model to <name>.ronw atomically and return the path."""
        path = self._path(name)
        _write_atomic(path, encode_weights(model), "checkpoint")
        logger.info("Saved checkpoint %s", path)
        return path

    def checkpoint(self, iteration: int, model: TinyRON) -> Path:
        """Periodic checkpoint."""
        return self.save(f"ckpt_{iteration}", model)

    def final(self, model: TinyRON) -> Path:
        """Weights at the end of training."""
        return self.save("final", model)

    def dump_nan(self, iteration: int, model: TinyRON) -> Path:
        """State of the model when iteration produced a non-finite value."""
        return self.save(f"nan_{iteration}", model)

    def list_all(self) -> list[Path]:
        """Every weight file in the run directory, sorted by name."""
        return sorted(self._directory.glob(f"*{WEIGHT_SUFFIX}"))


def load_model(path: Path) -> TinyRON:
    """Load a weight file and rebuild its model."""
    try:
        data = path.read_bytes()
    except FileNotFoundError as exc:
        msg = f"Weight file not found: {path}"
        raise StorageError(msg) from exc
    except OSError as exc:
        msg = f"Failed to read weight file {path}"
        raise StorageError(msg) from exc
    manifest, arrays = decode_weights(data, source=str(path))
    model = restore(manifest, arrays)
    logger.info("Loaded %d tensors from %s", len(arrays), path)
    return model
