# ffpipe/model.py
"""
Trained network container and model files.

A model file is a short header followed by one LayerSnapshot frame per FF
layer, then the softmax head and perfopt heads when present. Frames use the
same encoding and CRC as the TCP transport.
"""
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Union

import numpy as np

from .classify import SoftmaxHead, goodness_scores, predict_softmax_batch
from .data import Dataset
from .exceptions import ChecksumError, ModelFileError, ProtocolError, ValidationError
from .layers import FFLayer
from .perfopt import PerLayerHead, predict_perfopt_batch
from .wire import HEADER, TRAILER, LayerSnapshot, MsgType, SnapshotKind, decode_frame, encode_frame, parse_header

logger = logging.getLogger(__name__)

MODEL_MAGIC = b'FFPM'
MODEL_VERSION = 1
MODEL_HEADER = struct.Struct('<4sBHHHd')

PREDICT_CHUNK = 4096


def _in_chunks(predict, images: np.ndarray) -> np.ndarray:
    preds = [predict(images[i:i + PREDICT_CHUNK]) for i in range(0, len(images), PREDICT_CHUNK)]
    return np.concatenate(preds) if preds else np.zeros(0, dtype=np.int64)


@dataclass
class Model:
    """FF layers plus whichever classifier heads were trained with them."""
    layers: List[FFLayer]
    num_classes: int
    head: Optional[SoftmaxHead] = None
    perfopt_heads: List[PerLayerHead] = field(default_factory=list)

    @classmethod
    def from_engine(cls, engine) -> 'Model':
        """Snapshot of a ChapterEngine's current network."""
        return cls([layer.copy() for layer in engine.layers], engine.plan.num_classes,
                   engine.head.copy() if engine.head is not None else None,
                   [h.copy() for h in engine.perfopt_heads])

    @property
    def dtype(self) -> np.dtype:
        return self.layers[0].weights.dtype

    @property
    def theta(self) -> float:
        return self.layers[0].theta

    def predict(self, images: np.ndarray, classifier: str = 'goodness') -> np.ndarray:
        """
        Classify a batch of raw images.

        Args:
            images: n x d pixels in [0, 1]
            classifier: 'goodness', 'softmax', 'perfopt-last' or 'perfopt-all'

        Raises:
            ValidationError: If the model lacks what the classifier needs
        """
        images = np.asarray(images, dtype=self.dtype)
        if classifier == 'goodness':
            return np.argmax(goodness_scores(self.layers, images, self.num_classes), axis=1)
        if classifier == 'softmax':
            if self.head is None:
                raise ValidationError("model has no softmax head")
            return _in_chunks(lambda chunk: predict_softmax_batch(self.head, self.layers, chunk), images)
        if classifier in ('perfopt-last', 'perfopt-all'):
            if not self.perfopt_heads:
                raise ValidationError("model has no perfopt heads")
            mode = classifier.split('-', 1)[1]
            return _in_chunks(lambda chunk: predict_perfopt_batch(self.layers, self.perfopt_heads, chunk, mode), images)
        raise ValidationError(f"Unknown classifier: {classifier}")

    def accuracy(self, dataset: Dataset, classifier: str = 'goodness') -> float:
        """Percentage of ``dataset`` classified correctly."""
        if len(dataset) == 0:
            raise ValidationError(f"{dataset.name} is empty")
        predicted = self.predict(dataset.images, classifier)
        return 100.0 * float(np.mean(predicted == dataset.labels))

    def snapshots(self, chapter: int = 0) -> List[LayerSnapshot]:
        snaps = [LayerSnapshot.from_layer(layer, i, chapter) for i, layer in enumerate(self.layers)]
        if self.head is not None:
            snaps.append(LayerSnapshot.from_softmax_head(self.head, len(self.layers), chapter))
        snaps.extend(LayerSnapshot.from_perfopt_head(h, chapter) for h in self.perfopt_heads)
        return snaps

    def save(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        snaps = self.snapshots()
        header = MODEL_HEADER.pack(MODEL_MAGIC, MODEL_VERSION, len(self.layers), self.num_classes,
                                   len(snaps), self.theta)
        with open(path, 'wb') as f:
            f.write(header)
            for snap in snaps:
                f.write(encode_frame(MsgType.LAYER_SNAPSHOT, snap.encode()))
        logger.info("Saved %d-layer model to %s", len(self.layers), path)
        return path

    @classmethod
    def load(cls, path: Union[str, Path]) -> 'Model':
        """
        Read a model file.

        Raises:
            ModelFileError: Missing, truncated or corrupt file
        """
        path = Path(path)
        if not path.exists():
            raise ModelFileError(f"Model file not found: {path}")
        data = path.read_bytes()
        if len(data) < MODEL_HEADER.size:
            raise ModelFileError(f"{path}: shorter than the model header")
        magic, version, num_layers, num_classes, count, theta = MODEL_HEADER.unpack_from(data)
        if magic != MODEL_MAGIC:
            raise ModelFileError(f"{path}: not a model file (magic {magic!r})")
        if version != MODEL_VERSION:
            raise ModelFileError(f"{path}: unsupported model version {version}")

        snaps = []
        offset = MODEL_HEADER.size
        try:
            for _ in range(count):
                _, length = parse_header(data[offset:offset + HEADER.size])
                end = offset + HEADER.size + length + TRAILER.size
                msg_type, payload = decode_frame(data[offset:end])
                if msg_type != MsgType.LAYER_SNAPSHOT:
                    raise ProtocolError(f"unexpected {msg_type.name} frame")
                snaps.append(LayerSnapshot.decode(payload))
                offset = end
        except (ProtocolError, ChecksumError) as e:
            raise ModelFileError(f"{path}: corrupt model ({e})")
        if offset != len(data):
            raise ModelFileError(f"{path}: {len(data) - offset} trailing bytes")

        layers = [s.to_layer(theta) for s in snaps if s.kind == SnapshotKind.FF_LAYER]
        heads = [s.to_softmax_head() for s in snaps if s.kind == SnapshotKind.SOFTMAX_HEAD]
        perfopt = [s.to_perfopt_head() for s in snaps if s.kind == SnapshotKind.PERFOPT_HEAD]
        if len(layers) != num_layers:
            raise ModelFileError(f"{path}: header lists {num_layers} layers, file holds {len(layers)}")
        return cls(layers, num_classes, heads[0] if heads else None, perfopt)
