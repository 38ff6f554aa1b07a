"""
Parameter checkpoints: a flat little-endian binary file plus a JSON manifest
describing the shape, dtype and activation of every tensor.
"""

import json
import logging
from pathlib import Path
from typing import Tuple, Union

import numpy as np

from delaypipe.errors import ShapeError
from delaypipe.nn_core import Layer, Mlp

logger = logging.getLogger(__name__)

MANIFEST_VERSION = 1


def checkpoint_paths(path: Union[str, Path]) -> Tuple[Path, Path]:
    path = Path(path)
    return path.with_suffix(".bin"), path.with_suffix(".json")


def save_checkpoint(mlp: Mlp, path: Union[str, Path]) -> Tuple[Path, Path]:
    bin_path, manifest_path = checkpoint_paths(path)
    dtype = mlp.layers[0].W.dtype
    manifest = {"version": MANIFEST_VERSION, "dtype": np.dtype(dtype).newbyteorder("<").str, "layers": []}
    with open(bin_path, "wb") as f:
        for layer in mlp.layers:
            for tensor in (layer.W, layer.b):
                f.write(np.ascontiguousarray(tensor, dtype=manifest["dtype"]).tobytes())
            manifest["layers"].append({"W": list(layer.W.shape), "b": list(layer.b.shape), "activation": layer.activation})
    manifest_path.write_text(json.dumps(manifest, indent=2) + "\n")
    logger.info(f"Saved checkpoint with {mlp.num_layers} layers to {bin_path}")
    return bin_path, manifest_path


def load_checkpoint(path: Union[str, Path]) -> Mlp:
    bin_path, manifest_path = checkpoint_paths(path)
    manifest = json.loads(manifest_path.read_text())
    dtype = np.dtype(manifest["dtype"])
    data = np.frombuffer(bin_path.read_bytes(), dtype=dtype)
    expected = sum(int(np.prod(spec["W"])) + int(np.prod(spec["b"])) for spec in manifest["layers"])
    if data.size != expected:
        raise ShapeError(f"Checkpoint {bin_path} holds {data.size} values, manifest describes {expected}")
    layers = []
    offset = 0
    for spec in manifest["layers"]:
        tensors = []
        for key in ("W", "b"):
            shape = tuple(spec[key])
            size = int(np.prod(shape))
            tensors.append(data[offset : offset + size].reshape(shape).astype(dtype.newbyteorder("="), copy=True))
            offset += size
        layers.append(Layer(tensors[0], tensors[1], spec["activation"]))
    return Mlp(layers)
