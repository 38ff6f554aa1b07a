import json

import numpy as np
import pytest

from delaypipe.checkpoint import checkpoint_paths, load_checkpoint, save_checkpoint
from delaypipe.errors import ShapeError
from delaypipe.nn_core import init_mlp


def test_checkpoint_round_trip(tmp_path):
    mlp = init_mlp([4, 6, 3], seed=2)
    mlp.layers[0].b[:] = 0.5
    bin_path, manifest_path = save_checkpoint(mlp, tmp_path / "model")
    assert bin_path.name == "model.bin"
    manifest = json.loads(manifest_path.read_text())
    assert manifest["dtype"] == "<f8"
    assert manifest["layers"][0] == {"W": [6, 4], "b": [6], "activation": "relu"}
    assert bin_path.stat().st_size == 8 * (6 * 4 + 6 + 3 * 6 + 3)

    loaded = load_checkpoint(tmp_path / "model")
    assert loaded.sizes == [4, 6, 3]
    for a, b in zip(mlp.layers, loaded.layers):
        assert np.array_equal(a.W, b.W)
        assert np.array_equal(a.b, b.b)
        assert a.activation == b.activation
    # loaded arrays are writable copies
    loaded.layers[0].W[0, 0] = 1.0


def test_checkpoint_size_mismatch(tmp_path):
    save_checkpoint(init_mlp([2, 2], seed=0), tmp_path / "m")
    bin_path, _ = checkpoint_paths(tmp_path / "m")
    bin_path.write_bytes(bin_path.read_bytes()[:-8])
    with pytest.raises(ShapeError, match="manifest describes 6"):
        load_checkpoint(tmp_path / "m")
