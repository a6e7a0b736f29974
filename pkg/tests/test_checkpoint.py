import json
import tempfile
from pathlib import Path

import numpy as np
import pytest

from smoothguard.checkpoint import (
    calculate_checksum,
    dumps,
    load_checkpoint,
    model_from_dict,
    model_to_dict,
    save_checkpoint,
)
from smoothguard.exceptions import ConfigurationError, InputError
from smoothguard.models import Architecture, ModelSpec, NoisePlacement, build_model
from smoothguard.noise import NoiseDraw


@pytest.fixture
def temp_dir():
    """Create a temporary directory for testing."""
    with tempfile.TemporaryDirectory() as tmpdirname:
        yield Path(tmpdirname)


@pytest.fixture(params=[Architecture.LINEAR, Architecture.MLP, Architecture.CNN])
def model(request):
    """One model per architecture, with activation noise on every parametric layer."""
    spec = ModelSpec(
        arch=request.param, hidden=6, channels=2, noise_target=NoisePlacement.ACTIVATION
    )
    return build_model(spec, (1, 4, 4), 3, seed=5)


def test_save_load_save_is_byte_identical(temp_dir, model):
    """Reloading and saving again reproduces the file byte for byte."""
    first = temp_dir / "first.json"
    second = temp_dir / "second.json"
    save_checkpoint(model, first)
    save_checkpoint(load_checkpoint(first), second)
    assert first.read_bytes() == second.read_bytes()


def test_reloaded_model_computes_identically(temp_dir, model):
    """A reloaded model gives bit-identical noisy logits."""
    path = temp_dir / "model.json"
    save_checkpoint(model, path)
    loaded = load_checkpoint(path)
    x = np.random.default_rng(0).uniform(size=(3, 1, 4, 4))
    draw = NoiseDraw(4, 2)
    np.testing.assert_array_equal(loaded.forward(x, draw), model.forward(x, draw))
    assert [s.alpha for s in loaded.noise if s] == [s.alpha for s in model.noise if s]


def test_returned_hash_matches_file(temp_dir, model):
    """save_checkpoint returns the SHA-256 of the bytes on disk."""
    path = temp_dir / "model.json"
    digest = save_checkpoint(model, path)
    assert digest == calculate_checksum(path)
    assert len(digest) == 64


def test_checkpoint_records_noise(model):
    """Noise specs survive a dict round trip."""
    restored = model_from_dict(json.loads(dumps(model)))
    assert model_to_dict(restored) == model_to_dict(model)
    for original, loaded in zip(model.noise, restored.noise):
        assert (original is None) == (loaded is None)
        if original is not None:
            assert loaded.target is original.target


def test_no_temporary_files_left(temp_dir, model):
    """The atomic write leaves only the target file behind."""
    save_checkpoint(model, temp_dir / "sub" / "model.json")
    assert [p.name for p in (temp_dir / "sub").iterdir()] == ["model.json"]


def test_missing_checkpoint(temp_dir):
    """A missing file is a configuration error."""
    with pytest.raises(ConfigurationError):
        load_checkpoint(temp_dir / "absent.json")


def test_invalid_json(temp_dir):
    """A file that is not JSON is an input error."""
    path = temp_dir / "broken.json"
    path.write_text("{not json")
    with pytest.raises(InputError):
        load_checkpoint(path)


def test_unsupported_version(model):
    """Unknown format versions are rejected."""
    document = model_to_dict(model)
    document["format_version"] = 99
    with pytest.raises(ConfigurationError, match="format_version"):
        model_from_dict(document)


def test_unknown_layer_kind(model):
    """Unknown layer kinds are rejected with their position."""
    document = model_to_dict(model)
    document["layers"][0]["kind"] = "attention"
    with pytest.raises(ConfigurationError, match="layer 0"):
        model_from_dict(document)
