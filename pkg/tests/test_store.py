import numpy as np
import pytest

from odxu import gbdt, nn, store
from odxu._binary import ContainerError
from odxu.dec import DecModel
from odxu.gbdt import BoostParams
from odxu.payload import PayloadSet


def _models():
    rng = np.random.default_rng(0)
    X = rng.normal(size=(60, 6))
    y = (X[:, 0] > 0).astype(int) + (X[:, 1] > 0)
    return {
        "autoencoder": nn.AutoencoderSpec(6, (5,), 3, 0.1).build(rng),
        "fcnn": nn.FcnnClassifier(nn.build_mlp([6, 8, 3], ["relu", "softmax"], rng)),
        "encoder": nn.build_mlp([6, 4, 3], ["relu", "linear"], rng),
        "dec": DecModel(nn.build_mlp([6, 4, 3], ["relu", "linear"], rng), rng.normal(size=(3, 3))),
        "gbdt": gbdt.train(X, y, BoostParams(rounds=4, max_depth=3), n_classes=3),
    }


def _outputs(kind, model, X):
    if kind == "autoencoder":
        return model.reconstruct(X)
    if kind == "encoder":
        return nn.forward(model, X)
    return model.predict_proba(X)


MODELS = _models()


@pytest.mark.parametrize("kind", sorted(MODELS))
def test_round_trip_identical_predictions(kind, tmp_path):
    model = MODELS[kind]
    path = tmp_path / "m.bin"
    digest = store.save(model, path)
    assert digest == store.sha256_file(path)
    back = store.load(path, kind)
    X = np.random.default_rng(1).normal(size=(100, 6))
    assert np.array_equal(_outputs(kind, back, X), _outputs(kind, model, X))
    assert store.to_bytes(back) == store.to_bytes(model)


def test_payload_round_trip(tmp_path):
    rng = np.random.default_rng(2)
    data = PayloadSet(rng.integers(0, 256, (100, 1500), dtype=np.uint8), rng.integers(0, 3, 100), ["Benign", "a", "b"])
    store.save(data, tmp_path / "d.odxupb")
    back = store.load(tmp_path / "d.odxupb", "payload")
    assert np.array_equal(back.X, data.X) and np.array_equal(back.y, data.y) and back.classes == data.classes


@pytest.mark.parametrize("kind,wrong", [("gbdt", "autoencoder"), ("autoencoder", "gbdt"), ("dec", "gbdt"), ("fcnn", "autoencoder"), ("encoder", "dec")])
def test_cross_kind_rejected(kind, wrong, tmp_path):
    store.save(MODELS[kind], tmp_path / "m")
    with pytest.raises(ContainerError):
        store.load(tmp_path / "m", wrong)


def test_corrupted_magic(tmp_path):
    buf = bytearray(store.to_bytes(MODELS["gbdt"]))
    buf[:4] = b"XXXX"
    with pytest.raises(ContainerError):
        store.from_bytes(bytes(buf))


def test_future_version_named(tmp_path):
    buf = b"ODXUGB9" + store.to_bytes(MODELS["gbdt"])[7:]
    with pytest.raises(ContainerError):
        store.from_bytes(buf)


def test_truncated_container():
    buf = store.to_bytes(MODELS["dec"])
    with pytest.raises(ContainerError):
        store.from_bytes(buf[: len(buf) // 2])


def test_unknown_kind():
    with pytest.raises(ValueError):
        store.from_bytes(store.to_bytes(MODELS["gbdt"]), "forest")


def test_unpersistable_type():
    with pytest.raises(TypeError):
        store.to_bytes({"not": "a model"})


def test_save_is_atomic_replacement(tmp_path):
    path = tmp_path / "m"
    store.save(MODELS["gbdt"], path)
    store.save(MODELS["dec"], path)
    assert isinstance(store.load(path), DecModel)
    assert [p.name for p in tmp_path.iterdir()] == ["m"]
