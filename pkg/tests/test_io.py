from io import StringIO

import numpy as np
import pandas as pd
from pytest import approx, fixture, raises


@fixture
def metrics():
    return pd.DataFrame(
        {
            "episode": [0, 1],
            "seed": [3, 4],
            "filtered": [True, False],
            "return": [-0.1, -2.5],
            "cost": [0.0, 1.0],
            "violations": [0, 3],
            "interventions": [12, 0],
        }
    )


def test_table_roundtrip_keeps_floats(tmp_path, metrics):
    from confsafe.io import read_table, write_table
    from confsafe.schema import METRICS

    metrics["return"] = [0.1 + 0.2, -1 / 3]
    write_table(metrics, tmp_path / "metrics.csv", index=False)
    table = read_table(tmp_path / "metrics.csv", METRICS)
    assert table["return"].tolist() == [0.1 + 0.2, -1 / 3]
    assert table["cost"].dtype == np.float64
    assert table["filtered"].tolist() == [True, False]


def test_write_table_refuses_overwrite(tmp_path, metrics):
    from confsafe.io import write_table

    path = tmp_path / "metrics.csv"
    write_table(metrics, path)
    with raises(RuntimeError, match="overwrite"):
        write_table(metrics, path, overwrite=False)
    with raises(RuntimeError, match="directory"):
        write_table(metrics, tmp_path)
    write_table(metrics, path, index=False)
    assert len(pd.read_csv(path)) == 2


def test_write_table_json(tmp_path, metrics):
    from confsafe.io import write_table

    write_table(metrics, tmp_path / "metrics.json")
    assert pd.read_json(tmp_path / "metrics.json")["violations"].tolist() == [0, 3]
    stream = StringIO()
    write_table(metrics, stream, fileformat="csv", index=False)
    assert stream.getvalue().splitlines()[0].startswith("episode,seed")


def test_arrays_are_encoded_exactly():
    from confsafe.io import decode_array, encode_array

    array = np.random.default_rng(0).normal(size=(3, 4)) / 3
    encoded = encode_array(array)
    assert encoded["shape"] == [3, 4]
    assert np.array_equal(decode_array(encoded), array)
    with raises(ValueError):
        decode_array(dict(encoded, dtype="<f4"))


def test_document_roundtrip(tmp_path):
    from confsafe.io import DOCUMENT_FORMAT, DOCUMENT_VERSION, read_document
    from confsafe.io import write_document

    weights = np.random.default_rng(1).normal(size=(2, 5))
    content = dict(
        beta=np.float64(1.5),
        count=np.int64(3),
        members=[dict(weight_0=weights)],
        hidden=(8, 8),
    )
    path = tmp_path / "model.yaml"
    write_document(path, "model", content, config=dict(seed=2, grid=[0.5]))
    document = read_document(path, "model")
    assert document["format"] == DOCUMENT_FORMAT
    assert document["version"] == DOCUMENT_VERSION
    assert document["kind"] == "model"
    assert document["beta"] == 1.5
    assert document["count"] == 3
    assert document["hidden"] == [8, 8]
    assert np.array_equal(document["members"][0]["weight_0"], weights)
    assert document["config"] == dict(seed=2, grid=[0.5])


def test_document_streams():
    from confsafe.io import read_document, write_document

    stream = StringIO()
    write_document(stream, "certificate", dict(rate=np.array([0.25])))
    stream.seek(0)
    assert read_document(stream)["rate"] == approx([0.25])


def test_read_document_checks_header(tmp_path):
    from yaml import safe_dump

    from confsafe.io import read_document, write_document

    path = tmp_path / "document.yaml"
    write_document(path, "model", dict(beta=1.0))
    with raises(ValueError, match="Expected a certificate"):
        read_document(path, "certificate")

    path.write_text(safe_dump(dict(format="confsafe", version=99, kind="model")))
    with raises(ValueError, match="version"):
        read_document(path)
    path.write_text(safe_dump(dict(beta=1.0)))
    with raises(ValueError, match="not a confsafe document"):
        read_document(path)


def test_exemplars_exist():
    from confsafe.io import EXEMPLARS

    names = {u.name for u in EXEMPLARS["examples"].glob("*.yaml")}
    assert {"pitch.yaml", "double_integrator.yaml"} <= names
