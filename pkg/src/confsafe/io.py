"""
Tables and documents
====================

ConfSafe writes two kinds of artifacts:

* tables (metrics, per-step diagnostics, replay buffers, value grids) as pandas
  dataframes, written with :py:func:`~confsafe.io.write_table`,
* structured documents (checkpoints, certificates, resolved configurations) as YAML,
  written with :py:func:`~confsafe.io.write_document`.

Documents carry ``format``, ``version`` and ``kind`` keys. Arrays inside a document are
stored exactly, as base64 strings of their little-endian 64-bit float bytes together
with their shape:

.. doctest:: io

    >>> from confsafe.io import encode_array, decode_array
    >>> encoded = encode_array(np.array([[1.0, 2.0]]))
    >>> encoded["shape"], encoded["dtype"]
    ([1, 2], '<f8')
    >>> decode_array(encoded)
    array([[1., 2.]])
"""
from pathlib import Path
from typing import IO, Any, Mapping, Optional, Text, Union

import numpy as np
import pandas as pd

FileInput = Union[Text, Path, IO[Text]]

DOCUMENT_FORMAT = "confsafe"
"""Value of the ``format`` key of every document."""
DOCUMENT_VERSION = 1
"""Current document version."""

EXEMPLARS: Mapping[Text, Path] = {
    "examples": Path(__file__).parent / "data" / "examples",
}
"""Example inputs shipped with the package."""


def write_table(
    table: pd.DataFrame,
    path: Union[Text, Path, IO],
    overwrite: bool = True,
    fileformat: Optional[Text] = None,
    **kwargs,
):
    """Writes a table to file, guessing the format from the filename.

    Args:
        path (Union[Text, pathlib.Path, io.StringIO]): path to an output file or output
            stream.
        overwrite: If ``True``, then will overwrite any existing file.
        fileformat: One of "csv", "json", "feather". Defaults to the file suffix or
            "csv".
    """
    if isinstance(path, (Text, Path)):
        path = Path(path)
        if path.exists() and path.is_dir():
            raise RuntimeError(f"Path {path} is a directory, not a file.")
        if (not overwrite) and path.exists():
            raise RuntimeError(f"Path {path} already exists and overwrite is False")

    if fileformat is None:
        fileformat = getattr(path, "suffix", "") or "csv"
    fileformat = fileformat.lstrip(".")
    if fileformat == "feather":
        table.reset_index().to_feather(path, **kwargs)
    elif fileformat == "json":
        table.to_json(path, **kwargs)
    else:
        table.to_csv(path, float_format=kwargs.pop("float_format", "%.17g"), **kwargs)


def read_table(path: FileInput, schema: Optional[Any] = None) -> pd.DataFrame:
    """Reads a csv table, checked against a schema from :py:mod:`confsafe.schema`."""
    from confsafe.schema import to_schema

    table = pd.read_csv(path, float_precision="round_trip")
    return table if schema is None else to_schema(schema, table)


def encode_array(array) -> Mapping[Text, Any]:
    """Exact text encoding of a float array."""
    from base64 import b64encode

    array = np.ascontiguousarray(array, dtype="<f8")
    return dict(
        dtype="<f8",
        shape=list(array.shape),
        base64=b64encode(array.tobytes()).decode("ascii"),
    )


def decode_array(encoded: Mapping[Text, Any]) -> np.ndarray:
    from base64 import b64decode

    if encoded.get("dtype") != "<f8":
        raise ValueError(f"Unsupported array encoding {encoded.get('dtype')}")
    data = np.frombuffer(b64decode(encoded["base64"]), dtype="<f8")
    return data.reshape([int(u) for u in encoded["shape"]]).astype(float)


def _is_encoded_array(value: Any) -> bool:
    return isinstance(value, Mapping) and set(value) == {"dtype", "shape", "base64"}


def _to_plain(value: Any) -> Any:
    if isinstance(value, np.ndarray):
        return encode_array(value)
    if isinstance(value, Mapping):
        return {str(k): _to_plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_to_plain(v) for v in value]
    if isinstance(value, np.generic):
        return value.item()
    return value


def _from_plain(value: Any) -> Any:
    if _is_encoded_array(value):
        return decode_array(value)
    if isinstance(value, Mapping):
        return {k: _from_plain(v) for k, v in value.items()}
    if isinstance(value, list):
        return [_from_plain(v) for v in value]
    return value


def write_document(
    path: Union[Text, Path, IO],
    kind: Text,
    content: Mapping[Text, Any],
    config: Optional[Mapping] = None,
):
    """Writes a versioned YAML document. Arrays are encoded exactly.

    Args:
        path: output file or stream.
        kind: kind of document, e.g. "model" or "certificate".
        content: data to store.
        config: resolved experiment configuration embedded in the document.
    """
    from yaml import safe_dump

    document = dict(format=DOCUMENT_FORMAT, version=DOCUMENT_VERSION, kind=kind)
    document.update(_to_plain(dict(content)))
    if config is not None:
        document["config"] = _to_plain(config)
    if isinstance(path, (Text, Path)):
        with open(path, "w") as stream:
            safe_dump(document, stream, sort_keys=False)
    else:
        safe_dump(document, path, sort_keys=False)


def read_document(path: FileInput, kind: Optional[Text] = None) -> Mapping[Text, Any]:
    """Reads a document written by :py:func:`write_document`."""
    from yaml import safe_load

    if isinstance(path, (Text, Path)):
        with open(path, "r") as stream:
            document = safe_load(stream)
    else:
        document = safe_load(path)
    if not isinstance(document, Mapping) or document.get("format") != DOCUMENT_FORMAT:
        raise ValueError(f"{path} is not a {DOCUMENT_FORMAT} document")
    if document.get("version") != DOCUMENT_VERSION:
        raise ValueError(f"Unsupported document version {document.get('version')}")
    if kind is not None and document.get("kind") != kind:
        raise ValueError(f"Expected a {kind} document, got {document.get('kind')}")
    return _from_plain(document)
