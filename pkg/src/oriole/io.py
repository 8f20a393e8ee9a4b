"""On-disk formats.

PGM images
    Binary portable graymap: ASCII header ``P5\\n<w> <h>\\n65535\\n`` then
    w*h unsigned 16-bit big-endian samples in row-major order.  A pixel
    value v in [0, 1] is stored as round(v * 65535).

Model binaries
    16-byte header followed by little-endian float64 values::

        bytes 0-3   magic: b"ORFX" (feature extractor) or b"ORCL" (classifier)
        bytes 4-7   format version, uint32 little-endian (currently 1)
        bytes 8-15  first 8 bytes of sha256(architecture descriptor)

    Feature extractor body: the flat parameter vector in layer order
    w1, b1, w2, b2, w3, b3 (each array C-ordered).
    Classifier body: feature extractor parameters, then the head weights
    (feature_dim x n_classes, C-ordered), the head bias (n_classes) and the
    class labels (n_classes, stored as float64).  For classifiers the hashed
    descriptor is the extractor descriptor plus ``;head<n_classes>``.

CSV
    Comma separated, ``\\n`` line endings, one header row.  Floats use
    ``format(v, ".17g")`` so values round-trip exactly; integers and strings
    are written as-is.
"""

import csv
import hashlib
import io as _io
import struct
from pathlib import Path

import numpy as np

from .embedder import Architecture, ClassifierModel, EmbeddingModel
from .errors import InputError

PGM_MAXVAL = 65535
MODEL_VERSION = 1
MAGIC_EXTRACTOR = b"ORFX"
MAGIC_CLASSIFIER = b"ORCL"

# --------------------------------------------------------------------------
# PGM


def encode_pgm(img):
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 2:
        raise InputError(f"PGM needs a 2-D image, got {img.shape}")
    h, w = img.shape
    samples = np.round(np.clip(img, 0.0, 1.0) * PGM_MAXVAL).astype(">u2")
    return f"P5\n{w} {h}\n{PGM_MAXVAL}\n".encode("ascii") + samples.tobytes()


def decode_pgm(raw):
    parts = raw.split(b"\n", 3)
    if len(parts) != 4 or parts[0] != b"P5":
        raise InputError("not a binary PGM")
    w, h = (int(v) for v in parts[1].split())
    maxval = int(parts[2])
    if maxval != PGM_MAXVAL:
        raise InputError(f"unsupported maxval {maxval}")
    data = np.frombuffer(parts[3], dtype=">u2", count=w * h)
    return data.reshape(h, w).astype(np.float64) / PGM_MAXVAL


def write_pgm(path, img):
    Path(path).write_bytes(encode_pgm(img))


def read_pgm(path):
    return decode_pgm(Path(path).read_bytes())


# --------------------------------------------------------------------------
# models


def _header(magic, descriptor):
    digest = hashlib.sha256(descriptor.encode()).digest()[:8]
    return magic + struct.pack("<I", MODEL_VERSION) + digest


def _check_header(raw, magic, descriptor):
    if len(raw) < 16:
        raise InputError("model file truncated")
    if raw[:16] != _header(magic, descriptor):
        raise InputError("model header mismatch (magic, version or architecture)")


def encode_extractor(model):
    body = np.asarray(model.params, dtype="<f8").tobytes()
    return _header(MAGIC_EXTRACTOR, model.arch.descriptor()) + body


def decode_extractor(raw, arch=None):
    arch = arch or Architecture()
    _check_header(raw, MAGIC_EXTRACTOR, arch.descriptor())
    params = np.frombuffer(raw[16:], dtype="<f8").astype(np.float64)
    return EmbeddingModel(arch, params)


def _classifier_descriptor(arch, n_classes):
    return f"{arch.descriptor()};head{n_classes}"


def encode_classifier(clf):
    arch = clf.backbone.arch
    c = len(clf.class_labels)
    body = np.concatenate(
        [
            clf.backbone.params,
            clf.head_w.ravel(),
            clf.head_b,
            np.asarray(clf.class_labels, dtype=np.float64),
        ]
    ).astype("<f8")
    return _header(MAGIC_CLASSIFIER, _classifier_descriptor(arch, c)) + body.tobytes()


def decode_classifier(raw, n_classes, arch=None):
    arch = arch or Architecture()
    _check_header(raw, MAGIC_CLASSIFIER, _classifier_descriptor(arch, n_classes))
    body = np.frombuffer(raw[16:], dtype="<f8").astype(np.float64)
    n, d, c = arch.n_params, arch.feature_dim, n_classes
    if len(body) != n + d * c + 2 * c:
        raise InputError("classifier body has the wrong length")
    backbone = EmbeddingModel(arch, body[:n])
    head_w = body[n : n + d * c].reshape(d, c)
    head_b = body[n + d * c : n + d * c + c]
    labels = tuple(int(v) for v in body[n + d * c + c :])
    return ClassifierModel(backbone, head_w.copy(), head_b.copy(), labels)


# --------------------------------------------------------------------------
# CSV


def fmt(value):
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return format(float(value), ".17g")
    return str(value)


def csv_text(header, rows):
    buf = _io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([fmt(v) for v in row])
    return buf.getvalue()


def write_csv(path, header, rows):
    Path(path).write_text(csv_text(header, rows), encoding="utf-8")


def read_csv(path):
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    return rows[0], rows[1:]
