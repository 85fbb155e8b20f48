"""Binary PGM (P5) export of salience maps."""

import numpy as np

from .exceptions import FormatError, InputShapeError


def to_gray(scores):
    """Min-max scale scores to 8-bit levels, rounding half up.

    A constant map becomes mid-gray (128).
    """
    scores = np.asarray(scores, dtype=np.float64)
    lo, hi = scores.min(), scores.max()
    if hi == lo:
        return np.full(scores.shape, 128, dtype=np.uint8)
    scaled = (scores - lo) / (hi - lo) * 255.0
    return np.floor(scaled + 0.5).astype(np.uint8)


def write_pgm(path, pixels, width, height):
    pixels = np.asarray(pixels, dtype=np.uint8).ravel()
    if pixels.size != width * height:
        raise InputShapeError(f"{pixels.size} pixels do not fill {width}x{height}")
    with open(path, "wb") as f:
        f.write(f"P5\n{width} {height}\n255\n".encode("ascii"))
        f.write(pixels.tobytes())


def render_salience_image(smap, width, height, out_path):
    """Write a salience map as a row-major ``width x height`` grayscale PGM."""
    scores = getattr(smap, "scores", smap)
    if len(scores) != width * height:
        raise InputShapeError(f"map has {len(scores)} scores, image needs {width * height}")
    gray = to_gray(scores)
    write_pgm(out_path, gray, width, height)
    return gray


def read_pgm(path):
    """Parse a P5 file written by :func:`write_pgm`; returns ``(pixels, width, height)``."""
    with open(path, "rb") as f:
        blob = f.read()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(blob) and blob[pos:pos + 1].isspace():
            pos += 1
        start = pos
        while pos < len(blob) and not blob[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError(f"{path}: truncated PGM header")
        tokens.append(blob[start:pos].decode("ascii"))
    if tokens[0] != "P5":
        raise FormatError(f"{path}: not a binary PGM")
    width, height, maxval = (int(t) for t in tokens[1:])
    data = blob[pos + 1:]
    if maxval != 255 or len(data) != width * height:
        raise FormatError(f"{path}: unexpected PGM payload")
    return np.frombuffer(data, dtype=np.uint8).reshape(height, width), width, height
