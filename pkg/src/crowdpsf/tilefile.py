"""TileFile: a self-describing raw float32 image format.

Layout (all text is ASCII)::

    CROWDPSF-TILE 1\\n
    key = value\\n          (one line per header entry)
    ...
    #<spaces>\\n            (padding line, only if needed)
    \\n                     (blank line: end of header)
    <rows * cols little-endian IEEE-754 float32 values, row-major>

The header, including the blank terminator line, is padded to a multiple
of 64 bytes so the payload starts on a 64-byte boundary. Required keys
are ``rows``, ``cols`` and ``dtype`` (always ``<f4``); any other keys are
free-form metadata (scene parameters, seed, provenance). Values are
single-line strings; newlines are not allowed.

Writing then reading returns the float32 payload bit for bit.
"""

import os
import tempfile

import numpy as np

MAGIC = "CROWDPSF-TILE 1"
ALIGN = 64
DTYPE = "<f4"


class TileFormatError(ValueError):
    """Malformed tile file."""


def _header_bytes(rows, cols, meta):
    lines = [MAGIC, f"rows = {rows}", f"cols = {cols}", f"dtype = {DTYPE}"]
    for key, value in (meta or {}).items():
        key = str(key).strip()
        value = str(value)
        if not key or any(c in key for c in "=\n#") or "\n" in value:
            raise TileFormatError(f"invalid header entry {key!r}")
        if key in ("rows", "cols", "dtype"):
            continue
        lines.append(f"{key} = {value}")
    text = "\n".join(lines) + "\n"
    n = len(text.encode("ascii")) + 1  # + blank terminator line
    if n % ALIGN:
        # a padding line "#" + spaces + "\n" of at least 2 bytes
        pad = (-(n + 2)) % ALIGN
        text += "#" + " " * pad + "\n"
    out = (text + "\n").encode("ascii")
    assert len(out) % ALIGN == 0
    return out


def encode(data, meta=None):
    a = np.asarray(data)
    if a.ndim != 2:
        raise TileFormatError(f"tiles are 2D, got shape {a.shape}")
    payload = np.ascontiguousarray(a, dtype=DTYPE)
    return _header_bytes(a.shape[0], a.shape[1], meta) + payload.tobytes()


def decode(buf):
    """Parse bytes; returns ``(array float32 (rows, cols), meta dict)``."""
    end = buf.find(b"\n\n")
    if not buf.startswith(MAGIC.encode() + b"\n") or end < 0:
        raise TileFormatError("not a tile file (missing magic line or header terminator)")
    start = end + 2
    if start % ALIGN:
        raise TileFormatError(f"payload offset {start} is not {ALIGN}-byte aligned")
    meta = {}
    for line in buf[:end].decode("ascii").split("\n")[1:]:
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition(" = ")
        if not sep:
            raise TileFormatError(f"bad header line {line!r}")
        meta[key] = value
    try:
        rows, cols = int(meta.pop("rows")), int(meta.pop("cols"))
        dtype = meta.pop("dtype")
    except (KeyError, ValueError) as exc:
        raise TileFormatError(f"header lacks valid rows/cols/dtype: {exc}") from None
    if dtype != DTYPE:
        raise TileFormatError(f"unsupported dtype {dtype!r}")
    payload = buf[start:]
    if len(payload) != rows * cols * 4:
        raise TileFormatError(f"payload has {len(payload)} bytes, header says {rows}x{cols} float32")
    data = np.frombuffer(payload, dtype=DTYPE).reshape(rows, cols)
    return data.astype(np.float32), meta


def atomic_write_bytes(path, data):
    """Write ``data`` to ``path`` via a temporary file in the same directory and a rename."""
    path = os.fspath(path)
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except OSError:
            pass
        raise


def atomic_write_text(path, text):
    atomic_write_bytes(path, text.encode("utf-8"))


def write_tile(path, data, meta=None):
    atomic_write_bytes(path, encode(data, meta))


def read_tile(path):
    with open(path, "rb") as f:
        return decode(f.read())


def write_fits(path, data, meta=None):
    """FITS export; needs the optional ``astropy`` dependency."""
    try:
        from astropy.io import fits
    except ImportError as exc:
        raise RuntimeError("FITS support requires astropy (pip install 'artifact[fits]')") from exc
    hdu = fits.PrimaryHDU(np.asarray(data, dtype=np.float32))
    for key, value in (meta or {}).items():
        card = str(key).upper().replace(".", "_")[:8]
        try:
            hdu.header[card] = value
        except ValueError:
            pass
    with tempfile.NamedTemporaryFile(dir=os.path.dirname(os.path.abspath(path)) or ".",
                                     suffix=".fits", delete=False) as tmp:
        name = tmp.name
    try:
        hdu.writeto(name, overwrite=True)
        os.replace(name, path)
    finally:
        if os.path.exists(name):
            os.unlink(name)
