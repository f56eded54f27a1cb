"""Bit-exact persistence: matrix files, adapter checkpoints, config files.

Matrix file (MAT1), little-endian throughout::

    offset  size  field
    0       4     magic b"MAT1"
    4       8     rows, u64
    12      8     cols, u64
    20      8rc   entries, f64, row-major

Total length is exactly 20 + 8 * rows * cols bytes.

Adapter checkpoint (ADPT1)::

    offset  size  field
    0       5     magic b"ADPT1"
    5       1     method tag, u8 (0 lora, 1 para, 2 deft)
    6       1     backend tag, u8 (0 qr, 1 tsvd, 2 lrmf, 3 nmf, 4 eig,
                  5 relax, 6 relax_nmf; 0 and ignored for lora)
    7       8     rank, u64
    15      8     alpha, f64
    23      8     lr_p, f64
    31      8     lr_r, f64
    39      8     init_stddev, f64
    47      8     seed, u64
    55      8     nmf_iters, u64 (0 for lora)
    63      8     nmf_tol, f64 (0 for lora)
    71      32    sha-256 of the base weight (see below)
    103     8     section count, u64
    111     ...   sections: name length u64, name utf-8, embedded MAT1

The header carries the full adapter configuration, not just the method
tags, because reloading must reproduce the original forward pass bit for
bit and the latent factorization depends on every one of those knobs.

The base-weight hash is sha-256 over (rows u64 LE || cols u64 LE ||
row-major f64 LE entries), i.e. over the MAT1 payload without the magic.
Loading a checkpoint against a base weight whose hash differs is refused:
adapter trainables are meaningless away from the exact weights they were
trained against.

Config files are UTF-8 text, one ``key = value`` per line; blank lines and
lines starting with ``#`` are ignored. Keys mirror AdapterConfig: method,
rank, alpha, backend, lr_p, lr_r, init_stddev, seed, nmf_iters, nmf_tol.
Unknown or duplicate keys are errors.
"""

from __future__ import annotations

import hashlib
import struct

import numpy as np

from deft.adapters import AdapterConfig, AdapterState, trainables
from deft.decompose import Backend
from deft.matcore import as_matrix, freeze

MAT_MAGIC = b"MAT1"
ADPT_MAGIC = b"ADPT1"

METHOD_TAGS = {"lora": 0, "para": 1, "deft": 2}
METHOD_NAMES = {v: k for k, v in METHOD_TAGS.items()}
BACKEND_TAGS = {"qr": 0, "tsvd": 1, "lrmf": 2, "nmf": 3, "eig": 4, "relax": 5, "relax_nmf": 6}
BACKEND_NAMES = {v: k for k, v in BACKEND_TAGS.items()}

CONFIG_KEYS = ("method", "rank", "alpha", "backend", "lr_p", "lr_r",
               "init_stddev", "seed", "nmf_iters", "nmf_tol")


class FormatError(ValueError):
    """File contents violate the declared format."""


class PairingError(ValueError):
    """Checkpoint does not belong to the supplied base weight."""


def _mat_payload(m):
    m = np.ascontiguousarray(m, dtype=np.float64)
    head = struct.pack("<QQ", m.shape[0], m.shape[1])
    return head + m.astype("<f8", copy=False).tobytes(order="C")


def matrix_bytes(m):
    """Full MAT1 blob for matrix `m`."""
    return MAT_MAGIC + _mat_payload(m)


def matrix_hash(m):
    """sha-256 digest (32 bytes) of a matrix's MAT1 payload."""
    return hashlib.sha256(_mat_payload(m)).digest()


def state_hash(state):
    """sha-256 hex digest over all trainable matrices of an adapter state."""
    h = hashlib.sha256()
    for name, mat in trainables(state).items():
        h.update(name.encode())
        h.update(_mat_payload(mat))
    return h.hexdigest()


def save_matrix(m, path):
    """Write `m` to `path` in MAT1 format."""
    m = as_matrix(m, "matrix")
    with open(path, "wb") as f:
        f.write(matrix_bytes(m))


def _parse_matrix(buf, offset, label):
    """Decode one embedded MAT1 blob starting at `offset`; return (matrix, end)."""
    if len(buf) < offset + 20:
        raise FormatError(
            f"{label}: header truncated, need {offset + 20} bytes, file has {len(buf)}"
        )
    magic = buf[offset:offset + 4]
    if magic != MAT_MAGIC:
        raise FormatError(f"{label}: bad magic {magic!r}, expected {MAT_MAGIC!r}")
    rows, cols = struct.unpack_from("<QQ", buf, offset + 4)
    if rows < 1 or cols < 1:
        raise FormatError(f"{label}: invalid dims {rows}x{cols}")
    end = offset + 20 + 8 * rows * cols
    if len(buf) < end:
        raise FormatError(
            f"{label}: data truncated, need {end} bytes, file has {len(buf)}"
        )
    data = np.frombuffer(buf, dtype="<f8", count=rows * cols, offset=offset + 20)
    return data.reshape(rows, cols).copy(), end


def load_matrix(path):
    """Read a MAT1 file; errors name the failing field."""
    with open(path, "rb") as f:
        buf = f.read()
    m, end = _parse_matrix(buf, 0, str(path))
    if len(buf) != end:
        raise FormatError(f"{path}: trailing bytes, expected {end}, file has {len(buf)}")
    return m


def save_adapter(state, path):
    """Write an adapter checkpoint in ADPT1 format."""
    cfg = state.cfg
    if cfg.backend is None:
        backend_tag, nmf_iters, nmf_tol = 0, 0, 0.0
    else:
        backend_tag = BACKEND_TAGS[cfg.backend.kind]
        nmf_iters, nmf_tol = cfg.backend.nmf_iters, cfg.backend.nmf_tol
    parts = [
        ADPT_MAGIC,
        struct.pack("<BB", METHOD_TAGS[cfg.method], backend_tag),
        struct.pack("<Qd", cfg.rank, cfg.alpha),
        struct.pack("<dd", cfg.lr_p, cfg.lr_r),
        struct.pack("<dQ", cfg.init_stddev, cfg.seed),
        struct.pack("<Qd", nmf_iters, nmf_tol),
        matrix_hash(state.w0),
    ]
    mats = trainables(state)
    parts.append(struct.pack("<Q", len(mats)))
    for name, mat in mats.items():
        raw = name.encode()
        parts.append(struct.pack("<Q", len(raw)))
        parts.append(raw)
        parts.append(matrix_bytes(mat))
    with open(path, "wb") as f:
        f.write(b"".join(parts))


_EXPECTED_SECTIONS = {
    "lora": ("a", "b_lo"),
    "para": ("q_latent",),
    "deft": ("p_latent", "r"),
}


def load_adapter(path, w0):
    """Load an ADPT1 checkpoint and rebind it to `w0`.

    The stored base-weight hash must match `w0` exactly; a mismatch raises
    PairingError because the checkpoint was trained against a different
    base weight.
    """
    with open(path, "rb") as f:
        buf = f.read()
    label = str(path)
    if len(buf) < 111:
        raise FormatError(f"{label}: header truncated, need 111 bytes, file has {len(buf)}")
    if buf[:5] != ADPT_MAGIC:
        raise FormatError(f"{label}: bad magic {buf[:5]!r}, expected {ADPT_MAGIC!r}")
    method_tag, backend_tag = struct.unpack_from("<BB", buf, 5)
    if method_tag not in METHOD_NAMES:
        raise FormatError(f"{label}: unsupported method tag {method_tag}")
    if backend_tag not in BACKEND_NAMES:
        raise FormatError(f"{label}: unsupported backend tag {backend_tag}")
    rank, alpha = struct.unpack_from("<Qd", buf, 7)
    lr_p, lr_r = struct.unpack_from("<dd", buf, 23)
    init_stddev, seed = struct.unpack_from("<dQ", buf, 39)
    nmf_iters, nmf_tol = struct.unpack_from("<Qd", buf, 55)
    stored_hash = buf[71:103]
    (count,) = struct.unpack_from("<Q", buf, 103)

    method = METHOD_NAMES[method_tag]
    try:
        if method == "lora":
            backend = None
        else:
            backend = Backend(BACKEND_NAMES[backend_tag], rank,
                              nmf_iters=nmf_iters, nmf_tol=nmf_tol)
        cfg = AdapterConfig(method=method, rank=rank, alpha=alpha, backend=backend,
                            lr_p=lr_p, lr_r=lr_r, init_stddev=init_stddev, seed=seed)
    except ValueError as exc:
        raise FormatError(f"{label}: invalid stored config: {exc}") from exc

    w0 = freeze(as_matrix(w0, "w0"))
    if matrix_hash(w0) != stored_hash:
        raise PairingError(
            f"{label}: checkpoint was trained against a different base weight "
            "(stored hash does not match the supplied w0)"
        )

    offset = 111
    sections = {}
    for i in range(count):
        if len(buf) < offset + 8:
            raise FormatError(f"{label}: section {i} name length truncated")
        (name_len,) = struct.unpack_from("<Q", buf, offset)
        offset += 8
        if len(buf) < offset + name_len:
            raise FormatError(f"{label}: section {i} name truncated")
        name = buf[offset:offset + name_len].decode()
        offset += name_len
        mat, offset = _parse_matrix(buf, offset, f"{label}: section {name!r}")
        sections[name] = mat
    if len(buf) != offset:
        raise FormatError(f"{label}: trailing bytes, expected {offset}, file has {len(buf)}")

    expected = _EXPECTED_SECTIONS[method]
    if tuple(sections) != expected:
        raise FormatError(
            f"{label}: sections {tuple(sections)} do not match expected {expected}"
        )
    m, n = w0.shape
    shapes = {
        "a": (rank, n), "b_lo": (m, rank),
        "q_latent": (m, rank), "p_latent": (m, rank), "r": (rank, n),
    }
    for name, mat in sections.items():
        if mat.shape != shapes[name]:
            raise FormatError(
                f"{label}: section {name!r} has shape {mat.shape}, expected {shapes[name]}"
            )

    state = AdapterState(cfg=cfg, w0=w0)
    for name, mat in sections.items():
        setattr(state, name, mat)
    return state


def parse_config(text):
    """Parse ``key = value`` config text into an AdapterConfig.

    Unknown keys, duplicate keys and malformed lines fail fast. Backend
    names accept hyphens interchangeably with underscores.
    """
    seen = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise FormatError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        value = value.strip()
        if key not in CONFIG_KEYS:
            raise FormatError(f"line {lineno}: unknown key {key!r}")
        if key in seen:
            raise FormatError(f"line {lineno}: duplicate key {key!r}")
        if not value:
            raise FormatError(f"line {lineno}: empty value for {key!r}")
        seen[key] = (lineno, value)

    for req in ("method", "rank"):
        if req not in seen:
            raise FormatError(f"missing required config key {req!r}")

    def take(key, conv, default=None):
        if key not in seen:
            return default
        lineno, value = seen[key]
        try:
            return conv(value)
        except ValueError as exc:
            raise FormatError(f"line {lineno}: bad value for {key!r}: {value!r}") from exc

    method = take("method", str)
    rank = take("rank", int)
    backend_kind = take("backend", lambda v: v.replace("-", "_"))
    nmf_iters = take("nmf_iters", int)
    nmf_tol = take("nmf_tol", float)

    backend = None
    if backend_kind is not None:
        kwargs = {}
        if nmf_iters is not None:
            kwargs["nmf_iters"] = nmf_iters
        if nmf_tol is not None:
            kwargs["nmf_tol"] = nmf_tol
        try:
            backend = Backend(backend_kind, rank, **kwargs)
        except ValueError as exc:
            raise FormatError(f"bad backend config: {exc}") from exc
    elif nmf_iters is not None or nmf_tol is not None:
        raise FormatError("nmf_iters/nmf_tol given without a backend key")

    kwargs = {"method": method, "rank": rank, "backend": backend}
    alpha = take("alpha", float)
    if alpha is not None:
        kwargs["alpha"] = alpha
    for key, conv in (("lr_p", float), ("lr_r", float),
                      ("init_stddev", float), ("seed", int)):
        val = take(key, conv)
        if val is not None:
            kwargs[key] = val
    try:
        return AdapterConfig(**kwargs)
    except ValueError as exc:
        raise FormatError(f"invalid config: {exc}") from exc


def read_config(path):
    with open(path, "r", encoding="utf-8") as f:
        return parse_config(f.read())
