"""Binary persistence for datasets, mixture models and pilot matrices.

All containers are little-endian with a short ASCII magic:

* ``FDDPL1`` datasets: magic, u8 complex itemsize (8 or 16), u32 n_tx,
  u32 n_rx, u64 m, then the (m, n_tx*n_rx) samples row-major.
* ``FDDGMM1`` mixture models: magic, u8 itemsize (16), u32 k_tx, k_rx,
  n_tx, n_rx, the K combined weights as f64, then the packed lower
  triangles of the transmit- and receive-side component covariances.  A
  JSON sidecar (same path + ".json") carries fit metadata.
* ``FDDPM1`` pilot matrices: magic, u8 itemsize (16), u32 n_p, u32 n_tx,
  f64 rho, then the matrix row-major.  Codebooks are a u32 count followed
  by that many pilot records.

CSV exports interleave real and imaginary parts for inspection and
cross-implementation diffing.
"""

from __future__ import annotations

import csv
import json
import struct
from pathlib import Path

import numpy as np

from .gmm import GmmModel
from .pilot_design import PilotCodebook, PilotMatrix

_DATASET_MAGIC = b"FDDPL1"
_GMM_MAGIC = b"FDDGMM1"
_PILOT_MAGIC = b"FDDPM1"

_DTYPES = {8: np.dtype("<c8"), 16: np.dtype("<c16")}


def _read_exact(f, n: int) -> bytes:
    buf = f.read(n)
    if len(buf) != n:
        raise ValueError("truncated file")
    return buf


def _expect_magic(f, magic: bytes) -> None:
    got = _read_exact(f, len(magic))
    if got != magic:
        raise ValueError(f"bad magic {got!r}, expected {magic!r}")


def save_dataset(path, h: np.ndarray, n_tx: int, n_rx: int) -> None:
    """Write vectorized channels (m, n_tx*n_rx) to an FDDPL1 container."""
    h = np.ascontiguousarray(h)
    itemsize = 8 if h.dtype == np.complex64 else 16
    data = h.astype(_DTYPES[itemsize], copy=False)
    if h.shape[1] != n_tx * n_rx:
        raise ValueError("sample length must equal n_tx * n_rx")
    with open(path, "wb") as f:
        f.write(_DATASET_MAGIC)
        f.write(struct.pack("<BIIQ", itemsize, n_tx, n_rx, h.shape[0]))
        f.write(data.tobytes())


def load_dataset(path) -> tuple[np.ndarray, int, int]:
    with open(path, "rb") as f:
        _expect_magic(f, _DATASET_MAGIC)
        itemsize, n_tx, n_rx, m = struct.unpack("<BIIQ", _read_exact(f, 17))
        dtype = _DTYPES[itemsize]
        h = np.frombuffer(
            _read_exact(f, m * n_tx * n_rx * itemsize), dtype=dtype
        ).reshape(m, n_tx * n_rx)
    return h.copy(), n_tx, n_rx


def _pack_lower(c: np.ndarray) -> np.ndarray:
    i, j = np.tril_indices(c.shape[-1])
    return np.ascontiguousarray(c[..., i, j])


def _unpack_lower(packed: np.ndarray, d: int) -> np.ndarray:
    i, j = np.tril_indices(d)
    out = np.zeros((*packed.shape[:-1], d, d), dtype=complex)
    out[..., i, j] = packed
    strict = i != j
    out[..., j[strict], i[strict]] = packed[..., strict].conj()
    return out


def save_gmm(path, model: GmmModel, metadata: dict | None = None) -> None:
    """Write a mixture model plus its JSON metadata sidecar."""
    with open(path, "wb") as f:
        f.write(_GMM_MAGIC)
        f.write(
            struct.pack(
                "<BIIII",
                16,
                model.k_tx,
                model.k_rx,
                model.n_tx,
                model.n_rx,
            )
        )
        f.write(model.weights.astype("<f8").tobytes())
        f.write(_pack_lower(model.cov_tx_components).astype("<c16").tobytes())
        f.write(_pack_lower(model.cov_rx_components).astype("<c16").tobytes())
    sidecar = dict(metadata or {})
    if model.fit_log and "fit" not in sidecar:
        sidecar["fit"] = model.fit_log
    Path(str(path) + ".json").write_text(json.dumps(sidecar, indent=2))


def load_gmm(path) -> tuple[GmmModel, dict]:
    with open(path, "rb") as f:
        _expect_magic(f, _GMM_MAGIC)
        itemsize, k_tx, k_rx, n_tx, n_rx = struct.unpack(
            "<BIIII", _read_exact(f, 17)
        )
        k = k_tx * k_rx
        weights = np.frombuffer(_read_exact(f, 8 * k), dtype="<f8").copy()
        n_tri_tx = n_tx * (n_tx + 1) // 2
        n_tri_rx = n_rx * (n_rx + 1) // 2
        cov_tx = _unpack_lower(
            np.frombuffer(
                _read_exact(f, itemsize * k_tx * n_tri_tx), dtype=_DTYPES[itemsize]
            ).reshape(k_tx, n_tri_tx),
            n_tx,
        )
        cov_rx = _unpack_lower(
            np.frombuffer(
                _read_exact(f, itemsize * k_rx * n_tri_rx), dtype=_DTYPES[itemsize]
            ).reshape(k_rx, n_tri_rx),
            n_rx,
        )
    sidecar_path = Path(str(path) + ".json")
    metadata = (
        json.loads(sidecar_path.read_text()) if sidecar_path.exists() else {}
    )
    model = GmmModel(
        weights=weights,
        cov_tx_components=cov_tx,
        cov_rx_components=cov_rx,
        fit_log=metadata.get("fit"),
    )
    return model, metadata


def _write_pilot_record(f, pilot: PilotMatrix) -> None:
    f.write(_PILOT_MAGIC)
    f.write(
        struct.pack("<BIId", 16, pilot.n_pilots, pilot.n_tx, pilot.rho)
    )
    f.write(np.ascontiguousarray(pilot.p).astype("<c16").tobytes())


def _read_pilot_record(f) -> PilotMatrix:
    _expect_magic(f, _PILOT_MAGIC)
    itemsize, n_p, n_tx, rho = struct.unpack("<BIId", _read_exact(f, 17))
    p = np.frombuffer(
        _read_exact(f, itemsize * n_p * n_tx), dtype=_DTYPES[itemsize]
    ).reshape(n_p, n_tx)
    return PilotMatrix(p=p.copy(), rho=rho)


def save_pilot(path, pilot: PilotMatrix) -> None:
    with open(path, "wb") as f:
        _write_pilot_record(f, pilot)


def load_pilot(path) -> PilotMatrix:
    with open(path, "rb") as f:
        return _read_pilot_record(f)


def save_codebook(path, codebook: PilotCodebook) -> None:
    with open(path, "wb") as f:
        f.write(struct.pack("<I", len(codebook)))
        for entry in codebook.entries:
            _write_pilot_record(f, entry)


def load_codebook(path) -> PilotCodebook:
    with open(path, "rb") as f:
        (count,) = struct.unpack("<I", _read_exact(f, 4))
        entries = tuple(_read_pilot_record(f) for _ in range(count))
    return PilotCodebook(entries=entries)


def complex_to_csv(path, a: np.ndarray, prefix: str = "c") -> None:
    """Write a complex 2-D array as interleaved re/im CSV columns."""
    a = np.atleast_2d(a)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        header = []
        for j in range(a.shape[1]):
            header += [f"{prefix}{j}_re", f"{prefix}{j}_im"]
        writer.writerow(header)
        for row in a:
            out = []
            for x in row:
                out += [repr(float(x.real)), repr(float(x.imag))]
            writer.writerow(out)


def dataset_to_csv(path, h: np.ndarray) -> None:
    complex_to_csv(path, h, prefix="h")


def pilot_to_csv(path, pilot: PilotMatrix) -> None:
    complex_to_csv(path, pilot.p, prefix="p")
