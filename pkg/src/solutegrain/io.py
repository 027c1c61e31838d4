"""File formats: VTK legacy field dumps, CSV series, key-value reports, checkpoints."""
from __future__ import annotations

import csv
import json
import os
from pathlib import Path

import numpy as np

from .analysis import ProfileSeries


def write_vtk(path, lattice, concentration=None):
    """ASCII VTK legacy STRUCTURED_POINTS file with rho, u, node_kind and concentration.

    Point data sit at node centres ``(i + 0.5) dx``; values are SI except
    ``rho`` which is the lattice density.
    """
    nx, ny, nz = lattice.dims
    dx = lattice.dx
    n = nx * ny * nz
    # VTK expects x fastest
    def flat(a):
        return np.asarray(a).transpose(2, 1, 0).ravel()

    with open(path, "w") as fh:
        fh.write("# vtk DataFile Version 3.0\nsolutegrain field dump\nASCII\nDATASET STRUCTURED_POINTS\n")
        fh.write(f"DIMENSIONS {nx} {ny} {nz}\nORIGIN {0.5 * dx} {0.5 * dx} {0.5 * dx}\nSPACING {dx} {dx} {dx}\n")
        fh.write(f"POINT_DATA {n}\n")
        fh.write("SCALARS rho double 1\nLOOKUP_TABLE default\n")
        np.savetxt(fh, flat(lattice.rho), fmt="%.10g")
        fh.write("SCALARS node_kind int 1\nLOOKUP_TABLE default\n")
        np.savetxt(fh, flat(lattice.kind), fmt="%d")
        u = lattice.velocity_si()
        fh.write("VECTORS u double\n")
        np.savetxt(fh, np.stack([flat(u[0]), flat(u[1]), flat(u[2])], axis=1), fmt="%.10g")
        if concentration is not None:
            fh.write("SCALARS concentration double 1\nLOOKUP_TABLE default\n")
            np.savetxt(fh, flat(concentration), fmt="%.10g")


def read_vtk_scalars(path):
    """Minimal reader for files written by :func:`write_vtk` (used by tests)."""
    with open(path) as fh:
        lines = fh.read().split("\n")
    dims = None
    out = {}
    i = 0
    while i < len(lines):
        ln = lines[i]
        if ln.startswith("DIMENSIONS"):
            dims = tuple(int(v) for v in ln.split()[1:])
        if ln.startswith("SCALARS"):
            name = ln.split()[1]
            n = int(np.prod(dims))
            vals = np.array([float(v) for v in lines[i + 2 : i + 2 + n]])
            out[name] = vals.reshape(dims[::-1]).transpose(2, 1, 0)
            i += 2 + n
            continue
        i += 1
    return dims, out


class CsvLog:
    """Append-only CSV file with a fixed header."""

    def __init__(self, path, header, append=False):
        self.path = Path(path)
        exists = self.path.exists() and append
        self.fh = open(self.path, "a" if exists else "w", newline="")
        self.w = csv.writer(self.fh)
        if not exists:
            self.w.writerow(header)
        self.header = list(header)

    def write(self, row):
        self.w.writerow(row)

    def write_many(self, rows):
        self.w.writerows(rows)

    def flush(self):
        self.fh.flush()

    def close(self):
        self.fh.close()


def read_csv(path):
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        header = next(r)
        rows = [row for row in r]
    cols = {h: [] for h in header}
    for row in rows:
        for h, v in zip(header, row):
            cols[h].append(v)
    out = {}
    for h, v in cols.items():
        try:
            out[h] = np.array(v, dtype=float)
        except ValueError:
            out[h] = np.array(v)
    return out


PROFILE_HEADER = ["time", "axis", "bin", "center", "count", "line_density"]


def profile_rows(time, axis, counts, dx, m_s):
    centers = (np.arange(len(counts)) + 0.5) * dx
    return [[f"{time:.10g}", axis, k, f"{centers[k]:.10g}", int(counts[k]), f"{m_s * counts[k] / dx:.10g}"]
            for k in range(len(counts))]


def read_profiles(path):
    """Profile CSV -> ``{axis: ProfileSeries}`` of walker counts."""
    d = read_csv(path)
    out = {}
    for axis in np.unique(d["axis"]):
        m = d["axis"] == axis
        t = d["time"][m]
        times = np.unique(t)
        nb = int(d["bin"][m].max()) + 1
        prof = np.zeros((len(times), nb))
        ti = np.searchsorted(times, t)
        prof[ti, d["bin"][m].astype(int)] = d["count"][m]
        centers = np.zeros(nb)
        centers[d["bin"][m].astype(int)] = d["center"][m]
        out[str(axis)] = ProfileSeries(times, centers, prof)
    return out


def write_report(path, items):
    """Plain-text ``key = value`` report."""
    with open(path, "w") as fh:
        if isinstance(items, str):
            fh.write(items)
        else:
            for k, v in items.items():
                fh.write(f"{k} = {v}\n")


def read_report(path):
    out = {}
    with open(path) as fh:
        for ln in fh:
            if "=" in ln and not ln.lstrip().startswith("#"):
                k, v = ln.split("=", 1)
                v = v.strip()
                try:
                    out[k.strip()] = float(v)
                except ValueError:
                    out[k.strip()] = v
    return out


def write_matrix_csv(path, names, m):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([""] + list(names))
        for n, row in zip(names, m):
            w.writerow([n] + [f"{v:.10g}" for v in row])


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, arrays, meta):
    """``np.savez`` archive of arrays plus a JSON metadata blob; written atomically."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp.npz")
    np.savez(tmp, __meta__=np.array(json.dumps(meta)), **arrays)
    os.replace(tmp, path)


def load_checkpoint(path):
    with np.load(path, allow_pickle=False) as z:
        arrays = {k: z[k] for k in z.files if k != "__meta__"}
        meta = json.loads(str(z["__meta__"]))
    return arrays, meta


def array_digest(*arrays):
    import hashlib

    h = hashlib.sha256()
    for a in arrays:
        h.update(np.ascontiguousarray(a).tobytes())
    return h.hexdigest()
