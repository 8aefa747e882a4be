"""Legacy VTK (ASCII UNSTRUCTURED_GRID) writer for inspection dumps."""

from __future__ import annotations

import numpy as np

_VTK_LINE = 3
_VTK_TRIANGLE = 5


def write_vtk(mesh, path, cell_data=None, point_data=None, title="coastshape"):
    """Write the mesh with optional per-cell and per-vertex fields.

    cell_data / point_data: dict name -> array of shape (n,) for scalars or
    (n, 2) for vectors (padded to 3D as VTK requires).
    """
    cell_data = cell_data or {}
    point_data = point_data or {}
    verts = mesh.vertices
    if mesh.dim == 1:
        verts = np.column_stack([verts[:, 0], np.zeros(len(verts))])
    with open(path, "w") as fh:
        fh.write("# vtk DataFile Version 3.0\n%s\nASCII\n" % title)
        fh.write("DATASET UNSTRUCTURED_GRID\n")
        fh.write("POINTS %d double\n" % mesh.n_vertices)
        for p in verts:
            fh.write("%.17g %.17g 0\n" % (p[0], p[1]))
        npc = mesh.cells.shape[1]
        fh.write("CELLS %d %d\n" % (mesh.n_cells, mesh.n_cells * (npc + 1)))
        for cv in mesh.cells:
            fh.write(" ".join([str(npc)] + [str(int(v)) for v in cv]) + "\n")
        ctype = _VTK_TRIANGLE if mesh.dim == 2 else _VTK_LINE
        fh.write("CELL_TYPES %d\n" % mesh.n_cells)
        fh.write("".join(f"{ctype}\n" for _ in range(mesh.n_cells)))
        _write_fields(fh, "CELL_DATA", mesh.n_cells, cell_data)
        _write_fields(fh, "POINT_DATA", mesh.n_vertices, point_data)


def _write_fields(fh, header, n, fields):
    if not fields:
        return
    fh.write("%s %d\n" % (header, n))
    for name, arr in fields.items():
        arr = np.asarray(arr)
        if arr.ndim == 1:
            fh.write("SCALARS %s double 1\nLOOKUP_TABLE default\n" % name)
            for v in arr:
                fh.write("%.17g\n" % v)
        else:
            fh.write("VECTORS %s double\n" % name)
            for row in arr:
                z = row[2] if arr.shape[1] > 2 else 0.0
                fh.write("%.17g %.17g %.17g\n" % (row[0], row[1], z))
