"""ASCII MSH v2.2 reader/writer with the project's fixed physical groups.

Physical groups: lines 1 -> shore Γ1, 2 -> open sea Γ2, 3 -> interface Γ3;
surfaces 10 -> water Ω̃, 20 -> obstacle D.
"""

from __future__ import annotations

import numpy as np

from .mesh import (Mesh, MeshError, REGION_OBSTACLE, REGION_WATER,
                   TAG_INTERFACE, TAG_OPEN_SEA, TAG_SHORE, build_mesh)

PHYS_SHORE = 1
PHYS_OPEN_SEA = 2
PHYS_INTERFACE = 3
PHYS_WATER = 10
PHYS_OBSTACLE = 20

_LINE = 1
_TRIANGLE = 2
_POINT = 15


class MshParseError(MeshError):
    def __init__(self, lineno: int, message: str):
        super().__init__(f"line {lineno}: {message}")
        self.lineno = lineno


def load_msh(path) -> Mesh:
    """Parse an ASCII MSH v2.2 file into a tagged 2D Mesh."""
    with open(path, "r") as fh:
        lines = fh.read().splitlines()

    def need(i, what):
        if i >= len(lines):
            raise MshParseError(len(lines), f"unexpected end of file, expected {what}")
        return lines[i].strip()

    i = 0
    nodes: dict[int, tuple[float, float]] = {}
    tris: list[tuple[int, tuple[int, int, int]]] = []
    bdry: list[tuple[int, tuple[int, int]]] = []
    seen_format = False
    while i < len(lines):
        line = lines[i].strip()
        if line == "$MeshFormat":
            parts = need(i + 1, "format line").split()
            if not parts or not parts[0].startswith("2.2"):
                raise MshParseError(i + 2, f"unsupported MSH version {parts[:1]}, need 2.2")
            if need(i + 2, "$EndMeshFormat") != "$EndMeshFormat":
                raise MshParseError(i + 3, "missing $EndMeshFormat")
            seen_format = True
            i += 3
        elif line == "$Nodes":
            try:
                n = int(need(i + 1, "node count"))
            except ValueError:
                raise MshParseError(i + 2, "bad node count") from None
            for k in range(n):
                parts = need(i + 2 + k, "node").split()
                if len(parts) < 4:
                    raise MshParseError(i + 3 + k, "node needs id x y z")
                try:
                    nodes[int(parts[0])] = (float(parts[1]), float(parts[2]))
                except ValueError:
                    raise MshParseError(i + 3 + k, "malformed node line") from None
            if need(i + 2 + n, "$EndNodes") != "$EndNodes":
                raise MshParseError(i + 3 + n, "missing $EndNodes")
            i += 3 + n
        elif line == "$Elements":
            try:
                n = int(need(i + 1, "element count"))
            except ValueError:
                raise MshParseError(i + 2, "bad element count") from None
            for k in range(n):
                parts = need(i + 2 + k, "element").split()
                try:
                    vals = [int(p) for p in parts]
                except ValueError:
                    raise MshParseError(i + 3 + k, "malformed element line") from None
                if len(vals) < 3:
                    raise MshParseError(i + 3 + k, "element needs id type ntags")
                etype, ntags = vals[1], vals[2]
                tags = vals[3:3 + ntags]
                conn = vals[3 + ntags:]
                phys = tags[0] if tags else 0
                if etype == _TRIANGLE:
                    if len(conn) != 3:
                        raise MshParseError(i + 3 + k, "triangle needs 3 nodes")
                    tris.append((phys, tuple(conn)))
                elif etype == _LINE:
                    if len(conn) != 2:
                        raise MshParseError(i + 3 + k, "line needs 2 nodes")
                    bdry.append((phys, tuple(conn)))
                elif etype == _POINT:
                    pass
                else:
                    raise MshParseError(i + 3 + k, f"unsupported element type {etype}")
            if need(i + 2 + n, "$EndElements") != "$EndElements":
                raise MshParseError(i + 3 + n, "missing $EndElements")
            i += 3 + n
        elif line.startswith("$"):
            # skip unknown section
            end = "$End" + line[1:]
            j = i + 1
            while j < len(lines) and lines[j].strip() != end:
                j += 1
            if j >= len(lines):
                raise MshParseError(i + 1, f"unterminated section {line}")
            i = j + 1
        elif line == "":
            i += 1
        else:
            raise MshParseError(i + 1, f"unexpected content {line!r}")

    if not seen_format:
        raise MshParseError(1, "missing $MeshFormat section")
    if not nodes or not tris:
        raise MshParseError(len(lines), "file contains no triangles")

    ids = sorted(nodes)
    remap = {nid: k for k, nid in enumerate(ids)}
    vertices = np.array([nodes[nid] for nid in ids])
    cells = np.array([[remap[v] for v in conn] for _, conn in tris], dtype=np.int64)

    region = np.empty(len(tris), dtype=np.int8)
    for k, (phys, _) in enumerate(tris):
        if phys == PHYS_WATER:
            region[k] = REGION_WATER
        elif phys == PHYS_OBSTACLE:
            region[k] = REGION_OBSTACLE
        else:
            raise MeshError(f"triangle with unknown physical surface {phys} "
                            f"(expected {PHYS_WATER} or {PHYS_OBSTACLE})")

    tag_map = {PHYS_SHORE: TAG_SHORE, PHYS_OPEN_SEA: TAG_OPEN_SEA,
               PHYS_INTERFACE: TAG_INTERFACE}
    boundary_tag_of = {}
    for phys, conn in bdry:
        if phys not in tag_map:
            raise MeshError(f"line with unknown physical group {phys} "
                            "(expected 1, 2 or 3)")
        boundary_tag_of[frozenset(remap[v] for v in conn)] = tag_map[phys]

    return build_mesh(2, vertices, cells, region=region,
                      boundary_tag_of=boundary_tag_of)


def write_msh(mesh: Mesh, path) -> None:
    """Write a 2D mesh as ASCII MSH v2.2 with the fixed physical groups."""
    if mesh.dim != 2:
        raise MeshError("MSH output supports 2D meshes only")
    inv_tag = {TAG_SHORE: PHYS_SHORE, TAG_OPEN_SEA: PHYS_OPEN_SEA,
               TAG_INTERFACE: PHYS_INTERFACE}
    with open(path, "w") as fh:
        fh.write("$MeshFormat\n2.2 0 8\n$EndMeshFormat\n")
        fh.write("$Nodes\n%d\n" % mesh.n_vertices)
        for k, (x, y) in enumerate(mesh.vertices, start=1):
            fh.write("%d %.17g %.17g 0\n" % (k, x, y))
        fh.write("$EndNodes\n")
        lines = [fi for fi in range(mesh.n_facets)
                 if mesh.facet_tag[fi] in inv_tag and
                 (mesh.facet_cells[fi, 1] < 0 or mesh.facet_tag[fi] == TAG_INTERFACE)]
        fh.write("$Elements\n%d\n" % (len(lines) + mesh.n_cells))
        eid = 1
        for fi in lines:
            phys = inv_tag[int(mesh.facet_tag[fi])]
            a, b = mesh.facet_vertices[fi] + 1
            fh.write("%d 1 2 %d %d %d %d\n" % (eid, phys, phys, a, b))
            eid += 1
        for c in range(mesh.n_cells):
            phys = PHYS_OBSTACLE if mesh.region[c] == REGION_OBSTACLE else PHYS_WATER
            v = mesh.cells[c] + 1
            fh.write("%d 2 2 %d %d %d %d %d\n" % (eid, phys, phys, v[0], v[1], v[2]))
            eid += 1
        fh.write("$EndElements\n")
