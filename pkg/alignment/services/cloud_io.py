"""
Point cloud files, result documents and iteration traces.

Readers: PLY (ascii, binary_little_endian) and XYZ text ("x y z [nx ny nz]"
per line). Writers: the same formats, the result JSON and the trace CSV.
"""

import csv
import logging
from pathlib import Path

import numpy as np

from alignment.exceptions import CloudIOError, CloudParseError, UnsupportedFormatError
from alignment.services.branch_and_bound import TRACE_FIELDS
from alignment.services.mixtures import WeightedCloud

logger = logging.getLogger(__name__)

PLY_TYPES = {
    'char': 'i1', 'int8': 'i1',
    'uchar': 'u1', 'uint8': 'u1',
    'short': 'i2', 'int16': 'i2',
    'ushort': 'u2', 'uint16': 'u2',
    'int': 'i4', 'int32': 'i4',
    'uint': 'u4', 'uint32': 'u4',
    'float': 'f4', 'float32': 'f4',
    'double': 'f8', 'float64': 'f8',
}
SUPPORTED_PLY_FORMATS = ('ascii', 'binary_little_endian')
NORMAL_FIELDS = ('nx', 'ny', 'nz')


def _read_bytes(path):
    try:
        return Path(path).read_bytes()
    except OSError as e:
        raise CloudIOError(f"Could not read {path}: {e}") from e


def _write_bytes(path, payload):
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(payload)
    except OSError as e:
        raise CloudIOError(f"Could not write {path}: {e}") from e


class PlyHeader:
    """Parsed PLY header: format, vertex count, vertex properties and payload offset."""

    def __init__(self):
        self.format = None
        self.vertex_count = None
        self.properties = []
        self.data_offset = 0
        self.line_count = 0

    @property
    def names(self):
        return [name for name, _ in self.properties]

    def dtype(self):
        return np.dtype([(name, '<' + code) for name, code in self.properties])


def parse_ply_header(payload, path=None):
    """
    Parse the header of a PLY file held in memory.

    Raises:
        CloudParseError: Malformed header
        UnsupportedFormatError: Big-endian payloads, list properties, or vertices not first
    """
    header = PlyHeader()
    position = 0
    line_number = 0
    current_element = None
    seen_elements = []
    while True:
        end = payload.find(b'\n', position)
        if end < 0:
            raise CloudParseError("Header has no end_header line", path=path, line=line_number + 1)
        try:
            line = payload[position:end].decode('ascii').strip()
        except UnicodeDecodeError:
            raise CloudParseError("Header is not ASCII", path=path, line=line_number + 1)
        position = end + 1
        line_number += 1
        tokens = line.split()

        if line_number == 1:
            if line != 'ply':
                raise CloudParseError("Missing 'ply' magic", path=path, line=1)
            continue
        if not tokens or tokens[0] in ('comment', 'obj_info'):
            continue
        if tokens[0] == 'format':
            if len(tokens) < 2:
                raise CloudParseError("Malformed format line", path=path, line=line_number)
            if tokens[1] not in SUPPORTED_PLY_FORMATS:
                raise UnsupportedFormatError(f"{path}: PLY format '{tokens[1]}' is not supported")
            header.format = tokens[1]
        elif tokens[0] == 'element':
            if len(tokens) != 3:
                raise CloudParseError("Malformed element line", path=path, line=line_number)
            current_element = tokens[1]
            seen_elements.append(current_element)
            if current_element == 'vertex':
                if len(seen_elements) > 1:
                    raise UnsupportedFormatError(f"{path}: vertex element must come first")
                try:
                    header.vertex_count = int(tokens[2])
                except ValueError:
                    raise CloudParseError("Vertex count is not an integer", path=path, line=line_number)
        elif tokens[0] == 'property':
            if current_element != 'vertex':
                continue
            if tokens[1] == 'list':
                raise UnsupportedFormatError(f"{path}: list properties on vertices are not supported")
            if len(tokens) != 3 or tokens[1] not in PLY_TYPES:
                raise CloudParseError(f"Unknown property '{line}'", path=path, line=line_number)
            header.properties.append((tokens[2], PLY_TYPES[tokens[1]]))
        elif tokens[0] == 'end_header':
            break
        else:
            raise CloudParseError(f"Unexpected header line '{line}'", path=path, line=line_number)

    if header.format is None:
        raise CloudParseError("Header has no format line", path=path, line=line_number)
    if header.vertex_count is None:
        raise CloudParseError("Header has no vertex element", path=path, line=line_number)
    missing = [axis for axis in ('x', 'y', 'z') if axis not in header.names]
    if missing:
        raise CloudParseError(f"Vertex properties lack {', '.join(missing)}", path=path, line=line_number)
    header.data_offset = position
    header.line_count = line_number
    return header


def _ascii_vertices(payload, header, path):
    lines = payload[header.data_offset:].decode('ascii', errors='replace').splitlines()
    width = len(header.properties)
    rows = np.empty((header.vertex_count, width))
    for index in range(header.vertex_count):
        line_number = header.line_count + index + 1
        if index >= len(lines):
            raise CloudParseError(
                f"Header declares {header.vertex_count} vertices, found {index}", path=path, line=line_number
            )
        tokens = lines[index].split()
        if len(tokens) < width:
            raise CloudParseError(f"Expected {width} values, got {len(tokens)}", path=path, line=line_number)
        try:
            rows[index] = [float(token) for token in tokens[:width]]
        except ValueError:
            raise CloudParseError("Non-numeric vertex value", path=path, line=line_number)
    return {name: rows[:, column] for column, name in enumerate(header.names)}


def _binary_vertices(payload, header, path):
    dtype = header.dtype()
    needed = dtype.itemsize * header.vertex_count
    available = len(payload) - header.data_offset
    if available < needed:
        complete = available // dtype.itemsize
        raise CloudParseError(
            f"Header declares {header.vertex_count} vertices, payload holds {complete}",
            path=path,
            offset=header.data_offset + complete * dtype.itemsize,
        )
    records = np.frombuffer(payload, dtype=dtype, count=header.vertex_count, offset=header.data_offset)
    return {name: records[name].astype(float) for name in header.names}


def _assemble(columns, path, locate):
    points = np.column_stack([columns['x'], columns['y'], columns['z']])
    normals = None
    if all(name in columns for name in NORMAL_FIELDS):
        normals = np.column_stack([columns[name] for name in NORMAL_FIELDS])

    for array in (points, normals):
        if array is None:
            continue
        bad = ~np.all(np.isfinite(array), axis=1)
        if bad.any():
            raise CloudParseError("Non-finite coordinate", path=path, **locate(int(np.argmax(bad))))
    if normals is not None:
        norms = np.linalg.norm(normals, axis=1, keepdims=True)
        normals = np.where(norms > 0, normals / np.where(norms > 0, norms, 1.0), normals)
    return WeightedCloud(points=points, normals=normals)


def read_ply(path):
    payload = _read_bytes(path)
    header = parse_ply_header(payload, path=path)
    if header.format == 'ascii':
        columns = _ascii_vertices(payload, header, path)

        def locate(index):
            return {'line': header.line_count + index + 1}
    else:
        columns = _binary_vertices(payload, header, path)

        def locate(index):
            return {'offset': header.data_offset + index * header.dtype().itemsize}
    return _assemble(columns, path, locate)


def read_xyz(path):
    text = _read_bytes(path).decode('utf-8', errors='replace')
    rows = []
    width = None
    for line_number, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith('#'):
            continue
        tokens = stripped.split()
        if len(tokens) not in (3, 6) or (width is not None and len(tokens) != width):
            raise CloudParseError(f"Expected 3 or 6 values per line, got {len(tokens)}", path=path, line=line_number)
        width = len(tokens)
        try:
            values = [float(token) for token in tokens]
        except ValueError:
            raise CloudParseError("Non-numeric value", path=path, line=line_number)
        if not np.all(np.isfinite(values)):
            raise CloudParseError("Non-finite coordinate", path=path, line=line_number)
        rows.append(values)
    data = np.array(rows, dtype=float).reshape(-1, width or 3)
    normals = data[:, 3:6] if width == 6 else None
    if normals is not None:
        norms = np.linalg.norm(normals, axis=1, keepdims=True)
        normals = np.where(norms > 0, normals / np.where(norms > 0, norms, 1.0), normals)
    return WeightedCloud(points=data[:, :3], normals=normals)


def read_cloud(path):
    """
    Read a point cloud; positions in file order, normals normalized when present.

    Raises:
        CloudParseError: Malformed content (with line or byte offset)
        UnsupportedFormatError: Unknown extension or PLY variant
        CloudIOError: File cannot be read
    """
    suffix = Path(path).suffix.lower()
    if suffix == '.ply':
        cloud = read_ply(path)
    elif suffix in ('.xyz', '.txt'):
        cloud = read_xyz(path)
    else:
        raise UnsupportedFormatError(f"{path}: unsupported point cloud extension '{suffix}'")
    logger.info(f"Read {len(cloud)} points from {path}{' with normals' if cloud.normals is not None else ''}")
    return cloud


def write_ply(path, points, normals=None, binary=True):
    """Write float64 vertices (and normals) as PLY."""
    points = np.asarray(points, dtype=float)
    names = ['x', 'y', 'z'] + (list(NORMAL_FIELDS) if normals is not None else [])
    data = points if normals is None else np.hstack([points, np.asarray(normals, dtype=float)])
    header = ['ply', f"format {'binary_little_endian' if binary else 'ascii'} 1.0",
              f'element vertex {len(points)}']
    header += [f'property double {name}' for name in names]
    header.append('end_header')
    payload = ('\n'.join(header) + '\n').encode('ascii')
    if binary:
        payload += np.ascontiguousarray(data, dtype='<f8').tobytes()
    else:
        payload += ''.join(' '.join(repr(float(v)) for v in row) + '\n' for row in data).encode('ascii')
    _write_bytes(path, payload)


def write_xyz(path, points, normals=None):
    points = np.asarray(points, dtype=float)
    data = points if normals is None else np.hstack([points, np.asarray(normals, dtype=float)])
    text = ''.join(' '.join(repr(float(v)) for v in row) + '\n' for row in data)
    _write_bytes(path, text.encode('utf-8'))


def write_cloud(path, points, normals=None, binary=True):
    suffix = Path(path).suffix.lower()
    if suffix == '.ply':
        write_ply(path, points, normals, binary=binary)
    elif suffix in ('.xyz', '.txt'):
        write_xyz(path, points, normals)
    else:
        raise UnsupportedFormatError(f"{path}: unsupported point cloud extension '{suffix}'")


def render_result(result):
    """Result JSON bytes (shortest round-trip float formatting)."""
    from rest_framework.renderers import JSONRenderer

    from alignment.serializers import AlignmentResultSerializer

    return JSONRenderer().render(AlignmentResultSerializer(result).data)


def write_result(result, path):
    _write_bytes(path, render_result(result) + b'\n')
    logger.info(f"Wrote alignment result to {path}")


def write_trace(trace, path):
    """CSV with header iter,stage,depth,nodes_active,best_L,best_U,gap; one row per pop."""
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, 'w', newline='') as handle:
            writer = csv.writer(handle)
            writer.writerow(TRACE_FIELDS)
            for record in trace:
                writer.writerow([repr(v) if isinstance(v, float) else v for v in record.as_row()])
    except OSError as e:
        raise CloudIOError(f"Could not write {path}: {e}") from e
    logger.info(f"Wrote {len(trace)} trace rows to {path}")
