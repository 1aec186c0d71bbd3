"""Georeferenced rasters, station sets, patch tiling and the AGRID file format.

Grids are north-up: row 0 is the northernmost row and pixel (r, c) has its
center at ``(x_min + (c + 0.5) * cell, y_min + (nrows - r - 0.5) * cell)``.
Values are stored as float32; reductions accumulate in float64.
"""
from __future__ import annotations

import csv
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .resample import resample_array, resample_mask, resized_shape

DEFAULT_NODATA = -9999.0
MAGIC = b"AGRD"
VERSION = 1
# magic, version, nchannels, nrows, ncols, x_min, y_min, cell_size, nodata
_HEADER = struct.Struct("<4sIIIIdddf")
MAX_CELLS = 1 << 31


class GridIOError(ValueError):
    """Base class for AGRID read failures."""


class GridFormatError(GridIOError):
    """Bad magic, unsupported version or malformed header fields."""


class GridTruncatedError(GridIOError):
    """The file ends before the declared payload."""


class GridDimensionError(GridIOError):
    """Zero or overflowing dimensions."""


class ExtentError(ValueError):
    """Grids or stations do not line up spatially."""


def _frozen(a):
    a = np.ascontiguousarray(a, dtype=np.float32)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class GeoGrid:
    values: np.ndarray
    x_min: float
    y_min: float
    cell_size: float
    nodata: float = DEFAULT_NODATA
    name: str = ""

    def __post_init__(self):
        v = np.asarray(self.values)
        if v.ndim != 2 or v.shape[0] < 1 or v.shape[1] < 1:
            raise GridDimensionError(f"grid values must be a non-empty 2-D array, got shape {v.shape}")
        if not (self.cell_size > 0 and math.isfinite(self.cell_size)):
            raise ValueError(f"cell_size must be positive, got {self.cell_size}")
        v = _frozen(v)
        bad = ~np.isfinite(v) & ~self._mask_of(v)
        if bad.any():
            raise ValueError("grid contains non-finite values that are not the nodata sentinel")
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "nodata", float(np.float32(self.nodata)))

    def _mask_of(self, v):
        if math.isnan(self.nodata):
            return np.isnan(v)
        return v == np.float32(self.nodata)

    @classmethod
    def from_masked(cls, values, mask, like, name=None):
        """Build a grid on ``like``'s geotransform, writing nodata where ``mask``."""
        v = np.where(mask, np.float32(like.nodata), np.asarray(values, dtype=np.float64))
        return cls(v, like.x_min, like.y_min, like.cell_size, like.nodata,
                   like.name if name is None else name)

    @property
    def nrows(self):
        return self.values.shape[0]

    @property
    def ncols(self):
        return self.values.shape[1]

    @property
    def shape(self):
        return self.values.shape

    @property
    def mask(self):
        """True where the pixel is nodata."""
        return self._mask_of(self.values)

    @property
    def x_max(self):
        return self.x_min + self.ncols * self.cell_size

    @property
    def y_max(self):
        return self.y_min + self.nrows * self.cell_size

    def geotransform(self):
        return (self.x_min, self.y_min, self.cell_size, self.nrows, self.ncols)

    def same_grid(self, other, tol=1e-9):
        return (self.shape == other.shape
                and abs(self.x_min - other.x_min) <= tol
                and abs(self.y_min - other.y_min) <= tol
                and abs(self.cell_size - other.cell_size) <= tol * max(1.0, self.cell_size))

    def filled(self, fill=np.nan):
        """float64 copy with nodata replaced by ``fill``."""
        out = self.values.astype(np.float64)
        out[self.mask] = fill
        return out

    def with_values(self, values, name=None):
        return GeoGrid(values, self.x_min, self.y_min, self.cell_size, self.nodata,
                       self.name if name is None else name)

    def subgrid(self, row, col, nrows, ncols):
        y_min = self.y_min + (self.nrows - row - nrows) * self.cell_size
        return GeoGrid(self.values[row:row + nrows, col:col + ncols],
                       self.x_min + col * self.cell_size, y_min, self.cell_size,
                       self.nodata, self.name)


@dataclass(frozen=True, eq=False)
class GridStack:
    channels: tuple
    channel_names: tuple

    def __post_init__(self):
        chans = tuple(self.channels)
        names = tuple(self.channel_names)
        if not chans:
            raise GridDimensionError("a GridStack needs at least one channel")
        if len(names) != len(chans):
            raise ValueError(f"{len(chans)} channels but {len(names)} names")
        ref = chans[0]
        for c in chans[1:]:
            if not ref.same_grid(c, tol=0.0):
                raise ExtentError("all channels of a GridStack must share shape and geotransform")
        object.__setattr__(self, "channels", chans)
        object.__setattr__(self, "channel_names", names)

    @classmethod
    def from_grids(cls, grids, names=None):
        grids = list(grids)
        if names is None:
            names = [g.name for g in grids]
        return cls(tuple(g.with_values(g.values, name=n) for g, n in zip(grids, names)), tuple(names))

    def __len__(self):
        return len(self.channels)

    def __getitem__(self, key):
        if isinstance(key, str):
            return self.channels[self.channel_names.index(key)]
        return self.channels[key]

    @property
    def template(self):
        return self.channels[0]

    @property
    def shape(self):
        return (len(self.channels),) + self.template.shape

    @property
    def mask(self):
        m = np.zeros(self.template.shape, dtype=bool)
        for c in self.channels:
            m |= c.mask
        return m

    def to_array(self, fill=0.0, dtype=np.float64):
        return np.stack([c.filled(fill) for c in self.channels]).astype(dtype)

    def subgrid(self, row, col, nrows, ncols):
        return GridStack(tuple(c.subgrid(row, col, nrows, ncols) for c in self.channels),
                         self.channel_names)


@dataclass(frozen=True)
class StationRecord:
    station_id: str
    lon: float
    lat: float
    value: float  # NaN when missing


@dataclass(frozen=True)
class StationSet:
    records: tuple = field(default_factory=tuple)

    def __post_init__(self):
        object.__setattr__(self, "records", tuple(self.records))

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    @property
    def values(self):
        return np.array([r.value for r in self.records], dtype=np.float64)

    def subset(self, keep):
        return StationSet(tuple(r for r, k in zip(self.records, keep) if k))


@dataclass(frozen=True, eq=False)
class PatchPair:
    input: GridStack
    label: GeoGrid
    lr_precip: GeoGrid
    valid: bool = True
    origin: tuple = (0, 0)


# ---------------------------------------------------------------- file I/O

def write_grid(grid, path):
    """Write a GeoGrid or GridStack as AGRID (little-endian)."""
    if isinstance(grid, GeoGrid):
        chans, names = (grid,), (grid.name,)
    elif isinstance(grid, GridStack):
        chans, names = grid.channels, grid.channel_names
    else:
        raise TypeError(f"cannot write {type(grid).__name__}")
    ref = chans[0]
    nodata32 = np.float32(ref.nodata)
    parts = [_HEADER.pack(MAGIC, VERSION, len(chans), ref.nrows, ref.ncols,
                          float(ref.x_min), float(ref.y_min), float(ref.cell_size), nodata32)]
    for ch, name in zip(chans, names):
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise ValueError(f"channel name too long: {name[:40]!r}...")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        vals = ch.values
        if np.float32(ch.nodata).tobytes() != nodata32.tobytes():
            vals = np.where(ch.mask, nodata32, vals)
        parts.append(np.ascontiguousarray(vals, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(parts))


def read_grid(path):
    """Read an AGRID file: one channel gives a GeoGrid, several a GridStack."""
    data = Path(path).read_bytes()
    if len(data) < 4 or data[:4] != MAGIC:
        raise GridFormatError(f"{path}: not an AGRID file (magic {data[:4]!r})")
    if len(data) < _HEADER.size:
        raise GridTruncatedError(f"{path}: header truncated ({len(data)} bytes)")
    _, version, nch, nrows, ncols, x_min, y_min, cell, nodata = _HEADER.unpack_from(data)
    if version != VERSION:
        raise GridFormatError(f"{path}: unsupported AGRID version {version}")
    if nch == 0 or nrows == 0 or ncols == 0:
        raise GridDimensionError(f"{path}: zero dimension (channels={nch}, rows={nrows}, cols={ncols})")
    if nch * nrows * ncols > MAX_CELLS:
        raise GridDimensionError(f"{path}: dimensions {nch}x{nrows}x{ncols} overflow")
    if not (cell > 0 and math.isfinite(cell) and math.isfinite(x_min) and math.isfinite(y_min)):
        raise GridFormatError(f"{path}: invalid geotransform")
    pos = _HEADER.size
    n = nrows * ncols
    grids, names = [], []
    for _ in range(nch):
        if pos + 2 > len(data):
            raise GridTruncatedError(f"{path}: truncated channel header")
        (ln,) = struct.unpack_from("<H", data, pos)
        pos += 2
        if pos + ln > len(data):
            raise GridTruncatedError(f"{path}: truncated channel name")
        try:
            name = data[pos:pos + ln].decode("utf-8")
        except UnicodeDecodeError as exc:
            raise GridFormatError(f"{path}: channel name is not UTF-8") from exc
        pos += ln
        if pos + 4 * n > len(data):
            raise GridTruncatedError(f"{path}: payload truncated")
        vals = np.frombuffer(data, dtype="<f4", count=n, offset=pos).reshape(nrows, ncols)
        pos += 4 * n
        try:
            grids.append(GeoGrid(vals.astype(np.float32), x_min, y_min, cell, float(nodata), name))
        except ValueError as exc:
            raise GridFormatError(f"{path}: {exc}") from exc
        names.append(name)
    if pos != len(data):
        raise GridFormatError(f"{path}: {len(data) - pos} trailing bytes")
    if nch == 1:
        return grids[0]
    return GridStack(tuple(grids), tuple(names))


def read_stations(path):
    records = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != ["station_id", "lon", "lat", "value"]:
            raise ValueError(f"{path}: expected header station_id,lon,lat,value, got {reader.fieldnames}")
        for row in reader:
            raw = row["value"].strip()
            records.append(StationRecord(row["station_id"], float(row["lon"]), float(row["lat"]),
                                         float(raw) if raw else math.nan))
    return StationSet(tuple(records))


def write_stations(stations, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["station_id", "lon", "lat", "value"])
        for r in stations:
            w.writerow([r.station_id, repr(float(r.lon)), repr(float(r.lat)),
                        "" if math.isnan(r.value) else repr(float(r.value))])


# ---------------------------------------------------------------- geometry

def bilinear_resample(grid, factor):
    """Resize by ``factor`` (e.g. 10 or 1/10) with pixel-center bilinear weights.

    Any output pixel whose stencil touches a nodata pixel becomes nodata.
    """
    out_hw = resized_shape(grid.shape, factor)
    mask = grid.mask
    out = resample_array(grid.filled(0.0), out_hw)
    out_mask = resample_mask(mask, out_hw) if mask.any() else np.zeros(out_hw, dtype=bool)
    cell = grid.cell_size * grid.nrows / out_hw[0]
    out = np.where(out_mask, np.float32(grid.nodata), out)
    return GeoGrid(out, grid.x_min, grid.y_min, cell, grid.nodata, grid.name)


def pixel_centers(grid):
    """(lon, lat) center coordinates as float64 arrays of shape (ncols,), (nrows,)."""
    lon = grid.x_min + (np.arange(grid.ncols) + 0.5) * grid.cell_size
    lat = grid.y_min + (grid.nrows - np.arange(grid.nrows) - 0.5) * grid.cell_size
    return lon, lat


def make_coordinate_channels(template):
    lon, lat = pixel_centers(template)
    shape = template.shape
    lon_g = template.with_values(np.broadcast_to(lon[None, :], shape), name="lon")
    lat_g = template.with_values(np.broadcast_to(lat[:, None], shape), name="lat")
    return lon_g, lat_g


def locate(grid, lon, lat):
    """Row/col of the half-open cell (west/south edges inclusive) containing a point."""
    if not (grid.x_min <= lon <= grid.x_max and grid.y_min <= lat <= grid.y_max):
        raise ExtentError(f"point ({lon}, {lat}) lies outside the grid extent")
    cell = grid.cell_size
    c = int(math.floor((lon - grid.x_min) / cell))
    if grid.x_min + (c + 1) * cell <= lon:
        c += 1
    elif c > 0 and grid.x_min + c * cell > lon:
        c -= 1
    s = int(math.floor((lat - grid.y_min) / cell))
    if grid.y_min + (s + 1) * cell <= lat:
        s += 1
    elif s > 0 and grid.y_min + s * cell > lat:
        s -= 1
    c = min(max(c, 0), grid.ncols - 1)
    s = min(max(s, 0), grid.nrows - 1)
    return grid.nrows - 1 - s, c


def sample_at_stations(grid, stations):
    """[(station_id, value)] with NaN for stations over nodata."""
    out = []
    mask = grid.mask
    for rec in stations:
        r, c = locate(grid, rec.lon, rec.lat)
        out.append((rec.station_id, math.nan if mask[r, c] else float(grid.values[r, c])))
    return out


def tile_origins(n, p, stride):
    if n < p:
        return []
    return list(range(0, n - p + 1, stride))


def extract_patches(input_stack, label, lr, p, stride):
    """Tile the scene into p x p patches; patches touching nodata are dropped."""
    tmpl = input_stack.template
    if not tmpl.same_grid(label):
        raise ExtentError("label is not co-registered with the input stack")
    if lr.nrows == 0 or tmpl.nrows % lr.nrows or tmpl.ncols % lr.ncols:
        raise ExtentError("low-resolution grid does not nest in the high-resolution grid")
    r = tmpl.nrows // lr.nrows
    if tmpl.ncols // lr.ncols != r or abs(lr.cell_size - r * tmpl.cell_size) > 1e-9 * lr.cell_size \
            or abs(lr.x_min - tmpl.x_min) > 1e-9 or abs(lr.y_min - tmpl.y_min) > 1e-9:
        raise ExtentError("low-resolution grid extent or cell size does not match the scene")
    if p % r or stride % r:
        raise ExtentError(f"patch size {p} and stride {stride} must be multiples of the scale factor {r}")
    bad = input_stack.mask | label.mask
    bad_lr = lr.mask
    patches = []
    for row in tile_origins(tmpl.nrows, p, stride):
        for col in tile_origins(tmpl.ncols, p, stride):
            if bad[row:row + p, col:col + p].any():
                continue
            lr_r, lr_c, q = row // r, col // r, p // r
            if bad_lr[lr_r:lr_r + q, lr_c:lr_c + q].any():
                continue
            patches.append(PatchPair(input_stack.subgrid(row, col, p, p),
                                     label.subgrid(row, col, p, p),
                                     lr.subgrid(lr_r, lr_c, q, q), True, (row, col)))
    return patches


def patch_count(nrows, ncols, p, stride):
    """Number of tiles for a fully valid scene."""
    return len(tile_origins(nrows, p, stride)) * len(tile_origins(ncols, p, stride))
