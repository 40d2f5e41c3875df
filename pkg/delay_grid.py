"""
Delay Grid Module
Aligned text + audio token grids, the per-layer delay transform used for
parallel decoding, per-step column emission and grid serialization
"""
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, List, Sequence, Union

import numpy as np

from layered_vocab import LayoutError, VocabLayout, layout_hash, locate_ids, pad_ids

logger = logging.getLogger(__name__)

GRID_MAGIC = b'OMG1'
GRID_VERSION = 1


class GridError(ValueError):
    """Raised for malformed grids"""


class GridFormatError(GridError):
    """Raised for unreadable grid files"""


def _as_rows(rows, n_rows: int) -> np.ndarray:
    array = np.array(rows, dtype=np.int64)
    if array.ndim == 1 and array.size == 0:
        array = array.reshape(n_rows, 0)
    if array.ndim != 2:
        raise GridError(f"Grid rows must form a 2-D array, got shape {array.shape}")
    if array.shape[0] != n_rows:
        raise GridError(f"Grid needs {n_rows} rows, got {array.shape[0]}")
    return array


def _check_layers(layout: VocabLayout, rows: np.ndarray):
    if rows.size == 0:
        return
    try:
        layers, _ = locate_ids(layout, rows)
    except LayoutError as e:
        raise GridError(str(e)) from e
    expected = np.arange(rows.shape[0])[:, None]
    bad = np.argwhere(layers != expected)
    if bad.size:
        row, col = bad[0]
        raise GridError(
            f"Cell ({row}, {col}) holds id {rows[row, col]} from layer "
            f"{layers[row, col]}, expected layer {row}"
        )


@dataclass(frozen=True, eq=False)
class TokenGrid:
    """
    Aligned grid: row 0 text ids, rows 1.. audio ids (global ids), length T

    Args:
        layout: Vocabulary layout the ids belong to
        rows: Integer array of shape (layout.n_layers, T)
    """
    layout: VocabLayout
    rows: np.ndarray

    def __post_init__(self):
        rows = _as_rows(self.rows, self.layout.n_layers)
        _check_layers(self.layout, rows)
        rows.setflags(write=False)
        object.__setattr__(self, 'rows', rows)

    @property
    def length(self) -> int:
        return self.rows.shape[1]

    def __eq__(self, other) -> bool:
        return (isinstance(other, TokenGrid) and self.layout == other.layout
                and np.array_equal(self.rows, other.rows))

    def to_lists(self) -> List[List[int]]:
        return self.rows.tolist()


@dataclass(frozen=True, eq=False)
class DelayedGrid:
    """
    Delay-shifted grid: row k is shifted right by k, length T + n_layers - 1

    Args:
        layout: Vocabulary layout the ids belong to
        rows: Integer array of shape (layout.n_layers, T + n_layers - 1)
    """
    layout: VocabLayout
    rows: np.ndarray

    def __post_init__(self):
        rows = _as_rows(self.rows, self.layout.n_layers)
        if rows.shape[1] < self.max_delay:
            raise GridError(
                f"Delayed grid needs at least {self.max_delay} columns, got {rows.shape[1]}"
            )
        _check_layers(self.layout, rows)
        rows.setflags(write=False)
        object.__setattr__(self, 'rows', rows)

    @property
    def max_delay(self) -> int:
        return self.layout.n_layers - 1

    @property
    def length(self) -> int:
        return self.rows.shape[1]

    @property
    def source_length(self) -> int:
        return self.length - self.max_delay

    def delay_of_row(self, row: int) -> int:
        return row

    def __eq__(self, other) -> bool:
        return (isinstance(other, DelayedGrid) and self.layout == other.layout
                and np.array_equal(self.rows, other.rows))

    def to_lists(self) -> List[List[int]]:
        return self.rows.tolist()


def make_grid(layout: VocabLayout, rows) -> TokenGrid:
    return TokenGrid(layout, rows)


def empty_grid(layout: VocabLayout) -> TokenGrid:
    return TokenGrid(layout, np.zeros((layout.n_layers, 0), dtype=np.int64))


def apply_delay(grid: TokenGrid, layout: VocabLayout = None) -> DelayedGrid:
    """
    Shift row k right by k columns, filling with that row's PAD

    Args:
        grid: Source grid
        layout: Optional layout; must match the grid's layout

    Returns:
        DelayedGrid of length T + n_layers - 1
    """
    layout = layout or grid.layout
    if layout != grid.layout:
        raise GridError("Grid belongs to a different layout")
    n_rows, length = grid.rows.shape
    max_delay = n_rows - 1
    pads = pad_ids(layout)
    out = np.repeat(pads[:, None], length + max_delay, axis=1)
    for k in range(n_rows):
        out[k, k:k + length] = grid.rows[k]
    return DelayedGrid(layout, out)


def undo_delay(delayed: DelayedGrid) -> TokenGrid:
    """
    Left-inverse of apply_delay

    Args:
        delayed: Delayed grid

    Returns:
        The source TokenGrid
    """
    layout = delayed.layout
    n_rows = layout.n_layers
    length = delayed.source_length
    pads = pad_ids(layout)
    out = np.empty((n_rows, length), dtype=np.int64)
    for k in range(n_rows):
        row = delayed.rows[k]
        lead, tail = row[:k], row[k + length:]
        if (lead != pads[k]).any():
            col = int(np.argmax(lead != pads[k]))
            raise GridError(f"Row {k} position {col} must be PAD (delay {k})")
        if (tail != pads[k]).any():
            col = k + length + int(np.argmax(tail != pads[k]))
            raise GridError(f"Row {k} position {col} must be PAD (after source end)")
        out[k] = row[k:k + length]
    return TokenGrid(layout, out)


def step_slice(delayed: DelayedGrid, t: int) -> np.ndarray:
    """
    Column t of a delayed grid: the tokens emitted at generation step t

    Returns:
        Array of n_layers global ids
    """
    if not 0 <= t < delayed.length:
        raise GridError(f"Step {t} outside [0, {delayed.length})")
    return delayed.rows[:, t].copy()


def mask_targets(delayed: DelayedGrid) -> np.ndarray:
    """Boolean loss mask, True exactly on non-PAD cells"""
    pads = pad_ids(delayed.layout)
    return delayed.rows != pads[:, None]


def complete_stream(columns: Sequence[Sequence[int]], layout: VocabLayout) -> DelayedGrid:
    """
    Turn an emitted column stream into a well-formed delayed grid

    Trailing all-PAD columns are trimmed or appended so that the source
    length covers the last real token of every row.

    Args:
        columns: Emitted columns, each n_layers global ids
        layout: Vocabulary layout

    Returns:
        DelayedGrid
    """
    n_rows = layout.n_layers
    pads = pad_ids(layout)
    if len(columns):
        stream = np.asarray(columns, dtype=np.int64).T
    else:
        stream = np.zeros((n_rows, 0), dtype=np.int64)
    if stream.shape[0] != n_rows:
        raise GridError(f"Columns must hold {n_rows} ids")

    source_length = 0
    for k in range(n_rows):
        real = np.flatnonzero(stream[k] != pads[k])
        if real.size:
            if real[0] < k:
                raise GridError(f"Row {k} emitted a token at column {real[0]} before its delay")
            source_length = max(source_length, int(real[-1]) - k + 1)

    total = source_length + n_rows - 1
    out = np.repeat(pads[:, None], total, axis=1)
    keep = min(total, stream.shape[1])
    out[:, :keep] = stream[:, :keep]
    return DelayedGrid(layout, out)


# Serialization

GridLike = Union[TokenGrid, DelayedGrid]


def save_grid(path: Union[str, Path], grid: GridLike):
    """
    Write a grid in the binary grid format

    Args:
        path: Output file
        grid: TokenGrid or DelayedGrid
    """
    delayed = isinstance(grid, DelayedGrid)
    rows = grid.rows
    with open(path, 'wb') as f:
        f.write(GRID_MAGIC)
        np.array([GRID_VERSION, rows.shape[0], rows.shape[1], int(delayed)], dtype='<u4').tofile(f)
        np.array([layout_hash(grid.layout)], dtype='<u8').tofile(f)
        rows.astype('<u4').tofile(f)


def load_grid(path: Union[str, Path], layout: VocabLayout) -> GridLike:
    """
    Read a grid written by save_grid

    Args:
        path: Input file
        layout: Layout the grid must have been written with

    Returns:
        TokenGrid or DelayedGrid
    """
    with open(path, 'rb') as f:
        if f.read(4) != GRID_MAGIC:
            raise GridFormatError(f"{path}: not a grid file")
        header = np.fromfile(f, dtype='<u4', count=4)
        if header.size != 4:
            raise GridFormatError(f"{path}: truncated header")
        version, n_rows, length, delayed = (int(v) for v in header)
        if version != GRID_VERSION:
            raise GridFormatError(f"{path}: unsupported version {version}")
        stored_hash = np.fromfile(f, dtype='<u8', count=1)
        if stored_hash.size != 1 or int(stored_hash[0]) != layout_hash(layout):
            raise GridFormatError(f"{path}: layout hash mismatch")
        data = np.fromfile(f, dtype='<u4', count=n_rows * length)
        if data.size != n_rows * length:
            raise GridFormatError(f"{path}: truncated payload")
    rows = data.astype(np.int64).reshape(n_rows, length)
    return DelayedGrid(layout, rows) if delayed else TokenGrid(layout, rows)


def grid_to_json(grid: GridLike) -> str:
    return json.dumps({
        'layout_hash': layout_hash(grid.layout),
        'delayed': isinstance(grid, DelayedGrid),
        'rows': grid.to_lists(),
    })


def grid_from_json(line: str, layout: VocabLayout) -> GridLike:
    data = json.loads(line)
    if int(data['layout_hash']) != layout_hash(layout):
        raise GridFormatError("Grid line was written with a different layout")
    rows = np.array(data['rows'], dtype=np.int64).reshape(layout.n_layers, -1)
    return DelayedGrid(layout, rows) if data['delayed'] else TokenGrid(layout, rows)


def save_grids_jsonl(path: Union[str, Path], grids: Iterable[GridLike]) -> int:
    count = 0
    with open(path, 'w') as f:
        for grid in grids:
            f.write(grid_to_json(grid) + '\n')
            count += 1
    logger.debug("Wrote %d grids to %s", count, path)
    return count


def load_grids_jsonl(path: Union[str, Path], layout: VocabLayout) -> List[GridLike]:
    with open(path, 'r') as f:
        return [grid_from_json(line, layout) for line in f if line.strip()]
