import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from delay_grid import (
    DelayedGrid,
    GridError,
    GridFormatError,
    TokenGrid,
    apply_delay,
    complete_stream,
    empty_grid,
    grid_from_json,
    grid_to_json,
    load_grid,
    load_grids_jsonl,
    make_grid,
    mask_targets,
    save_grid,
    save_grids_jsonl,
    step_slice,
    undo_delay,
)
from layered_vocab import desk_layout, full_layout, make_layout, pad_ids

TINY = make_layout(32, 2, 8, 4)


@st.composite
def tiny_grids(draw, max_length=12):
    length = draw(st.integers(0, max_length))
    rows = []
    for layer in range(TINY.n_layers):
        offset, width = TINY.layer_offset(layer), TINY.layer_size(layer)
        rows.append([offset + draw(st.integers(0, width - 1)) for _ in range(length)])
    return make_grid(TINY, np.array(rows, dtype=np.int64).reshape(TINY.n_layers, length))


def random_grid(layout, length, seed=0):
    rng = np.random.default_rng(seed)
    rows = [layout.layer_offset(k) + rng.integers(0, layout.layer_size(k), length)
            for k in range(layout.n_layers)]
    return make_grid(layout, np.array(rows))


@given(tiny_grids())
@settings(max_examples=200, deadline=None)
def test_undo_delay_inverts_apply_delay(grid):
    delayed = apply_delay(grid)
    assert delayed.length == grid.length + TINY.n_layers - 1
    assert undo_delay(delayed) == grid


def test_round_trip_exhaustive_length_two():
    # every text id x every layer-1 id x two layer-2 ids, length 2
    text = range(TINY.text_region_size)
    audio = range(TINY.layer_offset(1), TINY.layer_offset(1) + TINY.audio_layer_size)
    for a, b in itertools.product(text, audio):
        grid = make_grid(TINY, [[a, a], [b, b], [40, 47]])
        assert undo_delay(apply_delay(grid)) == grid


def test_undo_delay_inverts_apply_delay_on_random_default_grids():
    layout = full_layout()
    rng = np.random.default_rng(64)
    widths = np.array(layout.region_widths())[:, None]
    offsets = np.array([layout.layer_offset(k) for k in range(layout.n_layers)])[:, None]
    for _ in range(10_000):
        length = int(rng.integers(0, 65))
        rows = offsets + (rng.random((layout.n_layers, length)) * widths).astype(np.int64)
        grid = make_grid(layout, rows)
        assert undo_delay(apply_delay(grid)) == grid


def test_round_trip_exhaustive_two_symbols_every_row():
    # both symbols of every row, every grid up to three columns
    symbols = [(TINY.layer_offset(k), TINY.layer_offset(k) + 1) for k in range(TINY.n_layers)]
    count = 0
    for length in range(4):
        cells = [symbols[k] for k in range(TINY.n_layers) for _ in range(length)]
        for values in itertools.product(*cells):
            grid = make_grid(TINY, np.array(values, dtype=np.int64).reshape(TINY.n_layers, length))
            assert undo_delay(apply_delay(grid)) == grid
            count += 1
    assert count == 1 + 2 ** 3 + 2 ** 6 + 2 ** 9


def test_step_slice_on_the_default_layout():
    layout = full_layout()
    grid = random_grid(layout, 10, seed=4)
    delayed = apply_delay(grid)
    pads = pad_ids(layout)
    assert delayed.length == 17
    assert step_slice(delayed, 0).tolist() == [int(grid.rows[0, 0])] + pads[1:].tolist()
    assert step_slice(delayed, 7).tolist() == [int(grid.rows[k, 7 - k]) for k in range(8)]
    assert step_slice(delayed, 10 + 6).tolist() == pads[:7].tolist() + [int(grid.rows[7, 9])]


def test_delay_shifts_each_row_by_its_index(tiny_layout):
    grid = make_grid(tiny_layout, [[1, 2, 3], [33, 34, 35], [41, 42, 43]])
    delayed = apply_delay(grid)
    pads = pad_ids(tiny_layout)
    assert delayed.to_lists() == [
        [1, 2, 3, pads[0], pads[0]],
        [pads[1], 33, 34, 35, pads[1]],
        [pads[2], pads[2], 41, 42, 43],
    ]
    assert [delayed.delay_of_row(k) for k in range(3)] == [0, 1, 2]
    assert step_slice(delayed, 2).tolist() == [3, 34, 41]


def test_empty_grid_delays_to_pad_columns(tiny_layout):
    delayed = apply_delay(empty_grid(tiny_layout))
    assert delayed.length == 2
    assert delayed.source_length == 0
    assert not mask_targets(delayed).any()
    assert undo_delay(delayed).length == 0


def test_mask_targets_marks_non_pad_cells(tiny_layout):
    pads = pad_ids(tiny_layout)
    grid = make_grid(tiny_layout, [[1, pads[0]], [33, 34], [pads[2], 41]])
    mask = mask_targets(apply_delay(grid))
    assert mask.tolist() == [
        [True, False, False, False],
        [False, True, True, False],
        [False, False, False, True],
    ]


def test_undo_delay_rejects_tokens_in_pad_positions(tiny_layout):
    pads = pad_ids(tiny_layout)
    rows = np.repeat(pads[:, None], 4, axis=1)
    rows[2, 0] = 41
    with pytest.raises(GridError):
        undo_delay(DelayedGrid(tiny_layout, rows))
    rows = np.repeat(pads[:, None], 4, axis=1)
    rows[1, 3] = 33
    with pytest.raises(GridError):
        undo_delay(DelayedGrid(tiny_layout, rows))


def test_grid_rejects_ids_from_wrong_layer(tiny_layout):
    with pytest.raises(GridError):
        make_grid(tiny_layout, [[1], [41], [41]])
    with pytest.raises(GridError):
        make_grid(tiny_layout, [[1], [33]])
    with pytest.raises(GridError):
        make_grid(tiny_layout, [[1], [33], [99]])


def test_delayed_grid_needs_max_delay_columns(tiny_layout):
    pads = pad_ids(tiny_layout)
    with pytest.raises(GridError):
        DelayedGrid(tiny_layout, pads[:, None])


def test_grids_are_read_only(tiny_layout):
    grid = make_grid(tiny_layout, [[1], [33], [41]])
    with pytest.raises(ValueError):
        grid.rows[0, 0] = 2


def test_step_slice_bounds(tiny_layout):
    delayed = apply_delay(make_grid(tiny_layout, [[1], [33], [41]]))
    with pytest.raises(GridError):
        step_slice(delayed, delayed.length)


def test_complete_stream_trims_and_pads(tiny_layout):
    grid = make_grid(tiny_layout, [[1, 2], [33, 34], [41, 42]])
    delayed = apply_delay(grid)
    columns = [delayed.rows[:, t] for t in range(delayed.length)]
    assert complete_stream(columns, tiny_layout) == delayed
    # stream cut right after the last text token: audio tail columns are filled with PAD
    cut = complete_stream(columns[:2], tiny_layout)
    assert cut.source_length == 2
    assert cut.rows[:, :2].tolist() == delayed.rows[:, :2].tolist()
    # trailing PAD columns are dropped
    pads = pad_ids(tiny_layout)
    assert complete_stream(columns + [pads, pads], tiny_layout) == delayed


def test_complete_stream_rejects_early_tokens(tiny_layout):
    pads = pad_ids(tiny_layout)
    column = pads.copy()
    column[2] = 41
    with pytest.raises(GridError):
        complete_stream([column], tiny_layout)


def test_complete_stream_of_nothing(tiny_layout):
    assert complete_stream([], tiny_layout).source_length == 0


def test_binary_save_load(tmp_path, layout):
    grid = random_grid(layout, 9, seed=3)
    delayed = apply_delay(grid)
    save_grid(tmp_path / 'g.bin', grid)
    save_grid(tmp_path / 'd.bin', delayed)
    assert load_grid(tmp_path / 'g.bin', layout) == grid
    loaded = load_grid(tmp_path / 'd.bin', layout)
    assert isinstance(loaded, DelayedGrid)
    assert loaded == delayed


def test_binary_load_errors(tmp_path, layout):
    path = tmp_path / 'g.bin'
    save_grid(path, random_grid(layout, 5))
    with pytest.raises(GridFormatError):
        load_grid(path, make_layout(4096, 7, 4160, 4096))
    data = path.read_bytes()
    (tmp_path / 'short.bin').write_bytes(data[:-3])
    with pytest.raises(GridFormatError):
        load_grid(tmp_path / 'short.bin', layout)
    (tmp_path / 'junk.bin').write_bytes(b'XXXX' + data[4:])
    with pytest.raises(GridFormatError):
        load_grid(tmp_path / 'junk.bin', layout)


def test_jsonl_save_load(tmp_path):
    layout = desk_layout()
    grids = [random_grid(layout, n, seed=n) for n in (0, 1, 4)]
    grids.append(apply_delay(grids[-1]))
    assert save_grids_jsonl(tmp_path / 'grids.jsonl', grids) == 4
    loaded = load_grids_jsonl(tmp_path / 'grids.jsonl', layout)
    assert loaded == grids
    assert isinstance(loaded[-1], DelayedGrid)
    assert isinstance(loaded[0], TokenGrid)


def test_json_line_layout_mismatch(tiny_layout):
    line = grid_to_json(make_grid(tiny_layout, [[1], [33], [41]]))
    with pytest.raises(GridFormatError):
        grid_from_json(line, desk_layout())
