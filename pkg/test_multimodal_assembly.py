import numpy as np
import pytest
import torch

from layered_vocab import TaskKind, audio_boa, audio_pad, modality_mark, response_mark
from multimodal_assembly import (
    AUDIO_FEAT,
    RESPONSE_MARK,
    TOKEN_COLUMN,
    VISION_FEAT,
    VISION_LENGTH,
    Adapter,
    AssemblyError,
    FeatureFormatError,
    FeatureSequence,
    adapter_intermediate_width,
    assemble,
    assemble_frames,
    default_task,
    frame_column,
    load_features,
    response_column,
    save_features,
    stub_audio_encode,
    stub_vision_encode,
    token_column,
)


def features(modality, length, width, seed=0):
    generator = torch.Generator().manual_seed(seed)
    return FeatureSequence(modality, torch.randn(length, width, generator=generator))


def test_adapter_width_rule():
    assert adapter_intermediate_width(896) == 4_864
    assert adapter_intermediate_width(128) == 695
    adapter = Adapter(8, 16)
    projected = adapter.project(features('audio', 5, 8))
    assert projected.modality == 'audio'
    assert tuple(projected.vectors.shape) == (5, 16)
    with pytest.raises(AssemblyError):
        adapter.project(features('audio', 5, 9))


def test_feature_sequence_validation():
    with pytest.raises(AssemblyError):
        FeatureSequence('vision', torch.zeros(49, 4))
    with pytest.raises(AssemblyError):
        FeatureSequence('smell', torch.zeros(3, 4))
    with pytest.raises(AssemblyError):
        FeatureSequence('audio', torch.zeros(3))
    assert FeatureSequence('audio', np.ones((2, 3))).width == 3


@pytest.mark.parametrize('present,expected', [
    (['vision'], TaskKind.IMAGE_CAPTION),
    (['audio'], TaskKind.SPEECH_TO_TEXT_QA),
    (['text'], TaskKind.TEXT_TO_TEXT_QA),
    (['vision', 'text'], None),
])
def test_default_task(present, expected):
    assert default_task(present) == expected


def test_default_task_needs_a_modality():
    with pytest.raises(AssemblyError):
        default_task([])


def test_assembled_length_and_provenance(desk_model):
    vision = features('vision', VISION_LENGTH, 16)
    audio = features('audio', 7, 16, seed=1)
    eff = assemble(desk_model, vision=vision, audio=audio, text=[3, 4, 5],
                   task_marker=TaskKind.VISUAL_QA_AUDIO_OUT)
    assert len(eff) == VISION_LENGTH + 7 + 3 + 1
    assert eff.provenance == ([VISION_FEAT] * VISION_LENGTH + [AUDIO_FEAT] * 7
                              + [TOKEN_COLUMN] * 3 + [RESPONSE_MARK])
    assert tuple(eff.steps.shape) == (len(eff), 16)


def test_assembled_length_law_over_random_mixes(desk_model):
    rng = np.random.default_rng(8)
    tasks = list(TaskKind)
    for trial in range(200):
        present = [m for m in ('vision', 'audio', 'text') if rng.random() < 0.5] or ['text']
        vision = features('vision', VISION_LENGTH, 16, seed=trial) if 'vision' in present else None
        audio_length = int(rng.integers(1, 30))
        audio = features('audio', audio_length, 16, seed=trial) if 'audio' in present else None
        text = rng.integers(0, 32, size=int(rng.integers(1, 9))).tolist() if 'text' in present else None
        task = tasks[int(rng.integers(len(tasks)))]
        eff = assemble(desk_model, vision=vision, audio=audio, text=text, task_marker=task)
        blocks = ((VISION_LENGTH if vision is not None else 0) + (audio_length if audio is not None else 0)
                  + (len(text) if text is not None else 0))
        assert len(eff) == blocks + 1
        assert len(eff.provenance) == len(eff) == eff.steps.shape[0]
        if present == ['vision', 'audio']:
            assert len(eff) == 50 + audio_length + 1


def test_steps_average_their_layer_slots(desk_model):
    eff = assemble(desk_model, audio=features('audio', 4, 16), text=[9])
    torch.testing.assert_close(eff.steps, eff.slots.mean(dim=1))


def test_feature_vectors_fill_every_audio_slot(desk_model):
    layout = desk_model.layout
    audio = features('audio', 4, 16)
    eff = assemble(desk_model, audio=audio)
    mark = desk_model.embed_slots(torch.tensor([token_column(layout, modality_mark(layout, 'audio'))]))[0, 0]
    for i in range(4):
        torch.testing.assert_close(eff.slots[i, 0], mark)
        for k in range(1, layout.n_layers):
            torch.testing.assert_close(eff.slots[i, k], audio.vectors[i])


def test_text_and_marker_columns_embed_their_ids(desk_model):
    layout = desk_model.layout
    eff = assemble(desk_model, text=[7, 8])
    expected = desk_model.embed_slots(torch.tensor([
        token_column(layout, 7),
        token_column(layout, 8),
        response_column(layout, TaskKind.TEXT_TO_TEXT_QA),
    ]))
    torch.testing.assert_close(eff.slots, expected)


def test_response_column_boa_for_audio_tasks(layout):
    speak = response_column(layout, TaskKind.TEXT_QA_AUDIO_OUT)
    quiet = response_column(layout, TaskKind.ASR)
    assert speak[0] == response_mark(layout, TaskKind.TEXT_QA_AUDIO_OUT)
    assert speak[1:] == [audio_boa(layout, k) for k in range(1, layout.n_layers)]
    assert quiet[1:] == [audio_pad(layout, k) for k in range(1, layout.n_layers)]


def test_assemble_rejections(desk_model):
    with pytest.raises(AssemblyError):
        assemble(desk_model)
    with pytest.raises(AssemblyError):
        assemble(desk_model, vision=features('vision', VISION_LENGTH, 16), text=[1])
    with pytest.raises(AssemblyError):
        assemble(desk_model, audio=features('audio', 3, 8))
    with pytest.raises(AssemblyError):
        assemble(desk_model, vision=features('audio', 3, 16))
    with pytest.raises(AssemblyError):
        assemble(desk_model, text=[desk_model.layout.layer_offset(1)])


def test_build_prefix_projects_encoder_features(desk_model):
    vision = stub_vision_encode(4, width=desk_model.config.encoder_width)
    eff = desk_model.build_prefix(vision=vision, text=[1, 2], task=TaskKind.VISUAL_QA_TEXT_OUT)
    assert len(eff) == VISION_LENGTH + 3
    projected = desk_model.vision_adapter.project(vision).vectors
    torch.testing.assert_close(eff.slots[:VISION_LENGTH, 1], projected)


def test_frames_input(desk_model):
    layout = desk_model.layout
    frames = [[k + j for k in range(7)] for j in range(3)]
    column = frame_column(layout, frames[0])
    assert column[0] == modality_mark(layout, 'audio')
    assert column[1:] == [layout.layer_offset(k + 1) + k for k in range(7)]
    eff = assemble_frames(desk_model, frames)
    assert len(eff) == 4
    assert eff.provenance[0] == RESPONSE_MARK
    with pytest.raises(AssemblyError):
        frame_column(layout, [1, 2])


def test_stub_vision_encoder():
    a = stub_vision_encode(11, width=32)
    b = stub_vision_encode(11, width=32)
    c = stub_vision_encode(12, width=32)
    assert a.length == VISION_LENGTH
    torch.testing.assert_close(a.vectors, b.vectors)
    assert not torch.equal(a.vectors, c.vectors)
    torch.testing.assert_close(a.vectors[-1], a.vectors[:-1].mean(dim=0))


def test_stub_audio_encoder():
    frames = [[1, 2, 3], [1, 2, 3], [4, 5, 6]]
    out = stub_audio_encode(frames, width=16, layer_size=8)
    assert tuple(out.vectors.shape) == (3, 16)
    torch.testing.assert_close(out.vectors[0], out.vectors[1])
    assert not torch.equal(out.vectors[0], out.vectors[2])
    with pytest.raises(AssemblyError):
        stub_audio_encode([], width=16, layer_size=8)
    with pytest.raises(AssemblyError):
        stub_audio_encode([[8, 0, 0]], width=16, layer_size=8)


def test_feature_file_round_trip(tmp_path):
    original = stub_vision_encode(3, width=12)
    save_features(tmp_path / 'v.omf', original)
    loaded = load_features(tmp_path / 'v.omf')
    assert loaded.modality == 'vision'
    torch.testing.assert_close(loaded.vectors, original.vectors)


def test_feature_file_errors(tmp_path):
    path = tmp_path / 'a.omf'
    save_features(path, features('audio', 4, 6))
    data = path.read_bytes()

    (tmp_path / 'magic.omf').write_bytes(b'NOPE' + data[4:])
    (tmp_path / 'short.omf').write_bytes(data[:-4])
    (tmp_path / 'long.omf').write_bytes(data + b'\0\0\0\0')
    (tmp_path / 'modality.omf').write_bytes(data[:4] + b'\x07' + data[5:])
    for name in ('magic', 'short', 'long', 'modality'):
        with pytest.raises(FeatureFormatError):
            load_features(tmp_path / f'{name}.omf')


def test_vision_feature_file_needs_fifty_rows(tmp_path):
    path = tmp_path / 'v.omf'
    save_features(path, features('audio', 4, 6))
    data = bytearray(path.read_bytes())
    data[4] = 0
    path.write_bytes(bytes(data))
    with pytest.raises(FeatureFormatError):
        load_features(path)
