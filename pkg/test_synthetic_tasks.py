import pytest

from layered_vocab import TaskKind, audio_eoa, irq_id, make_layout, nirq_id, pad_ids, text_eos
from synthetic_tasks import (
    CAPTION_LENGTH,
    IMAGE_POOL_SIZE,
    InputBundle,
    SyntheticTask,
    TaskDataError,
    TaskVocabulary,
    answer_text,
    caption_text,
    expected_text,
    gen_task_data,
    image_class_of,
    image_seed,
    load_dataset,
    save_dataset,
    speech_codes,
    target_grid,
    task_mix_samples,
    transcribe,
)

TEXT_TASKS = [t for t in TaskKind if t != TaskKind.INTERRUPT]


def test_closed_form_mappings():
    assert answer_text([1, 2, 3], 32) == [10, 7, 4]
    assert answer_text([11], 32) == [2]
    assert transcribe([[33, 0, 0], [5, 1, 1]], 32) == [1, 5]
    assert caption_text(0, 32) == [2, 9, 16]
    assert len(caption_text(15, 32)) == CAPTION_LENGTH
    assert image_class_of(image_seed(7)) == 7
    with pytest.raises(TaskDataError):
        image_class_of(image_seed(IMAGE_POOL_SIZE))


def test_speech_codes_per_layer(layout):
    codes = speech_codes([1, 2], layout)
    assert codes.shape == (7, 2)
    assert codes[0].tolist() == [3 + 31, 6 + 31]
    assert codes[6].tolist() == [15 + 217, 30 + 217]


@pytest.mark.parametrize('kind', TEXT_TASKS)
def test_targets_follow_the_closed_form_answer(kind, layout):
    samples = gen_task_data(SyntheticTask(kind, seed=3, size=10), layout)
    assert len(samples) == 10
    vocabulary = TaskVocabulary()
    for sample in samples:
        text = expected_text(kind, sample.inputs, vocabulary)
        rows = sample.target.rows
        assert rows[0].tolist() == text + [text_eos(layout)]
        if kind.emits_audio:
            codes = speech_codes(text, layout)
            for k in range(1, layout.n_layers):
                assert rows[k, :-1].tolist() == (codes[k - 1] + layout.layer_offset(k)).tolist()
                assert rows[k, -1] == audio_eoa(layout, k)
        else:
            assert (rows[1:] == pad_ids(layout)[1:, None]).all()


@pytest.mark.parametrize('kind', TEXT_TASKS)
def test_inputs_match_the_task_modalities(kind, layout):
    expected = {
        TaskKind.ASR: ['audio'],
        TaskKind.IMAGE_CAPTION: ['vision'],
        TaskKind.TEXT_TO_TEXT_QA: ['text'],
        TaskKind.TEXT_QA_AUDIO_OUT: ['text'],
        TaskKind.SPEECH_TO_TEXT_QA: ['audio'],
        TaskKind.AUDIO_QA_AUDIO_OUT: ['audio'],
        TaskKind.VISUAL_QA_TEXT_OUT: ['vision', 'text'],
        TaskKind.VISUAL_QA_AUDIO_OUT: ['vision', 'text'],
    }[kind]
    for sample in gen_task_data(SyntheticTask(kind, seed=1, size=5), layout):
        assert sample.inputs.modalities == expected
        if sample.inputs.audio_frames is not None:
            assert all(len(frame) == 7 for frame in sample.inputs.audio_frames)


def test_spoken_questions_transcribe_to_the_question(layout):
    for sample in gen_task_data(SyntheticTask(TaskKind.SPEECH_TO_TEXT_QA, seed=2, size=10), layout):
        question = transcribe(sample.inputs.audio_frames, 32)
        assert sample.target.rows[0, :-1].tolist() == answer_text(question, 32)


def test_generation_is_deterministic(layout):
    task = SyntheticTask(TaskKind.VISUAL_QA_AUDIO_OUT, seed=5, size=6)
    a = gen_task_data(task, layout)
    b = gen_task_data(task, layout)
    assert [s.target for s in a] == [s.target for s in b]
    assert [s.inputs for s in a] == [s.inputs for s in b]
    other = gen_task_data(SyntheticTask(TaskKind.VISUAL_QA_AUDIO_OUT, seed=6, size=6), layout)
    assert [s.inputs for s in a] != [s.inputs for s in other]


def test_empty_task(layout):
    assert gen_task_data(SyntheticTask(TaskKind.ASR, size=0), layout) == []
    assert gen_task_data(SyntheticTask(TaskKind.INTERRUPT, size=0), layout) == []


def test_interrupt_samples_carry_status_rows(layout):
    samples = gen_task_data(SyntheticTask(TaskKind.INTERRUPT, seed=4, size=3), layout)
    for sample in samples:
        assert len(sample.status) == len(sample.inputs.audio_frames)
        expected = [irq_id(layout) if s else nirq_id(layout) for s in sample.status]
        assert sample.target.rows[0].tolist() == expected


def test_vocabulary_validation():
    with pytest.raises(TaskDataError):
        TaskVocabulary(text_alphabet=1)
    with pytest.raises(TaskDataError):
        TaskVocabulary(min_length=4, max_length=3)
    with pytest.raises(TaskDataError):
        TaskVocabulary(text_alphabet=100, audio_alphabet=64)
    with pytest.raises(TaskDataError):
        TaskVocabulary().check_layout(make_layout(32, 7, 128, 64))
    with pytest.raises(TaskDataError):
        SyntheticTask(TaskKind.ASR, size=-1)


def test_task_mix_sizes(layout):
    samples = task_mix_samples({TaskKind.ASR: 3.0, TaskKind.IMAGE_CAPTION: 1.0, TaskKind.TEXT_TO_TEXT_QA: 0},
                               total=20, seed=0, layout=layout)
    kinds = [s.task for s in samples]
    assert kinds.count(TaskKind.ASR) == 15
    assert kinds.count(TaskKind.IMAGE_CAPTION) == 5
    with pytest.raises(TaskDataError):
        task_mix_samples({TaskKind.ASR: 0}, total=5, seed=0, layout=layout)


def test_target_grid_without_audio(layout):
    grid = target_grid(TaskKind.ASR, [4, 5], layout)
    assert grid.length == 3
    assert grid.rows[0].tolist() == [4, 5, text_eos(layout)]


def test_dataset_file_round_trip(tmp_path, layout):
    for kind in (TaskKind.TEXT_QA_AUDIO_OUT, TaskKind.INTERRUPT):
        task = SyntheticTask(kind, seed=8, size=4)
        samples = gen_task_data(task, layout)
        path = tmp_path / f'{kind.value}.jsonl'
        assert save_dataset(path, task, samples, layout) == 4
        loaded_task, loaded = load_dataset(path)
        assert loaded_task == task
        assert [s.target for s in loaded] == [s.target for s in samples]
        assert [s.inputs for s in loaded] == [s.inputs for s in samples]
        assert [s.status for s in loaded] == [s.status for s in samples]


def test_dataset_file_errors(tmp_path, layout):
    task = SyntheticTask(TaskKind.ASR, size=2)
    path = tmp_path / 'asr.jsonl'
    save_dataset(path, task, gen_task_data(task, layout), layout)
    with pytest.raises(TaskDataError):
        load_dataset(path, make_layout(4096))
    lines = path.read_text().splitlines()
    (tmp_path / 'headless.jsonl').write_text('\n'.join(lines[1:]) + '\n')
    with pytest.raises(TaskDataError):
        load_dataset(tmp_path / 'headless.jsonl')


def test_input_bundle_dict_round_trip():
    bundle = InputBundle(vision_seed=1003, text=[1, 2])
    assert bundle.to_dict() == {'vision_seed': 1003, 'text': [1, 2]}
    assert InputBundle.from_dict(bundle.to_dict()) == bundle
