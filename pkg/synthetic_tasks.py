"""
Synthetic Tasks Module
Token-level stand-ins for the multimodal training data. Every task kind has
a closed-form answer, so generated outputs can be checked by exact match.
"""
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from delay_grid import TokenGrid, make_grid
from duplex_engine import (
    IRQ,
    DEFAULT_FRAME_RATE,
    MixedNoiseGenerator,
    StopPhraseGenerator,
    build_interrupt_dataset,
)
from layered_vocab import (
    TaskKind,
    VocabLayout,
    audio_eoa,
    irq_id,
    layout_hash,
    nirq_id,
    pad_ids,
    text_eos,
)

logger = logging.getLogger(__name__)

IMAGE_POOL_SIZE = 16
IMAGE_SEED_BASE = 1_000
CAPTION_LENGTH = 3


class TaskDataError(ValueError):
    """Raised for invalid task specs and unreadable dataset files"""


@dataclass
class TaskVocabulary:
    """
    Symbol ranges the synthetic tasks draw from

    Args:
        text_alphabet: Text content ids 0..text_alphabet-1
        audio_alphabet: Input audio codes 0..audio_alphabet-1 per layer
        min_length: Shortest question
        max_length: Longest question
    """
    text_alphabet: int = 32
    audio_alphabet: int = 64
    min_length: int = 2
    max_length: int = 5

    def __post_init__(self):
        if self.text_alphabet < 2 or self.audio_alphabet < 2:
            raise TaskDataError("Alphabets need at least two symbols")
        if not 1 <= self.min_length <= self.max_length:
            raise TaskDataError(f"Invalid question length range [{self.min_length}, {self.max_length}]")
        if self.text_alphabet > self.audio_alphabet:
            raise TaskDataError("Spoken questions need text_alphabet <= audio_alphabet")

    def check_layout(self, layout: VocabLayout):
        if self.text_alphabet > layout.text_content_size:
            raise TaskDataError(
                f"Text alphabet {self.text_alphabet} exceeds the layout's {layout.text_content_size} content ids"
            )
        if self.audio_alphabet > layout.audio_code_count:
            raise TaskDataError(
                f"Audio alphabet {self.audio_alphabet} exceeds {layout.audio_code_count} codes per layer"
            )


@dataclass
class SyntheticTask:
    kind: TaskKind
    seed: int = 0
    size: int = 100
    vocabulary: TaskVocabulary = field(default_factory=TaskVocabulary)
    frame_rate: int = DEFAULT_FRAME_RATE

    def __post_init__(self):
        self.kind = TaskKind(self.kind)
        if self.size < 0:
            raise TaskDataError(f"size must be >= 0, got {self.size}")


@dataclass
class InputBundle:
    """Sample inputs; vision is a stub image seed, audio is frames of local codes"""
    vision_seed: Optional[int] = None
    audio_frames: Optional[List[List[int]]] = None
    text: Optional[List[int]] = None

    @property
    def modalities(self) -> List[str]:
        present = [('vision', self.vision_seed), ('audio', self.audio_frames), ('text', self.text)]
        return [name for name, value in present if value is not None]

    def to_dict(self) -> Dict:
        return {k: v for k, v in asdict(self).items() if v is not None}

    @classmethod
    def from_dict(cls, data: Dict) -> 'InputBundle':
        return cls(data.get('vision_seed'), data.get('audio_frames'), data.get('text'))


@dataclass
class Sample:
    index: int
    task: TaskKind
    inputs: InputBundle
    target: TokenGrid
    status: Optional[List[int]] = None


# Closed-form mappings

def answer_text(question: Sequence[int], text_alphabet: int) -> List[int]:
    """Reverse the question and map each symbol x to (3x + 1) mod alphabet"""
    return [(3 * int(x) + 1) % text_alphabet for x in reversed(question)]


def transcribe(frames: Sequence[Sequence[int]], text_alphabet: int) -> List[int]:
    """Text symbol of a frame: its layer-1 code mod alphabet"""
    return [int(frame[0]) % text_alphabet for frame in frames]


def caption_text(image_class: int, text_alphabet: int) -> List[int]:
    return [(5 * image_class + 7 * j + 2) % text_alphabet for j in range(CAPTION_LENGTH)]


def speech_codes(text: Sequence[int], layout: VocabLayout) -> np.ndarray:
    """Response audio: code for layer k at step i is (a_i * (2k + 1) + 31k) mod audio_code_count"""
    text = np.asarray(text, dtype=np.int64)
    layers = np.arange(1, layout.n_layers)[:, None]
    return (text[None, :] * (2 * layers + 1) + 31 * layers) % layout.audio_code_count


def image_seed(image_class: int) -> int:
    return IMAGE_SEED_BASE + image_class


def image_class_of(seed: int) -> int:
    image_class = seed - IMAGE_SEED_BASE
    if not 0 <= image_class < IMAGE_POOL_SIZE:
        raise TaskDataError(f"Image seed {seed} is not in the image pool")
    return image_class


def expected_text(task: TaskKind, inputs: InputBundle, vocabulary: TaskVocabulary) -> List[int]:
    """Ground-truth text response (without EOS)"""
    a_t = vocabulary.text_alphabet
    task = TaskKind(task)
    if task == TaskKind.ASR:
        return transcribe(inputs.audio_frames, a_t)
    if task == TaskKind.IMAGE_CAPTION:
        return caption_text(image_class_of(inputs.vision_seed), a_t)
    if task in (TaskKind.TEXT_TO_TEXT_QA, TaskKind.TEXT_QA_AUDIO_OUT):
        return answer_text(inputs.text, a_t)
    if task in (TaskKind.SPEECH_TO_TEXT_QA, TaskKind.AUDIO_QA_AUDIO_OUT):
        return answer_text(transcribe(inputs.audio_frames, a_t), a_t)
    if task in (TaskKind.VISUAL_QA_TEXT_OUT, TaskKind.VISUAL_QA_AUDIO_OUT):
        return answer_text([image_class_of(inputs.vision_seed) % a_t] + list(inputs.text), a_t)
    raise TaskDataError(f"{task.value} has no text response")


def target_grid(task: TaskKind, text: Sequence[int], layout: VocabLayout) -> TokenGrid:
    """Response grid: text then EOS; audio rows carry speech codes then EOA, or PAD"""
    length = len(text) + 1
    pads = pad_ids(layout)
    rows = np.repeat(pads[:, None], length, axis=1)
    rows[0, :-1] = text
    rows[0, -1] = text_eos(layout)
    if TaskKind(task).emits_audio:
        codes = speech_codes(text, layout)
        for k in range(1, layout.n_layers):
            rows[k, :-1] = layout.layer_offset(k) + codes[k - 1]
            rows[k, -1] = audio_eoa(layout, k)
    return make_grid(layout, rows)


def status_grid(labels: Sequence[int], layout: VocabLayout) -> TokenGrid:
    rows = np.repeat(pad_ids(layout)[:, None], len(labels), axis=1)
    rows[0] = [irq_id(layout) if label == IRQ else nirq_id(layout) for label in labels]
    return make_grid(layout, rows)


# Generation

def _sample_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, index])))


def _question(rng: np.random.Generator, vocabulary: TaskVocabulary) -> List[int]:
    length = int(rng.integers(vocabulary.min_length, vocabulary.max_length + 1))
    return [int(x) for x in rng.integers(0, vocabulary.text_alphabet, size=length)]


def _speak(question: Sequence[int], rng: np.random.Generator, vocabulary: TaskVocabulary) -> List[List[int]]:
    """Input frames whose layer-1 codes spell the question"""
    frames = rng.integers(0, vocabulary.audio_alphabet, size=(len(question), 7))
    frames[:, 0] = question
    return frames.tolist()


def _inputs(task: TaskKind, rng: np.random.Generator, vocabulary: TaskVocabulary) -> InputBundle:
    if task == TaskKind.ASR:
        length = int(rng.integers(vocabulary.min_length, vocabulary.max_length + 1))
        return InputBundle(audio_frames=rng.integers(0, vocabulary.audio_alphabet, size=(length, 7)).tolist())
    if task == TaskKind.IMAGE_CAPTION:
        return InputBundle(vision_seed=image_seed(int(rng.integers(IMAGE_POOL_SIZE))))
    if task in (TaskKind.TEXT_TO_TEXT_QA, TaskKind.TEXT_QA_AUDIO_OUT):
        return InputBundle(text=_question(rng, vocabulary))
    if task in (TaskKind.SPEECH_TO_TEXT_QA, TaskKind.AUDIO_QA_AUDIO_OUT):
        return InputBundle(audio_frames=_speak(_question(rng, vocabulary), rng, vocabulary))
    if task in (TaskKind.VISUAL_QA_TEXT_OUT, TaskKind.VISUAL_QA_AUDIO_OUT):
        seed = image_seed(int(rng.integers(IMAGE_POOL_SIZE)))
        return InputBundle(vision_seed=seed, text=_question(rng, vocabulary))
    raise TaskDataError(f"No input generator for {task.value}")


def gen_task_data(task: SyntheticTask, layout: VocabLayout) -> List[Sample]:
    """
    Generate a task's samples deterministically from its seed

    Args:
        task: Task definition
        layout: Vocabulary layout the targets use

    Returns:
        List of Sample (empty for size 0)
    """
    task.vocabulary.check_layout(layout)
    if task.kind == TaskKind.INTERRUPT:
        return _interrupt_samples(task, layout)
    samples = []
    for index in range(task.size):
        rng = _sample_rng(task.seed, index)
        inputs = _inputs(task.kind, rng, task.vocabulary)
        text = expected_text(task.kind, inputs, task.vocabulary)
        samples.append(Sample(index, task.kind, inputs, target_grid(task.kind, text, layout)))
    logger.debug("Generated %d %s samples (seed %d)", len(samples), task.kind.value, task.seed)
    return samples


def _interrupt_samples(task: SyntheticTask, layout: VocabLayout) -> List[Sample]:
    if task.size == 0:
        return []
    code_count = task.vocabulary.audio_alphabet
    streams = build_interrupt_dataset(
        task.seed, task.size, task.frame_rate,
        phrase_generator=StopPhraseGenerator(code_count),
        noise_generator=MixedNoiseGenerator(code_count),
    )
    return [
        Sample(i, TaskKind.INTERRUPT, InputBundle(audio_frames=stream.codes),
               status_grid(stream.labels, layout), list(stream.labels))
        for i, stream in enumerate(streams)
    ]


def task_mix_samples(mix: Dict[TaskKind, float], total: int, seed: int, layout: VocabLayout,
                     vocabulary: Optional[TaskVocabulary] = None) -> List[Sample]:
    """Samples from several tasks, sized by normalized weight; each task gets its own seed offset"""
    vocabulary = vocabulary or TaskVocabulary()
    weights = {TaskKind(k): float(w) for k, w in mix.items() if w > 0}
    if not weights:
        raise TaskDataError("Task mix has no positive weights")
    norm = sum(weights.values())
    samples: List[Sample] = []
    for offset, (kind, weight) in enumerate(sorted(weights.items(), key=lambda kv: kv[0].value)):
        size = max(1, int(round(total * weight / norm)))
        samples += gen_task_data(SyntheticTask(kind, seed + 7_919 * offset, size, vocabulary), layout)
    return samples


# Persistence

def save_dataset(path: Union[str, Path], task: SyntheticTask, samples: Sequence[Sample],
                 layout: VocabLayout) -> int:
    """
    Write samples as JSONL after a header line

    Returns:
        Number of samples written
    """
    header = {
        'layout': layout.to_dict(),
        'layout_hash': layout_hash(layout),
        'task': task.kind.value,
        'seed': task.seed,
        'size': task.size,
        'frame_rate': task.frame_rate,
        'vocabulary': asdict(task.vocabulary),
    }
    with open(path, 'w') as f:
        f.write(json.dumps({'header': header}, sort_keys=True) + '\n')
        for sample in samples:
            line = {
                'index': sample.index,
                'task': sample.task.value,
                'input': sample.inputs.to_dict(),
                'target': sample.target.to_lists(),
            }
            if sample.status is not None:
                line['status'] = sample.status
            f.write(json.dumps(line, sort_keys=True) + '\n')
    return len(samples)


def load_dataset(path: Union[str, Path], layout: Optional[VocabLayout] = None) -> Tuple[SyntheticTask, List[Sample]]:
    """
    Read a dataset written by save_dataset

    Args:
        path: JSONL file
        layout: Expected layout; defaults to the layout stored in the header

    Returns:
        (task definition, samples)
    """
    with open(path, 'r') as f:
        lines = [json.loads(line) for line in f if line.strip()]
    if not lines or 'header' not in lines[0]:
        raise TaskDataError(f"{path}: missing dataset header")
    header = lines[0]['header']
    stored = VocabLayout.from_dict(header['layout'])
    layout = layout or stored
    if layout_hash(layout) != int(header['layout_hash']):
        raise TaskDataError(f"{path}: dataset was written for a different layout")
    task = SyntheticTask(TaskKind(header['task']), header['seed'], header['size'],
                         TaskVocabulary(**header['vocabulary']), header.get('frame_rate', DEFAULT_FRAME_RATE))
    samples = [
        Sample(line['index'], TaskKind(line['task']), InputBundle.from_dict(line['input']),
               make_grid(layout, line['target']), line.get('status'))
        for line in lines[1:]
    ]
    return task, samples
