"""
Duplex Engine Module
Frame-level interruption handling: incoming audio frames are scored as
IRQ / NIRQ while the model speaks, an IRQ halts the active generation and
switches the engine to listening. Also builds the stop-phrase interruption
dataset and scores detectors against it.
"""
import json
import logging
import threading
from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from queue import Empty, Full, Queue
from typing import Deque, Iterable, List, Optional, Protocol, Sequence, Tuple, Union

import numpy as np
import torch
from sklearn.metrics import accuracy_score, recall_score

from layered_vocab import TaskKind, VocabLayout
from multimodal_assembly import EffectiveInputSequence, frame_column, response_column
from omni_model import (
    GenerationLimits,
    GenerationSession,
    KVCache,
    OmniTransformer,
    SamplingConfig,
)

logger = logging.getLogger(__name__)

NIRQ = 0
IRQ = 1
STATUS_NAMES = {NIRQ: 'n-irq', IRQ: 'irq'}
AUDIO_LAYERS = 7
DEFAULT_FRAME_RATE = 12
STOP_MOTIF_FRAMES = 8
CONTENT_LAYERS = (0, 1, 2)
TIMBRE_LAYERS = (3, 4, 5, 6)


class DuplexError(RuntimeError):
    """Raised for engine misuse and failed evaluations"""


class GeneratorError(ValueError):
    """Raised for degenerate stream generators"""


class DuplexMode(str, Enum):
    SPEAKING = 'speaking'
    LISTENING = 'listening'


@dataclass(frozen=True)
class StreamFrame:
    """One incoming frame: a local code per audio layer"""
    codes: Tuple[int, ...]
    timestamp: int = 0

    def validate(self, layout: VocabLayout):
        if len(self.codes) != layout.audio_layer_count:
            raise DuplexError(f"Frame has {len(self.codes)} codes, layout has {layout.audio_layer_count} layers")
        for layer, code in enumerate(self.codes, start=1):
            if not 0 <= code < layout.audio_layer_size:
                raise DuplexError(f"Frame code {code} outside layer {layer} (size {layout.audio_layer_size})")


@dataclass
class DuplexState:
    mode: DuplexMode = DuplexMode.LISTENING
    status_log: List[int] = field(default_factory=list)


@dataclass
class InterruptSample:
    """
    Noise, then an optional stop phrase, then a noise tail

    Spans are half-open frame intervals; noise-only streams have no spans.
    """
    frames: List[StreamFrame]
    labels: List[int]
    marker_span: Optional[Tuple[int, int]] = None
    tail_span: Optional[Tuple[int, int]] = None

    @property
    def interrupted(self) -> bool:
        return self.marker_span is not None

    @property
    def codes(self) -> List[List[int]]:
        return [list(f.codes) for f in self.frames]

    def to_dict(self) -> dict:
        return {
            'frames': self.codes,
            'labels': list(self.labels),
            'marker_span': list(self.marker_span) if self.marker_span else None,
            'tail_span': list(self.tail_span) if self.tail_span else None,
        }

    @classmethod
    def from_dict(cls, data: dict) -> 'InterruptSample':
        frames = [StreamFrame(tuple(int(c) for c in codes), i) for i, codes in enumerate(data['frames'])]
        marker = tuple(data['marker_span']) if data.get('marker_span') else None
        tail = tuple(data['tail_span']) if data.get('tail_span') else None
        return cls(frames, [int(x) for x in data['labels']], marker, tail)


# Stream generators

class NoiseGenerator:
    """Produces (n, 7) arrays of local codes below code_count"""

    def __init__(self, code_count: int = 64):
        if code_count < 2:
            raise GeneratorError(f"code_count must be >= 2, got {code_count}")
        self.code_count = code_count

    def frames(self, rng: np.random.Generator, n: int) -> np.ndarray:
        raise NotImplementedError


class WhiteNoiseGenerator(NoiseGenerator):
    def frames(self, rng: np.random.Generator, n: int) -> np.ndarray:
        return rng.integers(0, self.code_count, size=(n, AUDIO_LAYERS))


class MusicLikeGenerator(NoiseGenerator):
    """A short random pattern repeated with occasional substitutions"""

    def frames(self, rng: np.random.Generator, n: int) -> np.ndarray:
        period = int(rng.integers(3, 7))
        pattern = rng.integers(0, self.code_count, size=(period, AUDIO_LAYERS))
        out = np.resize(pattern, (n, AUDIO_LAYERS)) if n else np.zeros((0, AUDIO_LAYERS), dtype=np.int64)
        flips = rng.random(out.shape) < 0.05
        out[flips] = rng.integers(0, self.code_count, size=int(flips.sum()))
        return out


class DistractorSpeechGenerator(NoiseGenerator):
    """Speech-like frames: words of 2-4 frames drawn from a fixed bank"""

    def __init__(self, code_count: int = 64, bank_size: int = 24, bank_seed: int = 0xD157):
        super().__init__(code_count)
        bank_rng = np.random.default_rng(bank_seed)
        self.words = [bank_rng.integers(0, code_count, size=(int(bank_rng.integers(2, 5)), AUDIO_LAYERS))
                      for _ in range(bank_size)]

    def frames(self, rng: np.random.Generator, n: int) -> np.ndarray:
        parts = []
        total = 0
        while total < n:
            word = self.words[int(rng.integers(len(self.words)))]
            parts.append(word)
            total += len(word)
        if not parts:
            return np.zeros((0, AUDIO_LAYERS), dtype=np.int64)
        return np.concatenate(parts)[:n].copy()


class MixedNoiseGenerator(NoiseGenerator):
    """Concatenates segments from the other generators"""

    def __init__(self, code_count: int = 64, segment_frames: int = 12):
        super().__init__(code_count)
        self.segment_frames = segment_frames
        self.sources = [WhiteNoiseGenerator(code_count), MusicLikeGenerator(code_count),
                        DistractorSpeechGenerator(code_count)]

    def frames(self, rng: np.random.Generator, n: int) -> np.ndarray:
        parts = []
        remaining = n
        while remaining > 0:
            size = min(remaining, int(rng.integers(1, self.segment_frames + 1)))
            parts.append(self.sources[int(rng.integers(len(self.sources)))].frames(rng, size))
            remaining -= size
        if not parts:
            return np.zeros((0, AUDIO_LAYERS), dtype=np.int64)
        return np.concatenate(parts)


class StopPhraseGenerator:
    """
    Fixed stop-phrase motif with seeded timbre variants

    A variant substitutes at most two codes per frame, only in the fine
    layers 4..7, so at most 30% of the motif's codes change. Layers 1..3
    carry the phrase content.
    """

    def __init__(self, code_count: int = 64, motif_frames: int = STOP_MOTIF_FRAMES,
                 motif_seed: int = 0x5709, max_per_frame: int = 2):
        if motif_frames < 1:
            raise GeneratorError("Stop phrase must span at least one frame")
        if max_per_frame * motif_frames > 0.3 * motif_frames * AUDIO_LAYERS:
            raise GeneratorError("Timbre substitutions would exceed 30% of the motif")
        self.code_count = code_count
        self.max_per_frame = max_per_frame
        self.motif = np.random.default_rng(motif_seed).integers(0, code_count, size=(motif_frames, AUDIO_LAYERS))
        self.motif.setflags(write=False)

    @property
    def length(self) -> int:
        return self.motif.shape[0]

    @property
    def content(self) -> np.ndarray:
        return self.motif[:, CONTENT_LAYERS]

    def timbre(self, rng: np.random.Generator) -> np.ndarray:
        variant = self.motif.copy()
        for row in variant:
            count = int(rng.integers(0, self.max_per_frame + 1))
            layers = rng.choice(TIMBRE_LAYERS, size=count, replace=False)
            row[layers] = rng.integers(0, self.code_count, size=count)
        return variant


def _sample_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, index])))


def _to_frames(codes: np.ndarray) -> List[StreamFrame]:
    return [StreamFrame(tuple(int(c) for c in row), i) for i, row in enumerate(codes)]


def build_interrupt_dataset(rng_seed: int, count: int, frame_rate: int = DEFAULT_FRAME_RATE,
                            phrase_generator: Optional[StopPhraseGenerator] = None,
                            noise_generator: Optional[NoiseGenerator] = None,
                            tail_range: Tuple[float, float] = (0.0, 10.0),
                            noise_range: Tuple[float, float] = (1.0, 5.0)) -> List[InterruptSample]:
    """
    Build stop-phrase interruption samples

    Each sample is a noise segment, a timbre variant of the stop phrase and a
    noise tail of U[tail_range] seconds. Frames before the tail are NIRQ,
    tail frames are IRQ.

    Args:
        rng_seed: Dataset seed; sample i uses SeedSequence([rng_seed, i])
        count: Samples to build
        frame_rate: Frames per second
        phrase_generator: Stop phrase source
        noise_generator: Background source
        tail_range: Tail duration range in seconds
        noise_range: Leading noise duration range in seconds

    Returns:
        List of InterruptSample
    """
    if count < 1:
        raise GeneratorError(f"count must be >= 1, got {count}")
    if frame_rate <= 0:
        raise GeneratorError(f"frame_rate must be positive, got {frame_rate}")
    phrase_generator = phrase_generator or StopPhraseGenerator()
    noise_generator = noise_generator or MixedNoiseGenerator(phrase_generator.code_count)
    if phrase_generator.length == 0:
        raise GeneratorError("Stop phrase is empty")

    samples = []
    for index in range(count):
        rng = _sample_rng(rng_seed, index)
        lead = int(round(rng.uniform(*noise_range) * frame_rate))
        tail = int(round(rng.uniform(*tail_range) * frame_rate))
        phrase = phrase_generator.timbre(rng)
        noise = noise_generator.frames(rng, lead + tail)
        codes = np.concatenate([noise[:lead], phrase, noise[lead:]])
        marker_end = lead + len(phrase)
        labels = [NIRQ] * marker_end + [IRQ] * tail
        samples.append(InterruptSample(_to_frames(codes), labels, (lead, marker_end),
                                       (marker_end, marker_end + tail)))
    return samples


def build_noise_streams(rng_seed: int, count: int, frame_rate: int = DEFAULT_FRAME_RATE,
                        noise_generator: Optional[NoiseGenerator] = None,
                        duration_range: Tuple[float, float] = (1.0, 10.0)) -> List[InterruptSample]:
    """Noise-only streams for false-trigger measurement"""
    if count < 1:
        raise GeneratorError(f"count must be >= 1, got {count}")
    noise_generator = noise_generator or MixedNoiseGenerator()
    streams = []
    for index in range(count):
        rng = _sample_rng(rng_seed, index)
        n = max(1, int(round(rng.uniform(*duration_range) * frame_rate)))
        streams.append(InterruptSample(_to_frames(noise_generator.frames(rng, n)), [NIRQ] * n))
    return streams


def save_interrupt_dataset(path: Union[str, Path], samples: Iterable[InterruptSample]) -> int:
    count = 0
    with open(path, 'w') as f:
        for sample in samples:
            f.write(json.dumps(sample.to_dict()) + '\n')
            count += 1
    return count


def load_interrupt_dataset(path: Union[str, Path]) -> List[InterruptSample]:
    with open(path, 'r') as f:
        return [InterruptSample.from_dict(json.loads(line)) for line in f if line.strip()]


# Detectors

class StatusDetector(Protocol):
    def reset(self, sample: Optional[InterruptSample] = None): ...

    def observe(self, frame: StreamFrame) -> int: ...


class ExactMatchDetector:
    """
    Matches the stop phrase's content layers over the last frames

    IRQ latches on the frame after the phrase completes and holds until reset.
    """

    def __init__(self, phrase: Optional[StopPhraseGenerator] = None):
        self.content = (phrase or StopPhraseGenerator()).content
        self.window: Deque[Tuple[int, ...]] = deque(maxlen=len(self.content))
        self.pending = False
        self.latched = False

    def reset(self, sample: Optional[InterruptSample] = None):
        self.window.clear()
        self.pending = False
        self.latched = False

    def observe(self, frame: StreamFrame) -> int:
        if self.pending:
            self.latched = True
        self.window.append(tuple(frame.codes[i] for i in CONTENT_LAYERS))
        if not self.latched and len(self.window) == len(self.content):
            self.pending = np.array_equal(np.array(self.window), self.content)
        return IRQ if self.latched else NIRQ


class OracleDetector:
    """Replays a sample's own labels"""

    def __init__(self):
        self.labels: List[int] = []
        self.position = 0

    def reset(self, sample: Optional[InterruptSample] = None):
        self.labels = list(sample.labels) if sample is not None else []
        self.position = 0

    def observe(self, frame: StreamFrame) -> int:
        status = self.labels[self.position] if self.position < len(self.labels) else NIRQ
        self.position += 1
        return status


class ConstantDetector:
    def __init__(self, status: int = NIRQ):
        self.status = status

    def reset(self, sample: Optional[InterruptSample] = None):
        pass

    def observe(self, frame: StreamFrame) -> int:
        return self.status


class LearnedDetector:
    """
    Model text head restricted to {IRQ, NIRQ}, run in its own listening session

    The session starts with the interrupt task marker and ingests one frame
    column per observe call. Once the context is full it restarts on the most
    recent frames.
    """

    def __init__(self, model: OmniTransformer):
        self.model = model
        self.layout = model.layout
        self.history: Deque[List[int]] = deque(maxlen=model.config.context_length - 1)
        self.cache: Optional[KVCache] = None

    def reset(self, sample: Optional[InterruptSample] = None):
        self.history.clear()
        self.cache = KVCache(len(self.model.layers))
        self._feed([response_column(self.layout, TaskKind.INTERRUPT)])

    def _feed(self, columns: List[List[int]]) -> torch.Tensor:
        with torch.no_grad():
            steps = self.model.embed_columns(torch.tensor(columns))
            return self.model.status_logits(steps, self.cache)

    def observe(self, frame: StreamFrame) -> int:
        if self.cache is None:
            self.reset()
        column = frame_column(self.layout, frame.codes)
        self.history.append(column)
        if self.cache.length >= self.model.config.context_length:
            self.cache.clear()
            logits = self._feed([response_column(self.layout, TaskKind.INTERRUPT)] + list(self.history))
        else:
            logits = self._feed([column])
        return IRQ if int(torch.argmax(logits[-1])) == 1 else NIRQ


# Engine

class ColumnSource(Protocol):
    finished: bool

    def step(self) -> Optional[np.ndarray]: ...

    def close(self): ...


@dataclass
class GenerationRequest:
    prefix: EffectiveInputSequence
    limits: GenerationLimits = field(default_factory=GenerationLimits)
    sampling: Optional[SamplingConfig] = None
    text_only: bool = False


class DuplexEngine:
    """
    Single owner of the Speaking/Listening state

    Status emission and column emission are serialized through one lock, so
    no column is committed after an IRQ has been committed.
    """

    def __init__(self, detector: Optional[StatusDetector] = None, model: Optional[OmniTransformer] = None):
        self.detector = detector
        self.model = model
        self.state = DuplexState()
        self.source: Optional[ColumnSource] = None
        self.lock = threading.Lock()

    @property
    def mode(self) -> DuplexMode:
        return self.state.mode

    def reset(self, sample: Optional[InterruptSample] = None):
        with self.lock:
            if self.source is not None:
                self.source.close()
            self.source = None
            self.state = DuplexState()
        if self.detector is not None:
            self.detector.reset(sample)

    def submit_query(self, request: Union[GenerationRequest, ColumnSource]):
        """
        Start speaking a new response (Listening -> Speaking)

        After an interruption the detector is re-armed and the status log
        starts over, so the stop phrase just heard cannot halt the new response.
        """
        if isinstance(request, GenerationRequest):
            if self.model is None:
                raise DuplexError("Engine has no model to serve a generation request")
            request = GenerationSession(self.model, request.prefix, request.limits,
                                        request.sampling, request.text_only)
        with self.lock:
            if self.source is not None:
                self.source.close()
            self.source = request
            rearm = IRQ in self.state.status_log
            if rearm:
                self.state = DuplexState()
            self.state.mode = DuplexMode.SPEAKING
        if rearm and self.detector is not None:
            self.detector.reset()
        logger.debug("Engine speaking")

    def ingest_frame(self, frame: StreamFrame) -> int:
        """
        Score one incoming frame

        Returns:
            IRQ or NIRQ; an IRQ while speaking halts the active generation
        """
        if self.detector is None:
            raise DuplexError("Engine has no status detector")
        status = self.detector.observe(frame)
        with self.lock:
            self.state.status_log.append(status)
            if status == IRQ and self.state.mode == DuplexMode.SPEAKING:
                self.source.close()
                self.source = None
                self.state.mode = DuplexMode.LISTENING
                logger.info("Interrupted at frame %d", len(self.state.status_log) - 1)
        return status

    def emit_column(self) -> Optional[np.ndarray]:
        """Next output column while speaking, None otherwise"""
        with self.lock:
            if self.state.mode != DuplexMode.SPEAKING:
                return None
            column = self.source.step()
            if column is None or self.source.finished:
                self.source = None
                self.state.mode = DuplexMode.LISTENING
            return column


class ScriptedSource:
    """Column source replaying fixed columns"""

    def __init__(self, columns: Sequence[Sequence[int]]):
        self.columns = [np.asarray(c, dtype=np.int64) for c in columns]
        self.position = 0
        self.finished = not self.columns

    def step(self) -> Optional[np.ndarray]:
        if self.finished:
            return None
        column = self.columns[self.position]
        self.position += 1
        self.finished = self.position >= len(self.columns)
        return column

    def close(self):
        self.finished = True


@dataclass
class DuplexTranscript:
    columns: List[np.ndarray]
    status_log: List[int]
    stop_step: Optional[int]
    natural_end: bool

    @property
    def interrupted(self) -> bool:
        return self.stop_step is not None


_END_OF_STREAM = object()


@dataclass
class _StreamFailure:
    error: BaseException


def run_duplex_session(engine: DuplexEngine, input_stream: Iterable[StreamFrame],
                       generation_request: Union[GenerationRequest, ColumnSource],
                       queue_size: int = 8, max_steps: Optional[int] = None) -> DuplexTranscript:
    """
    Speak while listening: one ingested frame per generation step

    Frames come from a producer thread through a bounded queue, so an
    infinite input stream is pulled only as fast as the session steps.

    Args:
        engine: Engine with a detector
        input_stream: Incoming frames (may be infinite)
        generation_request: Prefix request or a ready column source
        queue_size: Frame queue bound
        max_steps: Optional cap on session steps

    Returns:
        DuplexTranscript

    Raises:
        Whatever input_stream raises, once the frames before the failure are consumed
    """
    frames: Queue = Queue(maxsize=queue_size)
    stop = threading.Event()

    def offer(item) -> bool:
        while not stop.is_set():
            try:
                frames.put(item, timeout=0.05)
                return True
            except Full:
                continue
        return False

    def produce():
        try:
            for frame in input_stream:
                if not offer(frame):
                    return
        except Exception as e:
            logger.error("Input stream failed: %s", e)
            offer(_StreamFailure(e))
            return
        offer(_END_OF_STREAM)

    producer = threading.Thread(target=produce, name='duplex-frames', daemon=True)
    engine.submit_query(generation_request)
    producer.start()

    columns: List[np.ndarray] = []
    stop_step = None
    natural_end = False
    input_open = True
    step = 0
    try:
        while max_steps is None or step < max_steps:
            if input_open:
                frame = frames.get()
                if isinstance(frame, _StreamFailure):
                    raise frame.error
                if frame is _END_OF_STREAM:
                    input_open = False
                else:
                    engine.ingest_frame(frame)
                    if engine.mode == DuplexMode.LISTENING:
                        stop_step = step
                        break
            column = engine.emit_column()
            if column is not None:
                columns.append(column)
                step += 1
            if engine.mode == DuplexMode.LISTENING:
                natural_end = True
                break
    finally:
        stop.set()
        while True:
            try:
                frames.get_nowait()
            except Empty:
                break
        producer.join(timeout=1.0)
    return DuplexTranscript(columns, list(engine.state.status_log), stop_step, natural_end)


# Evaluation

@dataclass
class DuplexMetrics:
    frame_accuracy: float
    irq_recall: float
    false_trigger_rate: Optional[float]
    mean_latency_frames: Optional[float]
    missed_interrupts: int
    frames: int

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def detect_statuses(detector: StatusDetector, sample: InterruptSample) -> List[int]:
    detector.reset(sample)
    return [detector.observe(frame) for frame in sample.frames]


def evaluate_duplex(detector: Union[StatusDetector, OmniTransformer], eval_set: Sequence[InterruptSample],
                    noise_streams: Sequence[InterruptSample] = ()) -> DuplexMetrics:
    """
    Score a detector on labeled streams

    Args:
        detector: Status detector, or a model (wrapped in a LearnedDetector)
        eval_set: Labeled interruption samples; noise-only entries count toward false triggers
        noise_streams: Extra noise-only streams

    Returns:
        DuplexMetrics; false_trigger_rate is None without noise-only streams
    """
    if not eval_set:
        raise DuplexError("Evaluation set is empty")
    if isinstance(detector, OmniTransformer):
        detector = LearnedDetector(detector)

    labels: List[int] = []
    predictions: List[int] = []
    latencies: List[int] = []
    missed = 0
    noise_frames = 0
    noise_triggers = 0
    scored = [(sample, True) for sample in eval_set] + [(sample, False) for sample in noise_streams]
    for sample, in_eval_set in scored:
        statuses = detect_statuses(detector, sample)
        if in_eval_set:
            labels += sample.labels
            predictions += statuses
        if not sample.interrupted:
            noise_frames += len(statuses)
            noise_triggers += sum(statuses)
            continue
        start, end = sample.marker_span
        if sample.tail_span[1] == sample.tail_span[0]:
            continue
        fired = [i for i in range(start, len(statuses)) if statuses[i] == IRQ]
        if fired:
            latencies.append(fired[0] - end)
        else:
            missed += 1

    return DuplexMetrics(
        frame_accuracy=float(accuracy_score(labels, predictions)),
        irq_recall=float(recall_score(labels, predictions, pos_label=IRQ, zero_division=0)),
        false_trigger_rate=noise_triggers / noise_frames if noise_frames else None,
        mean_latency_frames=float(np.mean(latencies)) if latencies else None,
        missed_interrupts=missed,
        frames=len(labels),
    )
