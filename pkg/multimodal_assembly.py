"""
Multimodal Assembly Module
Builds the model's effective input sequence from vision features, audio
features and text tokens: block placement, feature replication across the
audio layer slots and the per-step layer-slot averaging rule
"""
import functools
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import FrozenSet, Iterable, List, Optional, Protocol, Sequence, Union

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from layered_vocab import (
    TaskKind,
    VocabLayout,
    audio_boa,
    audio_pad,
    locate,
    modality_mark,
    response_mark,
)

logger = logging.getLogger(__name__)

FEATURE_MAGIC = b'OMF1'
VISION_LENGTH = 50  # 49 patch features + 1 global feature
MODALITY_CODES = {'vision': 0, 'audio': 1}
BASE_ADAPTER_INTERMEDIATE = 4_864
BASE_MODEL_WIDTH = 896

# Provenance tags
VISION_FEAT = 'vision_feat'
AUDIO_FEAT = 'audio_feat'
TOKEN_COLUMN = 'token_column'
RESPONSE_MARK = 'response_mark'


class AssemblyError(ValueError):
    """Raised when inputs cannot be assembled"""


class FeatureFormatError(ValueError):
    """Raised for malformed feature files"""


class LayerEmbedder(Protocol):
    """What assembly needs from the model: per-layer token embeddings"""
    layout: VocabLayout
    d_model: int

    def embed_slots(self, columns: torch.Tensor) -> torch.Tensor:
        """(L, n_layers) global ids -> (L, n_layers, d_model) slot embeddings"""
        ...


@dataclass
class FeatureSequence:
    """
    Continuous encoder output

    Args:
        modality: 'vision' or 'audio'
        vectors: Float tensor of shape (L, D)
    """
    modality: str
    vectors: torch.Tensor

    def __post_init__(self):
        if self.modality not in MODALITY_CODES:
            raise AssemblyError(f"Unknown feature modality {self.modality!r}")
        if not isinstance(self.vectors, torch.Tensor):
            self.vectors = torch.as_tensor(np.asarray(self.vectors, dtype=np.float32))
        if self.vectors.dim() != 2:
            raise AssemblyError(f"Feature vectors must be 2-D, got {tuple(self.vectors.shape)}")
        if self.modality == 'vision' and self.vectors.shape[0] != VISION_LENGTH:
            raise AssemblyError(
                f"Vision features need exactly {VISION_LENGTH} vectors, got {self.vectors.shape[0]}"
            )

    @property
    def length(self) -> int:
        return self.vectors.shape[0]

    @property
    def width(self) -> int:
        return self.vectors.shape[1]


@dataclass
class EffectiveInputSequence:
    """
    Fused per-step embeddings, the trunk's input

    Args:
        steps: (L, d_model) step vectors, each the mean of its layer slots
        provenance: One tag per step
        slots: (L, n_layers, d_model) layer-slot vectors the steps average
    """
    steps: torch.Tensor
    provenance: List[str] = field(default_factory=list)
    slots: Optional[torch.Tensor] = None

    def __len__(self) -> int:
        return self.steps.shape[0]

    @property
    def length(self) -> int:
        return len(self)


def adapter_intermediate_width(d_model: int) -> int:
    """Scale the 4,864 intermediate width by d_model / 896"""
    return max(1, round(BASE_ADAPTER_INTERMEDIATE * d_model / BASE_MODEL_WIDTH))


class Adapter(nn.Module):
    """Gated feed-forward projection from encoder width to model width"""

    def __init__(self, in_width: int, d_model: int, intermediate: Optional[int] = None):
        """
        Args:
            in_width: Encoder feature width
            d_model: Model embedding width
            intermediate: Hidden width (defaults to the scaled 4,864 rule)
        """
        super().__init__()
        intermediate = intermediate or adapter_intermediate_width(d_model)
        self.in_width = in_width
        self.d_model = d_model
        self.gate_proj = nn.Linear(in_width, intermediate, bias=False)
        self.up_proj = nn.Linear(in_width, intermediate, bias=False)
        self.down_proj = nn.Linear(intermediate, d_model, bias=False)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.down_proj(F.silu(self.gate_proj(x)) * self.up_proj(x))

    def project(self, features: FeatureSequence) -> FeatureSequence:
        if features.width != self.in_width:
            raise AssemblyError(
                f"Adapter expects width {self.in_width}, features have {features.width}"
            )
        weight = self.down_proj.weight
        vectors = features.vectors.to(device=weight.device, dtype=weight.dtype)
        return FeatureSequence(features.modality, self(vectors))


# Stub encoders

def _seeded_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(int(seed) & 0xFFFF_FFFF_FFFF_FFFF))


def stub_vision_encode(image_seed: int, width: int = 768) -> FeatureSequence:
    """
    Deterministic pseudo-image features

    Rows 0..48 are seeded pseudo patch features; row 49 is their mean.

    Args:
        image_seed: Any 64-bit seed
        width: Encoder width

    Returns:
        Vision FeatureSequence of 50 vectors
    """
    patches = _seeded_rng(image_seed).standard_normal((VISION_LENGTH - 1, width)).astype(np.float32)
    global_feature = patches.mean(axis=0, keepdims=True)
    return FeatureSequence('vision', torch.from_numpy(np.concatenate([patches, global_feature])))


@functools.lru_cache(maxsize=64)
def _audio_codebook(layer: int, layer_size: int, width: int) -> np.ndarray:
    table = _seeded_rng(0xA0D10000 + layer).standard_normal((layer_size, width)).astype(np.float32)
    table.setflags(write=False)
    return table


def stub_audio_encode(token_frames: Sequence[Sequence[int]], width: int = 768,
                      layer_size: int = 4_160) -> FeatureSequence:
    """
    Deterministic per-frame embedding of audio code frames

    Args:
        token_frames: Frames of per-layer local code ids
        width: Encoder width
        layer_size: Ids per audio layer

    Returns:
        Audio FeatureSequence with one vector per frame
    """
    frames = np.asarray(token_frames, dtype=np.int64)
    if frames.ndim != 2 or frames.shape[0] == 0:
        raise AssemblyError("Audio encoder needs a non-empty sequence of frames")
    if (frames < 0).any() or (frames >= layer_size).any():
        raise AssemblyError(f"Frame codes must lie in [0, {layer_size})")
    vectors = np.zeros((frames.shape[0], width), dtype=np.float32)
    for layer in range(frames.shape[1]):
        vectors += _audio_codebook(layer + 1, layer_size, width)[frames[:, layer]]
    vectors /= np.sqrt(frames.shape[1])
    return FeatureSequence('audio', torch.from_numpy(vectors))


# Feature files

def save_features(path: Union[str, Path], features: FeatureSequence):
    """Write features in the binary feature format"""
    vectors = features.vectors.detach().cpu().numpy().astype('<f4')
    with open(path, 'wb') as f:
        f.write(FEATURE_MAGIC)
        np.array([MODALITY_CODES[features.modality]], dtype='u1').tofile(f)
        np.array(vectors.shape, dtype='<u4').tofile(f)
        vectors.tofile(f)


def load_features(path: Union[str, Path]) -> FeatureSequence:
    """
    Read precomputed encoder features

    Args:
        path: File in the binary feature format

    Returns:
        Parsed FeatureSequence
    """
    with open(path, 'rb') as f:
        if f.read(4) != FEATURE_MAGIC:
            raise FeatureFormatError(f"{path}: bad magic, expected {FEATURE_MAGIC!r}")
        modality_code = np.fromfile(f, dtype='u1', count=1)
        shape = np.fromfile(f, dtype='<u4', count=2)
        if modality_code.size != 1 or shape.size != 2:
            raise FeatureFormatError(f"{path}: truncated header")
        names = {code: name for name, code in MODALITY_CODES.items()}
        modality = names.get(int(modality_code[0]))
        if modality is None:
            raise FeatureFormatError(f"{path}: unknown modality code {int(modality_code[0])}")
        length, width = (int(v) for v in shape)
        if modality == 'vision' and length != VISION_LENGTH:
            raise FeatureFormatError(
                f"{path}: vision features need {VISION_LENGTH} rows, header says {length}"
            )
        data = np.fromfile(f, dtype='<f4', count=length * width)
        if data.size != length * width:
            raise FeatureFormatError(
                f"{path}: truncated payload ({data.size} of {length * width} values)"
            )
        if f.read(1):
            raise FeatureFormatError(f"{path}: payload longer than the header's shape")
    return FeatureSequence(modality, torch.from_numpy(data.astype(np.float32).reshape(length, width)))


# Assembly

def default_task(present_modalities: Iterable[str]) -> Optional[TaskKind]:
    """
    Task implied by a single input modality

    Returns:
        TaskKind, or None when an explicit marker is required
    """
    present: FrozenSet[str] = frozenset(present_modalities)
    if not present:
        raise AssemblyError("At least one modality must be present")
    return {
        frozenset({'vision'}): TaskKind.IMAGE_CAPTION,
        frozenset({'audio'}): TaskKind.SPEECH_TO_TEXT_QA,
        frozenset({'text'}): TaskKind.TEXT_TO_TEXT_QA,
    }.get(present)


def token_column(layout: VocabLayout, text_id: int, audio_ids: Optional[Sequence[int]] = None) -> List[int]:
    """Input column: a layer-0 id plus one id per audio layer (PAD by default)"""
    if audio_ids is None:
        audio_ids = [audio_pad(layout, k) for k in range(1, layout.n_layers)]
    return [int(text_id)] + [int(a) for a in audio_ids]


def response_column(layout: VocabLayout, task: TaskKind) -> List[int]:
    """Final input column: the task's response marker, BOA slots for audio-emitting tasks"""
    task = TaskKind(task)
    fill = audio_boa if task.emits_audio else audio_pad
    return token_column(layout, response_mark(layout, task),
                        [fill(layout, k) for k in range(1, layout.n_layers)])


def _feature_slots(embedder: LayerEmbedder, features: FeatureSequence) -> torch.Tensor:
    layout = embedder.layout
    placeholder_column = torch.tensor([token_column(layout, modality_mark(layout, features.modality))])
    placeholder = embedder.embed_slots(placeholder_column)[0, 0]
    vectors = features.vectors.to(dtype=placeholder.dtype, device=placeholder.device)
    replicas = vectors.unsqueeze(1).expand(-1, layout.n_layers - 1, -1)
    return torch.cat([placeholder.expand(vectors.shape[0], 1, -1), replicas], dim=1)


def assemble(embedder: LayerEmbedder,
             vision: Optional[FeatureSequence] = None,
             audio: Optional[FeatureSequence] = None,
             text: Optional[Sequence[int]] = None,
             task_marker: Optional[TaskKind] = None) -> EffectiveInputSequence:
    """
    Build the effective input sequence [vision][audio][text][response marker]

    Args:
        embedder: Model embeddings (per-layer tables)
        vision: Adapter-projected vision features
        audio: Adapter-projected audio features
        text: Text-region token ids
        task_marker: Task kind; defaults to the single-modality default task

    Returns:
        EffectiveInputSequence of length sum(block lengths) + 1
    """
    layout = embedder.layout
    present = [name for name, value in (('vision', vision), ('audio', audio), ('text', text))
               if value is not None]
    if not present:
        raise AssemblyError("At least one modality must be present")
    task = task_marker if task_marker is not None else default_task(present)
    if task is None:
        raise AssemblyError(f"Modalities {present} need an explicit task marker")
    task = TaskKind(task)

    blocks: List[torch.Tensor] = []
    provenance: List[str] = []
    for features, tag, expected in ((vision, VISION_FEAT, 'vision'), (audio, AUDIO_FEAT, 'audio')):
        if features is None:
            continue
        if features.modality != expected:
            raise AssemblyError(f"Expected {expected} features, got {features.modality}")
        if features.width != embedder.d_model:
            raise AssemblyError(
                f"{expected} features have width {features.width}, model width is {embedder.d_model}"
            )
        blocks.append(_feature_slots(embedder, features))
        provenance += [tag] * features.length

    columns = []
    if text is not None:
        for token in text:
            if locate(layout, int(token))[0] != 0:
                raise AssemblyError(f"Text input id {token} is not a text-region id")
            columns.append(token_column(layout, token))
    columns.append(response_column(layout, task))
    blocks.append(embedder.embed_slots(torch.tensor(columns)))
    provenance += [TOKEN_COLUMN] * (len(columns) - 1) + [RESPONSE_MARK]

    slots = torch.cat(blocks, dim=0)
    return EffectiveInputSequence(slots.mean(dim=1), provenance, slots)


def frame_column(layout: VocabLayout, frame: Sequence[int]) -> List[int]:
    """Input column for one audio frame of local codes; layer 0 holds the audio placeholder"""
    audio_layers = layout.n_layers - 1
    if len(frame) != audio_layers:
        raise AssemblyError(f"Frames need {audio_layers} codes, got {len(frame)}")
    audio_ids = [layout.layer_offset(k + 1) + int(code) for k, code in enumerate(frame)]
    return token_column(layout, modality_mark(layout, 'audio'), audio_ids)


def assemble_frames(embedder: LayerEmbedder, frames: Sequence[Sequence[int]],
                    task_marker: TaskKind = TaskKind.INTERRUPT) -> EffectiveInputSequence:
    """Token-input stream: the task marker followed by one column per audio frame"""
    layout = embedder.layout
    columns = [response_column(layout, task_marker)]
    columns += [frame_column(layout, frame) for frame in frames]
    slots = embedder.embed_slots(torch.tensor(columns))
    return EffectiveInputSequence(slots.mean(dim=1), [RESPONSE_MARK] + [TOKEN_COLUMN] * len(frames), slots)
