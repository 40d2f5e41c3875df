"""
Layered Vocabulary Module
Unified text + audio id space: one text region followed by one region per
audio codebook layer, with reserved control ids in each region
"""
import hashlib
import json
from dataclasses import asdict, dataclass, field
from enum import Enum
from typing import Dict, List, Optional, Tuple

import numpy as np


class LayoutError(ValueError):
    """Raised for invalid layouts, out-of-range ids and missing control slots"""


class TaskKind(str, Enum):
    """Task kinds; each owns a response marker in the text control table"""
    IMAGE_CAPTION = 'image_caption'
    SPEECH_TO_TEXT_QA = 'speech_to_text_qa'
    TEXT_TO_TEXT_QA = 'text_to_text_qa'
    ASR = 'asr'
    VISUAL_QA_TEXT_OUT = 'visual_qa_text_out'
    AUDIO_QA_AUDIO_OUT = 'audio_qa_audio_out'
    VISUAL_QA_AUDIO_OUT = 'visual_qa_audio_out'
    TEXT_QA_AUDIO_OUT = 'text_qa_audio_out'
    INTERRUPT = 'interrupt'

    @property
    def emits_audio(self) -> bool:
        return self in (TaskKind.AUDIO_QA_AUDIO_OUT,
                        TaskKind.VISUAL_QA_AUDIO_OUT,
                        TaskKind.TEXT_QA_AUDIO_OUT)


class ControlKind(str, Enum):
    TEXT_PAD = 'TEXT_PAD'
    TEXT_BOS = 'TEXT_BOS'
    TEXT_EOS = 'TEXT_EOS'
    IRQ = 'IRQ'
    NIRQ = 'NIRQ'
    MODALITY_MARK = 'MODALITY_MARK'
    RESPONSE_MARK = 'RESPONSE_MARK'
    AUDIO_PAD = 'AUDIO_PAD'
    AUDIO_BOA = 'AUDIO_BOA'
    AUDIO_EOA = 'AUDIO_EOA'
    AUDIO_RESERVED = 'AUDIO_RESERVED'


MODALITIES = ('vision', 'audio', 'text')

# Offsets inside each audio layer's control sub-region
AUDIO_CONTROL_OFFSETS = {
    ControlKind.AUDIO_PAD: 0,
    ControlKind.AUDIO_BOA: 1,
    ControlKind.AUDIO_EOA: 2,
}


@dataclass(frozen=True)
class ControlToken:
    """
    A reserved token

    Args:
        kind: Control kind
        layer: Audio layer (1-based) for AUDIO_* kinds, otherwise None
        variant: Modality for MODALITY_MARK, task kind value for RESPONSE_MARK
    """
    kind: ControlKind
    layer: Optional[int] = None
    variant: Optional[str] = None

    def __str__(self) -> str:
        if self.layer is not None:
            return f"{self.kind.value}({self.layer})"
        if self.variant is not None:
            return f"{self.kind.value}({self.variant})"
        return self.kind.value


def _text_control_table() -> List[ControlToken]:
    table = [
        ControlToken(ControlKind.TEXT_PAD),
        ControlToken(ControlKind.TEXT_BOS),
        ControlToken(ControlKind.TEXT_EOS),
        ControlToken(ControlKind.IRQ),
        ControlToken(ControlKind.NIRQ),
    ]
    table += [ControlToken(ControlKind.MODALITY_MARK, variant=m) for m in MODALITIES]
    table += [ControlToken(ControlKind.RESPONSE_MARK, variant=t.value) for t in TaskKind]
    return table


# Allocated downward from the top of the text region: entry 0 is the last text id
TEXT_CONTROL_TABLE: Tuple[ControlToken, ...] = tuple(_text_control_table())
_TEXT_CONTROL_INDEX: Dict[ControlToken, int] = {tok: i for i, tok in enumerate(TEXT_CONTROL_TABLE)}


@dataclass(frozen=True)
class TokenClass:
    """Result of classify: category is 'text', 'audio_code' or 'control'"""
    category: str
    layer: int
    token: Optional[ControlToken] = None

    @property
    def kind(self) -> Optional[ControlKind]:
        return self.token.kind if self.token else None


@dataclass(frozen=True)
class VocabLayout:
    """
    Partition of the global id space into a text region (layer 0) and
    audio_layer_count audio regions, layer-major

    Args:
        text_region_size: Count of layer-0 ids
        audio_layer_count: Count of audio layers
        audio_layer_size: Ids per audio layer
        audio_code_count: Acoustic codes per audio layer
    """
    text_region_size: int = 152_000
    audio_layer_count: int = 7
    audio_layer_size: int = 4_160
    audio_code_count: int = 4_096
    control_slot_count: int = field(init=False)
    total_size: int = field(init=False)

    def __post_init__(self):
        for name in ('text_region_size', 'audio_layer_count', 'audio_layer_size', 'audio_code_count'):
            value = getattr(self, name)
            if not isinstance(value, (int, np.integer)) or value <= 0:
                raise LayoutError(f"{name} must be a positive integer, got {value!r}")
        if self.audio_code_count > self.audio_layer_size:
            raise LayoutError(
                f"audio_code_count ({self.audio_code_count}) exceeds "
                f"audio_layer_size ({self.audio_layer_size})"
            )
        object.__setattr__(self, 'control_slot_count', self.audio_layer_size - self.audio_code_count)
        object.__setattr__(
            self, 'total_size', self.text_region_size + self.audio_layer_count * self.audio_layer_size
        )

    @property
    def n_layers(self) -> int:
        """Rows of a token grid: text plus every audio layer"""
        return 1 + self.audio_layer_count

    @property
    def text_control_count(self) -> int:
        return len(TEXT_CONTROL_TABLE)

    @property
    def text_content_size(self) -> int:
        """Text ids below the control table (may be <= 0 for tiny layouts)"""
        return self.text_region_size - self.text_control_count

    @property
    def supports_controls(self) -> bool:
        return (self.text_content_size > 0
                and self.control_slot_count >= len(AUDIO_CONTROL_OFFSETS))

    def layer_size(self, layer: int) -> int:
        """Width of a layer's region (text region for layer 0)"""
        self._check_layer(layer)
        return self.text_region_size if layer == 0 else self.audio_layer_size

    def layer_offset(self, layer: int) -> int:
        self._check_layer(layer)
        if layer == 0:
            return 0
        return self.text_region_size + (layer - 1) * self.audio_layer_size

    def region_widths(self) -> List[int]:
        return [self.layer_size(k) for k in range(self.n_layers)]

    def _check_layer(self, layer: int):
        if not 0 <= layer <= self.audio_layer_count:
            raise LayoutError(f"layer {layer} outside 0..{self.audio_layer_count}")

    def to_dict(self) -> Dict[str, int]:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(',', ':'))

    @classmethod
    def from_dict(cls, data: Dict) -> 'VocabLayout':
        layout = cls(
            text_region_size=int(data['text_region_size']),
            audio_layer_count=int(data['audio_layer_count']),
            audio_layer_size=int(data['audio_layer_size']),
            audio_code_count=int(data['audio_code_count']),
        )
        for derived in ('control_slot_count', 'total_size'):
            if derived in data and int(data[derived]) != getattr(layout, derived):
                raise LayoutError(
                    f"Layout document declares {derived}={data[derived]}, "
                    f"expected {getattr(layout, derived)}"
                )
        return layout

    @classmethod
    def from_json(cls, text: str) -> 'VocabLayout':
        return cls.from_dict(json.loads(text))


def make_layout(text_region_size: int = 152_000, audio_layer_count: int = 7,
                audio_layer_size: int = 4_160, audio_code_count: int = 4_096) -> VocabLayout:
    """
    Build and validate a vocabulary layout

    Args:
        text_region_size: Count of layer-0 ids
        audio_layer_count: Count of audio layers
        audio_layer_size: Ids per audio layer
        audio_code_count: Acoustic codes per layer

    Returns:
        Validated VocabLayout
    """
    return VocabLayout(text_region_size, audio_layer_count, audio_layer_size, audio_code_count)


def full_layout() -> VocabLayout:
    """The 181,120-id layout"""
    return make_layout()


def desk_layout() -> VocabLayout:
    """Reduced text region, full-size audio regions"""
    return make_layout(text_region_size=2_048)


def layout_hash(layout: VocabLayout) -> int:
    digest = hashlib.sha256(layout.to_json().encode('utf-8')).digest()
    return int.from_bytes(digest[:8], 'big')


def global_id(layout: VocabLayout, layer: int, local: int) -> int:
    """
    Map (layer, local) to a global id

    Args:
        layout: Vocabulary layout
        layer: 0 for text, 1..audio_layer_count for audio
        local: Index inside the layer's region

    Returns:
        Global id
    """
    width = layout.layer_size(layer)
    if not 0 <= local < width:
        raise LayoutError(f"local index {local} outside layer {layer} region of width {width}")
    return layout.layer_offset(layer) + int(local)


def locate(layout: VocabLayout, token_id: int) -> Tuple[int, int]:
    """
    Inverse of global_id

    Returns:
        (layer, local) pair
    """
    if not 0 <= token_id < layout.total_size:
        raise LayoutError(f"id {token_id} outside [0, {layout.total_size})")
    if token_id < layout.text_region_size:
        return 0, int(token_id)
    layer_index, local = divmod(int(token_id) - layout.text_region_size, layout.audio_layer_size)
    return layer_index + 1, local


def global_ids(layout: VocabLayout, layers: np.ndarray, locals_: np.ndarray) -> np.ndarray:
    """Vectorized global_id"""
    layers = np.asarray(layers, dtype=np.int64)
    locals_ = np.asarray(locals_, dtype=np.int64)
    if layers.size and (layers.min() < 0 or layers.max() > layout.audio_layer_count):
        raise LayoutError("layer outside the layout")
    widths = np.where(layers == 0, layout.text_region_size, layout.audio_layer_size)
    if locals_.size and ((locals_ < 0).any() or (locals_ >= widths).any()):
        raise LayoutError("local index outside its layer region")
    offsets = np.where(layers == 0, 0, layout.text_region_size + (layers - 1) * layout.audio_layer_size)
    return offsets + locals_


def locate_ids(layout: VocabLayout, ids: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Vectorized locate"""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= layout.total_size):
        raise LayoutError(f"ids outside [0, {layout.total_size})")
    audio = ids >= layout.text_region_size
    shifted = np.where(audio, ids - layout.text_region_size, 0)
    layers = np.where(audio, shifted // layout.audio_layer_size + 1, 0)
    locals_ = np.where(audio, shifted % layout.audio_layer_size, ids)
    return layers, locals_


def control_id(layout: VocabLayout, token: ControlToken) -> int:
    """
    Resolve a control token to its global id

    Args:
        layout: Vocabulary layout
        token: Control token

    Returns:
        Global id of the token
    """
    if token.kind in AUDIO_CONTROL_OFFSETS:
        if token.layer is None or not 1 <= token.layer <= layout.audio_layer_count:
            raise LayoutError(f"{token} needs an audio layer in 1..{layout.audio_layer_count}")
        if layout.control_slot_count < len(AUDIO_CONTROL_OFFSETS):
            raise LayoutError(
                f"Layout has {layout.control_slot_count} control slots per audio layer, "
                f"{len(AUDIO_CONTROL_OFFSETS)} required"
            )
        local = layout.audio_code_count + AUDIO_CONTROL_OFFSETS[token.kind]
        return global_id(layout, token.layer, local)

    index = _TEXT_CONTROL_INDEX.get(token)
    if index is None:
        raise LayoutError(f"Unknown control token {token}")
    if layout.text_content_size <= 0:
        raise LayoutError(
            f"Text region of {layout.text_region_size} ids cannot host "
            f"{layout.text_control_count} control ids"
        )
    return layout.text_region_size - 1 - index


def classify(layout: VocabLayout, token_id: int) -> TokenClass:
    """
    Classify a global id

    Returns:
        TokenClass with category text, audio_code or control
    """
    layer, local = locate(layout, token_id)
    if layer == 0:
        if layout.text_content_size > 0 and local >= layout.text_content_size:
            return TokenClass('control', 0, TEXT_CONTROL_TABLE[layout.text_region_size - 1 - local])
        return TokenClass('text', 0)
    if local < layout.audio_code_count:
        return TokenClass('audio_code', layer)
    slot = local - layout.audio_code_count
    for kind, offset in AUDIO_CONTROL_OFFSETS.items():
        if slot == offset:
            return TokenClass('control', layer, ControlToken(kind, layer=layer))
    return TokenClass('control', layer, ControlToken(ControlKind.AUDIO_RESERVED, layer=layer))


# Shorthands used across the package

def text_pad(layout: VocabLayout) -> int:
    return control_id(layout, ControlToken(ControlKind.TEXT_PAD))


def text_bos(layout: VocabLayout) -> int:
    return control_id(layout, ControlToken(ControlKind.TEXT_BOS))


def text_eos(layout: VocabLayout) -> int:
    return control_id(layout, ControlToken(ControlKind.TEXT_EOS))


def irq_id(layout: VocabLayout) -> int:
    return control_id(layout, ControlToken(ControlKind.IRQ))


def nirq_id(layout: VocabLayout) -> int:
    return control_id(layout, ControlToken(ControlKind.NIRQ))


def audio_pad(layout: VocabLayout, layer: int) -> int:
    return control_id(layout, ControlToken(ControlKind.AUDIO_PAD, layer=layer))


def audio_boa(layout: VocabLayout, layer: int) -> int:
    return control_id(layout, ControlToken(ControlKind.AUDIO_BOA, layer=layer))


def audio_eoa(layout: VocabLayout, layer: int) -> int:
    return control_id(layout, ControlToken(ControlKind.AUDIO_EOA, layer=layer))


def modality_mark(layout: VocabLayout, modality: str) -> int:
    if modality not in MODALITIES:
        raise LayoutError(f"Unknown modality {modality!r}")
    return control_id(layout, ControlToken(ControlKind.MODALITY_MARK, variant=modality))


def response_mark(layout: VocabLayout, task: TaskKind) -> int:
    return control_id(layout, ControlToken(ControlKind.RESPONSE_MARK, variant=TaskKind(task).value))


def pad_ids(layout: VocabLayout) -> np.ndarray:
    """PAD id per grid row: TEXT_PAD for row 0, AUDIO_PAD(k) for row k"""
    return np.array([text_pad(layout)] + [audio_pad(layout, k) for k in range(1, layout.n_layers)],
                    dtype=np.int64)


def main():
    """Print the allocation table of the default layout"""
    layout = full_layout()
    print("=" * 80)
    print("LAYERED VOCABULARY")
    print("=" * 80)
    print(f"Total size: {layout.total_size:,}")
    for layer in range(layout.n_layers):
        start = layout.layer_offset(layer)
        print(f"  Layer {layer}: [{start:,}, {start + layout.layer_size(layer):,})")
    print("\nText controls:")
    for token in TEXT_CONTROL_TABLE:
        print(f"  {str(token):<36} {control_id(layout, token):,}")


if __name__ == "__main__":
    main()
