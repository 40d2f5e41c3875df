"""
Omni Model Module
Small causal transformer over the layered vocabulary: per-layer embedding
tables, a rotary self-attention trunk, one text head plus one head per audio
layer, the summed per-layer loss, streaming column generation and the
two-sample batch-parallel decoding trick
"""
import copy
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from delay_grid import DelayedGrid, TokenGrid, complete_stream, mask_targets, undo_delay
from layered_vocab import (
    TaskKind,
    VocabLayout,
    audio_boa,
    audio_eoa,
    desk_layout,
    irq_id,
    nirq_id,
    pad_ids,
    text_bos,
    text_eos,
)
from multimodal_assembly import (
    Adapter,
    EffectiveInputSequence,
    FeatureSequence,
    RESPONSE_MARK,
    assemble,
    token_column,
)

logger = logging.getLogger(__name__)

PARAMETER_GROUPS = ('adapters', 'embeddings', 'trunk', 'heads')


class ContextOverflowError(ValueError):
    """Raised when an input is longer than the model context"""


class ShapeMismatchError(ValueError):
    """Raised when grids, masks or prefixes disagree in shape"""


class SessionClosedError(RuntimeError):
    """Raised when stepping a closed or finished generation session"""


@dataclass
class SamplingConfig:
    """
    Token sampling settings

    temperature 0 means greedy decoding. Filters apply in the order
    top-k, temperature, top-p.
    """
    temperature: float = 0.0
    top_k: Optional[int] = None
    top_p: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.temperature < 0:
            raise ValueError(f"temperature must be >= 0, got {self.temperature}")
        if self.top_k is not None and self.top_k < 1:
            raise ValueError(f"top_k must be >= 1, got {self.top_k}")
        if not 0.0 <= self.top_p <= 1.0:
            raise ValueError(f"top_p must be in [0, 1], got {self.top_p}")

    @property
    def greedy(self) -> bool:
        return self.temperature == 0.0

    @classmethod
    def demo(cls, seed: int = 0) -> 'SamplingConfig':
        return cls(temperature=0.8, top_k=40, seed=seed)


@dataclass
class ModelConfig:
    """
    Model hyperparameters

    Args:
        layout: Vocabulary layout (head widths follow its regions)
        d_model: Embedding width
        n_trunk_layers: Transformer blocks
        n_attn_heads: Attention heads per block
        context_length: Maximum input steps
        encoder_width: Width of the (stub) encoder features the adapters take
        rope_base: Rotary embedding base
        sampling: Default sampling settings
    """
    layout: VocabLayout = field(default_factory=desk_layout)
    d_model: int = 128
    n_trunk_layers: int = 4
    n_attn_heads: int = 4
    context_length: int = 512
    encoder_width: int = 64
    rope_base: float = 10_000.0
    sampling: SamplingConfig = field(default_factory=SamplingConfig)

    def __post_init__(self):
        for name in ('d_model', 'n_trunk_layers', 'n_attn_heads', 'context_length', 'encoder_width'):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.d_model % self.n_attn_heads:
            raise ValueError(
                f"d_model ({self.d_model}) must be divisible by n_attn_heads ({self.n_attn_heads})"
            )
        if (self.d_model // self.n_attn_heads) % 2:
            raise ValueError("Per-head width must be even for rotary embeddings")

    @property
    def head_widths(self) -> List[int]:
        return self.layout.region_widths()

    def to_dict(self) -> Dict:
        data = asdict(self)
        data['layout'] = self.layout.to_dict()
        return data

    @classmethod
    def from_dict(cls, data: Dict) -> 'ModelConfig':
        data = dict(data)
        data['layout'] = VocabLayout.from_dict(data['layout'])
        data['sampling'] = SamplingConfig(**data.get('sampling', {}))
        return cls(**data)


@dataclass
class GenerationLimits:
    max_steps: int = 256

    def __post_init__(self):
        if self.max_steps < 1:
            raise ValueError(f"max_steps must be >= 1, got {self.max_steps}")


@dataclass
class JointLoss:
    """
    Summed negative log-likelihood over masked cells, split by grid row

    Args:
        total: Scalar, equal to per_layer.sum()
        per_layer: One scalar per grid row
        token_counts: Masked cell count per grid row
    """
    total: torch.Tensor
    per_layer: torch.Tensor
    token_counts: List[int]

    @property
    def n_tokens(self) -> int:
        return int(sum(self.token_counts))

    @property
    def mean(self) -> torch.Tensor:
        return self.total / max(self.n_tokens, 1)


# Trunk

class RMSNorm(nn.Module):
    def __init__(self, width: int, eps: float = 1e-6):
        super().__init__()
        self.eps = eps
        self.weight = nn.Parameter(torch.ones(width))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x * torch.rsqrt(x.pow(2).mean(-1, keepdim=True) + self.eps) * self.weight


class FeedForward(nn.Module):
    """SwiGLU block"""

    def __init__(self, d_model: int, hidden: int):
        super().__init__()
        self.gate_proj = nn.Linear(d_model, hidden, bias=False)
        self.up_proj = nn.Linear(d_model, hidden, bias=False)
        self.down_proj = nn.Linear(hidden, d_model, bias=False)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.down_proj(F.silu(self.gate_proj(x)) * self.up_proj(x))


def _rotate_half(x: torch.Tensor) -> torch.Tensor:
    half = x.shape[-1] // 2
    return torch.cat([-x[..., half:], x[..., :half]], dim=-1)


def apply_rope(x: torch.Tensor, start: int, base: float) -> torch.Tensor:
    """Rotary position embedding for x of shape (..., heads, L, head_dim) at positions start.."""
    head_dim = x.shape[-1]
    inv_freq = 1.0 / (base ** (torch.arange(0, head_dim, 2, dtype=x.dtype, device=x.device) / head_dim))
    positions = torch.arange(start, start + x.shape[-2], dtype=x.dtype, device=x.device)
    angles = positions[:, None] * inv_freq[None, :]
    angles = torch.cat([angles, angles], dim=-1)
    return x * angles.cos() + _rotate_half(x) * angles.sin()


class KVCache:
    """Per-session key/value store, one entry per trunk block"""

    def __init__(self, n_blocks: int):
        self.keys: List[Optional[torch.Tensor]] = [None] * n_blocks
        self.values: List[Optional[torch.Tensor]] = [None] * n_blocks
        self.length = 0

    def extend(self, block: int, k: torch.Tensor, v: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        if self.keys[block] is not None:
            k = torch.cat([self.keys[block], k], dim=-2)
            v = torch.cat([self.values[block], v], dim=-2)
        self.keys[block], self.values[block] = k, v
        return k, v

    def clear(self):
        self.keys = [None] * len(self.keys)
        self.values = [None] * len(self.values)
        self.length = 0


class CausalSelfAttention(nn.Module):
    def __init__(self, d_model: int, n_heads: int, rope_base: float):
        super().__init__()
        self.n_heads = n_heads
        self.head_dim = d_model // n_heads
        self.rope_base = rope_base
        self.qkv_proj = nn.Linear(d_model, 3 * d_model, bias=False)
        self.o_proj = nn.Linear(d_model, d_model, bias=False)

    def forward(self, x: torch.Tensor, start: int = 0, cache: Optional[KVCache] = None,
                block: int = 0) -> torch.Tensor:
        *lead, length, width = x.shape
        q, k, v = (t.view(*lead, length, self.n_heads, self.head_dim).transpose(-2, -3)
                   for t in self.qkv_proj(x).split(width, dim=-1))
        q = apply_rope(q, start, self.rope_base)
        k = apply_rope(k, start, self.rope_base)
        if cache is not None:
            k, v = cache.extend(block, k, v)
        scores = q @ k.transpose(-1, -2) / math.sqrt(self.head_dim)
        key_pos = torch.arange(k.shape[-2], device=x.device)
        query_pos = torch.arange(start, start + length, device=x.device)
        visible = key_pos[None, :] <= query_pos[:, None]
        scores = scores.masked_fill(~visible, float('-inf'))
        out = torch.softmax(scores, dim=-1) @ v
        return self.o_proj(out.transpose(-2, -3).reshape(*lead, length, width))


class TransformerBlock(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.attn_norm = RMSNorm(config.d_model)
        self.attn = CausalSelfAttention(config.d_model, config.n_attn_heads, config.rope_base)
        self.mlp_norm = RMSNorm(config.d_model)
        self.mlp = FeedForward(config.d_model, 4 * config.d_model)

    def forward(self, x: torch.Tensor, start: int, cache: Optional[KVCache], block: int) -> torch.Tensor:
        x = x + self.attn(self.attn_norm(x), start, cache, block)
        return x + self.mlp(self.mlp_norm(x))


class OmniTransformer(nn.Module):
    """
    Causal transformer with one embedding table and one output head per grid row

    Parameter names start with the prefix of their group: vision_adapter /
    audio_adapter (adapters), embeddings, layers / norm (trunk), heads.
    """

    def __init__(self, config: Optional[ModelConfig] = None):
        super().__init__()
        self.config = config or ModelConfig()
        self.layout = self.config.layout
        self.d_model = self.config.d_model
        widths = self.config.head_widths
        self.vision_adapter = Adapter(self.config.encoder_width, self.d_model)
        self.audio_adapter = Adapter(self.config.encoder_width, self.d_model)
        self.embeddings = nn.ModuleList(nn.Embedding(w, self.d_model) for w in widths)
        self.layers = nn.ModuleList(TransformerBlock(self.config) for _ in range(self.config.n_trunk_layers))
        self.norm = RMSNorm(self.d_model)
        self.heads = nn.ModuleList(nn.Linear(self.d_model, w, bias=False) for w in widths)
        self.register_buffer(
            'layer_offsets',
            torch.tensor([self.layout.layer_offset(k) for k in range(self.layout.n_layers)]),
            persistent=False,
        )
        self.apply(self._init_weights)

    @staticmethod
    def _init_weights(module: nn.Module):
        if isinstance(module, (nn.Linear, nn.Embedding)):
            nn.init.normal_(module.weight, mean=0.0, std=0.02)

    # Parameter groups

    @staticmethod
    def group_of(name: str) -> str:
        root = name.split('.', 1)[0]
        if root in ('vision_adapter', 'audio_adapter'):
            return 'adapters'
        if root == 'embeddings':
            return 'embeddings'
        if root == 'heads':
            return 'heads'
        return 'trunk'

    def parameter_groups(self) -> Dict[str, List[Tuple[str, nn.Parameter]]]:
        groups: Dict[str, List[Tuple[str, nn.Parameter]]] = {g: [] for g in PARAMETER_GROUPS}
        for name, param in self.named_parameters():
            groups[self.group_of(name)].append((name, param))
        return groups

    def set_trainable(self, groups: Sequence[str]):
        unknown = set(groups) - set(PARAMETER_GROUPS)
        if unknown:
            raise ValueError(f"Unknown parameter groups: {sorted(unknown)}")
        for name, param in self.named_parameters():
            param.requires_grad_(self.group_of(name) in groups)

    # Inputs

    def embed_slots(self, columns: torch.Tensor) -> torch.Tensor:
        """(L, n_layers) global ids -> (L, n_layers, d_model) slot embeddings"""
        columns = torch.as_tensor(columns, dtype=torch.long, device=self.layer_offsets.device)
        if columns.dim() != 2 or columns.shape[1] != self.layout.n_layers:
            raise ShapeMismatchError(
                f"Columns must have shape (L, {self.layout.n_layers}), got {tuple(columns.shape)}"
            )
        local = columns - self.layer_offsets
        slots = []
        for k, table in enumerate(self.embeddings):
            if ((local[:, k] < 0) | (local[:, k] >= table.num_embeddings)).any():
                raise ShapeMismatchError(f"Column slot {k} holds an id outside layer {k}")
            slots.append(table(local[:, k]))
        return torch.stack(slots, dim=1)

    def embed_columns(self, columns: torch.Tensor) -> torch.Tensor:
        """Averaged step vectors for token columns"""
        return self.embed_slots(columns).mean(dim=1)

    def adapter_for(self, modality: str) -> Adapter:
        return self.vision_adapter if modality == 'vision' else self.audio_adapter

    def build_prefix(self, vision: Optional[FeatureSequence] = None,
                     audio: Optional[FeatureSequence] = None,
                     text: Optional[Sequence[int]] = None,
                     task: Optional[TaskKind] = None) -> EffectiveInputSequence:
        """Project encoder features through the adapters and assemble the prefix"""
        if vision is not None:
            vision = self.vision_adapter.project(vision)
        if audio is not None:
            audio = self.audio_adapter.project(audio)
        return assemble(self, vision=vision, audio=audio, text=text, task_marker=task)

    def default_prefix(self) -> EffectiveInputSequence:
        """One step: [TEXT_BOS, AUDIO_BOA(1..)]"""
        layout = self.layout
        column = token_column(layout, text_bos(layout),
                              [audio_boa(layout, k) for k in range(1, layout.n_layers)])
        slots = self.embed_slots(torch.tensor([column]))
        return EffectiveInputSequence(slots.mean(dim=1), [RESPONSE_MARK], slots)

    # Forward

    def hidden(self, inputs: Union[EffectiveInputSequence, torch.Tensor],
               cache: Optional[KVCache] = None) -> torch.Tensor:
        x = inputs.steps if isinstance(inputs, EffectiveInputSequence) else inputs
        if x.dim() not in (2, 3) or x.shape[-1] != self.d_model:
            raise ShapeMismatchError(
                f"Input steps must have shape (L, {self.d_model}) or (B, L, {self.d_model}), got {tuple(x.shape)}"
            )
        start = cache.length if cache is not None else 0
        length = x.shape[-2]
        if start + length > self.config.context_length:
            raise ContextOverflowError(
                f"{start + length} steps exceed the context length {self.config.context_length}"
            )
        for block, layer in enumerate(self.layers):
            x = layer(x, start, cache, block)
        if cache is not None:
            cache.length = start + length
        return self.norm(x)

    def forward(self, inputs: Union[EffectiveInputSequence, torch.Tensor],
                cache: Optional[KVCache] = None) -> List[torch.Tensor]:
        """
        Per-row logits

        Args:
            inputs: Effective input sequence, (L, d_model) steps or a right-padded (B, L, d_model) batch
            cache: Optional KV cache continued from earlier calls

        Returns:
            n_layers tensors, logits[k] of shape ([B,] L, width of layer k)
        """
        h = self.hidden(inputs, cache)
        return [head(h) for head in self.heads]

    def status_logits(self, inputs: Union[EffectiveInputSequence, torch.Tensor],
                      cache: Optional[KVCache] = None) -> torch.Tensor:
        """Text head restricted to [NIRQ, IRQ]; shape ([B,] L, 2)"""
        h = self.hidden(inputs, cache)
        rows = torch.tensor([nirq_id(self.layout), irq_id(self.layout)], device=h.device)
        return h @ self.heads[0].weight[rows].T


def forward(model: OmniTransformer,
            effective_input: Union[EffectiveInputSequence, torch.Tensor]) -> List[torch.Tensor]:
    """Full-sequence logits, one tensor per grid row"""
    return model(effective_input)


def teacher_forced_steps(model: OmniTransformer, prefix: EffectiveInputSequence,
                         delayed: DelayedGrid) -> torch.Tensor:
    """Prefix steps followed by every delayed column but the last"""
    if delayed.length < 2:
        return prefix.steps
    columns = torch.as_tensor(delayed.rows.T[:-1], dtype=torch.long)
    return torch.cat([prefix.steps, model.embed_columns(columns)], dim=0)


# Loss

def joint_loss_from_logits(logits: Sequence[torch.Tensor], targets: np.ndarray,
                           mask: np.ndarray) -> JointLoss:
    """
    Summed cross-entropy per row

    Args:
        logits: One (T, width_k) tensor per row
        targets: (n_rows, T) local target indices
        mask: (n_rows, T) booleans, True where a cell counts
    """
    per_layer = []
    counts = []
    for k, row_logits in enumerate(logits):
        target = torch.as_tensor(targets[k], dtype=torch.long, device=row_logits.device)
        keep = torch.as_tensor(mask[k], dtype=torch.bool, device=row_logits.device)
        ce = F.cross_entropy(row_logits, target, reduction='none')
        per_layer.append(torch.where(keep, ce, torch.zeros_like(ce)).sum())
        counts.append(int(keep.sum()))
    per_layer_t = torch.stack(per_layer)
    return JointLoss(per_layer_t.sum(), per_layer_t, counts)


def loss(model: OmniTransformer, delayed: DelayedGrid, mask: Optional[np.ndarray] = None,
         prefix: Optional[EffectiveInputSequence] = None) -> JointLoss:
    """
    Teacher-forced next-column loss over a delayed target grid

    The prefix's last step predicts column 0; column t predicts column t + 1.

    Args:
        model: Model
        delayed: Delayed target grid
        mask: Cell mask (defaults to the non-PAD cells)
        prefix: Conditioning input (defaults to the one-step BOS/BOA prefix)

    Returns:
        JointLoss
    """
    layout = model.layout
    if delayed.layout != layout:
        raise ShapeMismatchError("Grid layout does not match the model layout")
    mask = mask_targets(delayed) if mask is None else np.asarray(mask, dtype=bool)
    if mask.shape != delayed.rows.shape:
        raise ShapeMismatchError(f"Mask shape {mask.shape} does not match grid shape {delayed.rows.shape}")
    prefix = prefix if prefix is not None else model.default_prefix()

    length = delayed.length
    logits = forward(model, teacher_forced_steps(model, prefix, delayed))
    start = len(prefix) - 1
    window = [row[start:start + length] for row in logits]
    offsets = np.array([layout.layer_offset(k) for k in range(layout.n_layers)])[:, None]
    return joint_loss_from_logits(window, delayed.rows - offsets, mask)


def status_loss(model: OmniTransformer, frames_input: EffectiveInputSequence,
                labels: Sequence[int]) -> torch.Tensor:
    """
    Summed status cross-entropy; the status of frame i is read right after it is ingested

    Args:
        frames_input: Marker step followed by one step per frame
        labels: 1 for IRQ, 0 for NIRQ, one per frame
    """
    if len(frames_input) != len(labels) + 1:
        raise ShapeMismatchError(f"{len(frames_input) - 1} frame steps but {len(labels)} labels")
    logits = model.status_logits(frames_input)[1:]
    return F.cross_entropy(logits, torch.as_tensor(list(labels), dtype=torch.long), reduction='sum')


def batch_loss(model: OmniTransformer,
               batch: Sequence[Tuple[EffectiveInputSequence, DelayedGrid]]) -> JointLoss:
    """
    Joint loss of several (prefix, delayed grid) pairs in one padded forward pass

    Sequences are right-padded, so causal attention keeps every real position
    away from the padding. Heads only run on hidden states at masked target
    cells. Equals the sum of loss() over the pairs.
    """
    if not batch:
        raise ValueError("Empty batch")
    layout = model.layout
    sequences, starts, masks = [], [], []
    for prefix, delayed in batch:
        if delayed.layout != layout:
            raise ShapeMismatchError("Grid layout does not match the model layout")
        sequences.append(teacher_forced_steps(model, prefix, delayed))
        starts.append(len(prefix) - 1)
        masks.append(mask_targets(delayed))
    h = model.hidden(nn.utils.rnn.pad_sequence(sequences, batch_first=True))

    per_layer, counts = [], []
    for k, head in enumerate(model.heads):
        rows, positions, targets = [], [], []
        for i, (_, delayed) in enumerate(batch):
            cols = np.flatnonzero(masks[i][k])
            rows.extend([i] * len(cols))
            positions.extend((starts[i] + cols).tolist())
            targets.extend((delayed.rows[k, cols] - layout.layer_offset(k)).tolist())
        counts.append(len(targets))
        if not targets:
            per_layer.append(h.sum() * 0.0)
            continue
        picked = h[torch.tensor(rows), torch.tensor(positions)]
        per_layer.append(F.cross_entropy(head(picked), torch.tensor(targets), reduction='sum'))
    per_layer_t = torch.stack(per_layer)
    return JointLoss(per_layer_t.sum(), per_layer_t, counts)


def batch_status_loss(model: OmniTransformer,
                      items: Sequence[Tuple[EffectiveInputSequence, Sequence[int]]]) -> torch.Tensor:
    """Summed status_loss() over several frame streams, one padded forward pass"""
    if not items:
        raise ValueError("Empty batch")
    for frames_input, labels in items:
        if len(frames_input) != len(labels) + 1:
            raise ShapeMismatchError(f"{len(frames_input) - 1} frame steps but {len(labels)} labels")
    steps = nn.utils.rnn.pad_sequence([f.steps for f, _ in items], batch_first=True)
    targets = torch.full(steps.shape[:2], -100, dtype=torch.long)
    for i, (_, labels) in enumerate(items):
        targets[i, 1:1 + len(labels)] = torch.as_tensor(list(labels), dtype=torch.long)
    logits = model.status_logits(steps)
    return F.cross_entropy(logits.reshape(-1, 2), targets.reshape(-1), ignore_index=-100, reduction='sum')


# Generation

def sample_token(logits: torch.Tensor, sampling: SamplingConfig,
                 generator: Optional[torch.Generator] = None) -> int:
    """Pick one index from a 1-D logit vector"""
    if sampling.greedy:
        return int(torch.argmax(logits))
    logits = logits.float()
    if sampling.top_k is not None:
        values, _ = torch.topk(logits, min(sampling.top_k, logits.numel()))
        logits = torch.where(logits < values[-1], torch.full_like(logits, float('-inf')), logits)
    logits = logits / sampling.temperature
    if sampling.top_p < 1.0:
        sorted_logits, sorted_idx = torch.sort(logits, descending=False)
        cumulative = sorted_logits.softmax(dim=-1).cumsum(dim=-1)
        remove = cumulative <= (1 - sampling.top_p)
        remove[-1:] = False
        logits = logits.masked_fill(remove.scatter(0, sorted_idx, remove), float('-inf'))
    probs = torch.softmax(logits, dim=-1)
    return int(torch.multinomial(probs, num_samples=1, generator=generator))


@dataclass
class GenerationResult:
    columns: List[np.ndarray]
    delayed: DelayedGrid
    grid: TokenGrid
    truncated: bool

    @property
    def steps(self) -> int:
        return len(self.columns)

    @property
    def text_row(self) -> List[int]:
        return [int(c[0]) for c in self.columns]


class GenerationSession:
    """
    Pull-based column generation with an exclusive KV cache

    Call sample_column() then commit(column), or step() for both. Audio row
    k is forced to PAD before column k, after its EOA, and throughout
    text-only runs; the text row is forced to TEXT_PAD after EOS.
    """

    def __init__(self, model: OmniTransformer, prefix: EffectiveInputSequence,
                 limits: Optional[GenerationLimits] = None,
                 sampling: Optional[SamplingConfig] = None,
                 text_only: bool = False):
        self.model = model
        self.layout = model.layout
        self.limits = limits or GenerationLimits()
        self.sampling = sampling or model.config.sampling
        self.text_only = text_only
        self.generator = torch.Generator().manual_seed(self.sampling.seed)
        self.pads = pad_ids(self.layout)
        self.eos = [text_eos(self.layout)] + [audio_eoa(self.layout, k) for k in range(1, self.layout.n_layers)]
        self.row_done = [False] * self.layout.n_layers
        self.columns: List[np.ndarray] = []
        self.truncated = False
        self.finished = False
        self.closed = False
        self.pending_text: Optional[int] = None
        self.cache = KVCache(len(model.layers))
        with torch.no_grad():
            self.next_logits = [row[-1] for row in model(prefix, self.cache)]

    @property
    def t(self) -> int:
        return len(self.columns)

    def _forced(self, row: int) -> bool:
        if self.row_done[row]:
            return True
        if row == 0:
            return False
        return self.text_only or self.t < row

    def _natural_end(self) -> bool:
        if not self.row_done[0]:
            return False
        return self.text_only or all(self.row_done[1:])

    def sample_column(self) -> np.ndarray:
        if self.closed or self.finished:
            raise SessionClosedError("Generation session has finished")
        column = self.pads.copy()
        for row in range(self.layout.n_layers):
            if self._forced(row):
                continue
            local = sample_token(self.next_logits[row], self.sampling, self.generator)
            column[row] = self.layout.layer_offset(row) + local
        if self.pending_text is not None and not self.row_done[0]:
            column[0] = self.pending_text
        self.pending_text = None
        return column

    def set_text(self, token: int):
        """Force the text slot of the next sampled column (ignored once the text row has ended)"""
        self.pending_text = int(token)

    def commit(self, column: Sequence[int]) -> np.ndarray:
        if self.closed or self.finished:
            raise SessionClosedError("Generation session has finished")
        column = np.asarray(column, dtype=np.int64)
        self.columns.append(column)
        for row in range(self.layout.n_layers):
            if column[row] == self.eos[row]:
                self.row_done[row] = True
        if self._natural_end():
            self.finished = True
        elif self.t >= self.limits.max_steps or self.cache.length >= self.model.config.context_length:
            self.finished = True
            self.truncated = True
        else:
            with torch.no_grad():
                steps = self.model.embed_columns(torch.as_tensor(column[None, :]))
                self.next_logits = [row[-1] for row in self.model(steps, self.cache)]
        return column

    def step(self) -> Optional[np.ndarray]:
        """Emit the next column, or None once generation is over"""
        if self.finished or self.closed:
            return None
        return self.commit(self.sample_column())

    def __iter__(self) -> Iterator[np.ndarray]:
        while True:
            column = self.step()
            if column is None:
                return
            yield column

    def close(self):
        """Stop the session and release its cache"""
        if not self.finished:
            self.truncated = True
        self.closed = True
        self.cache.clear()

    def result(self) -> GenerationResult:
        delayed = complete_stream(self.columns, self.layout)
        return GenerationResult(list(self.columns), delayed, undo_delay(delayed), self.truncated)


def generate(model: OmniTransformer, prefix: EffectiveInputSequence,
             limits: Optional[GenerationLimits] = None,
             sampling: Optional[SamplingConfig] = None,
             text_only: bool = False,
             on_column: Optional[Callable[[np.ndarray], None]] = None) -> GenerationResult:
    """
    Generate columns until every active row ends or the step limit is hit

    Args:
        model: Model
        prefix: Assembled input
        limits: Step limit
        sampling: Sampling settings (defaults to the model's)
        text_only: Keep every audio row at PAD
        on_column: Callback receiving each emitted column

    Returns:
        GenerationResult; truncated is set when the limit stopped generation
    """
    model.eval()
    session = GenerationSession(model, prefix, limits, sampling, text_only)
    for column in session:
        if on_column is not None:
            on_column(column)
    result = session.result()
    if result.truncated:
        logger.debug("Generation truncated after %d steps", result.steps)
    return result


@dataclass
class BatchParallelResult:
    """Audio rows from sample A, text row from sample B"""
    grid: TokenGrid
    text_row: List[int]
    audio_sample: GenerationResult
    text_sample: GenerationResult
    audio_logits: List[List[torch.Tensor]] = field(default_factory=list)


def batch_parallel_generate(model: OmniTransformer,
                            sample_a_prefix: EffectiveInputSequence,
                            sample_b_prefix: EffectiveInputSequence,
                            limits: Optional[GenerationLimits] = None,
                            sampling: Optional[SamplingConfig] = None,
                            b_text_only: bool = True,
                            text_substitutions: Optional[Dict[int, int]] = None,
                            capture_logits: bool = False) -> BatchParallelResult:
    """
    Two lockstep sessions; B's text token replaces A's text slot every step

    Args:
        model: Model
        sample_a_prefix: Prefix requesting text + audio
        sample_b_prefix: Prefix requesting text only
        limits: Step limit for both samples
        sampling: Sampling settings; B uses its seed, A uses seed + 1
        b_text_only: Run B without audio rows
        text_substitutions: step -> text id forced into B's output (intervention)
        capture_logits: Keep A's audio-row logits after every step

    Returns:
        BatchParallelResult
    """
    if len(sample_a_prefix) != len(sample_b_prefix):
        raise ShapeMismatchError(
            f"Prefixes for one query must have equal length, got {len(sample_a_prefix)} "
            f"and {len(sample_b_prefix)}"
        )
    model.eval()
    sampling = sampling or model.config.sampling
    sampling_a = replace(sampling, seed=sampling.seed + 1)
    text_substitutions = text_substitutions or {}
    session_a = GenerationSession(model, sample_a_prefix, limits, sampling_a, text_only=False)
    session_b = GenerationSession(model, sample_b_prefix, limits, sampling, text_only=b_text_only)
    text_pad_id = int(session_a.pads[0])
    audio_logits: List[List[torch.Tensor]] = []

    while not session_a.finished:
        text_token = text_pad_id
        if not session_b.finished:
            if session_b.t in text_substitutions:
                session_b.set_text(text_substitutions[session_b.t])
            text_token = int(session_b.step()[0])
        session_a.set_text(text_token)
        session_a.commit(session_a.sample_column())
        if capture_logits:
            audio_logits.append([row.detach().clone() for row in session_a.next_logits[1:]])

    while not session_b.finished:
        session_b.step()

    result_a = session_a.result()
    result_b = session_b.result()
    return BatchParallelResult(result_a.grid, result_b.text_row, result_a, result_b, audio_logits)


# Gradient check

def grad_check(model: OmniTransformer, delayed: DelayedGrid, mask: Optional[np.ndarray] = None,
               n_samples: int = 64, eps: float = 1e-4, seed: int = 0) -> float:
    """
    Compare analytic gradients with central finite differences in float64

    Args:
        model: Model (copied; the original is untouched)
        delayed: Tiny target grid
        mask: Optional loss mask
        n_samples: Parameter entries to check
        eps: Finite-difference step
        seed: Selects the checked entries

    Returns:
        Max relative error |a - n| / max(|a|, |n|, 1e-3)
    """
    twin = copy.deepcopy(model).double()
    twin.eval()
    params = [p for p in twin.parameters() if p.requires_grad]

    def objective() -> torch.Tensor:
        return loss(twin, delayed, mask).total

    twin.zero_grad()
    total = objective()
    if not total.requires_grad:
        return 0.0
    total.backward()
    grads = [p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p) for p in params]

    sizes = torch.tensor([p.numel() for p in params])
    generator = torch.Generator().manual_seed(seed)
    picks = torch.randint(int(sizes.sum()), (n_samples,), generator=generator)
    bounds = torch.cumsum(sizes, 0)
    worst = 0.0
    with torch.no_grad():
        for flat in picks.tolist():
            which = int(torch.searchsorted(bounds, torch.tensor(flat), right=True))
            index = flat - (int(bounds[which - 1]) if which else 0)
            view = params[which].view(-1)
            original = view[index].item()
            view[index] = original + eps
            plus = objective().item()
            view[index] = original - eps
            minus = objective().item()
            view[index] = original
            numeric = (plus - minus) / (2 * eps)
            analytic = grads[which].view(-1)[index].item()
            error = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-3)
            worst = max(worst, error)
    return worst
