"""
Training Pipeline Module
Three-stage training with parameter-group freezing: adapter alignment,
modality alignment with frozen adapters, then multimodal output training.
Handles learning-rate schedules, run records and evaluation.
"""
import hashlib
import json
import logging
import math
import os
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import torch
from torch.optim.lr_scheduler import LambdaLR
from tqdm import tqdm

from checkpoints import save_checkpoint
from delay_grid import apply_delay, mask_targets
from duplex_engine import LearnedDetector, detect_statuses, InterruptSample, StreamFrame
from layered_vocab import TaskKind
from multimodal_assembly import EffectiveInputSequence, assemble_frames, stub_audio_encode, stub_vision_encode
from omni_model import (
    PARAMETER_GROUPS,
    GenerationLimits,
    OmniTransformer,
    SamplingConfig,
    generate,
    batch_loss,
    batch_status_loss,
    forward,
    teacher_forced_steps,
)
from synthetic_tasks import InputBundle, Sample, TaskVocabulary, task_mix_samples

logger = logging.getLogger(__name__)

SCALES = ('desk', 'full')
LR_POLICIES = ('geometric', 'max')
STAGE_LR_RANGES = {1: (2e-5, 1e-3), 2: (2e-6, 2e-4), 3: (2e-6, 2e-5)}
STAGE_GROUPS = {
    1: ('adapters',),
    2: ('embeddings', 'trunk', 'heads'),
    3: PARAMETER_GROUPS,
}
STAGE_TASKS = {
    1: (TaskKind.ASR, TaskKind.IMAGE_CAPTION),
    2: (TaskKind.ASR, TaskKind.IMAGE_CAPTION, TaskKind.TEXT_TO_TEXT_QA,
        TaskKind.SPEECH_TO_TEXT_QA, TaskKind.VISUAL_QA_TEXT_OUT),
    3: tuple(TaskKind),
}
AUDIO_OUTPUT_TASKS = tuple(t for t in TaskKind if t.emits_audio)


class StageError(RuntimeError):
    """Raised for NaN losses, config/model mismatches and lineage violations"""


class EvaluationError(ValueError):
    """Raised when a dataset cannot be scored against a model"""


@dataclass
class StageConfig:
    """
    One training stage

    Args:
        stage: 1, 2 or 3
        trainable_groups: Parameter groups updated in this stage
        task_mix: Task kind -> sampling weight
        lr_range: (lr_min, lr_max)
        warmup_steps: Linear warmup length
        batch_size: Samples per step
        steps: Optimizer steps
        dataset_size: Samples generated for the stage
        optimizer: 'sgd' or 'adamw'
        lr_policy: 'geometric' (non-adapter groups peak at the geometric mean of the range) or 'max'
        momentum: SGD momentum
        weight_decay: Decoupled weight decay
        seed: Data order and dataset seed
    """
    stage: int
    trainable_groups: Tuple[str, ...]
    task_mix: Dict[TaskKind, float]
    lr_range: Tuple[float, float]
    warmup_steps: int
    batch_size: int
    steps: int = 2_000
    dataset_size: int = 2_000
    optimizer: str = 'sgd'
    lr_policy: str = 'geometric'
    momentum: float = 0.9
    weight_decay: float = 0.01
    seed: int = 0

    def __post_init__(self):
        self.trainable_groups = tuple(self.trainable_groups)
        self.task_mix = {TaskKind(k): float(v) for k, v in self.task_mix.items()}
        self.lr_range = tuple(float(x) for x in self.lr_range)
        groups = set(self.trainable_groups)
        if self.stage not in (1, 2, 3):
            raise ValueError(f"stage must be 1, 2 or 3, got {self.stage}")
        if not groups <= set(PARAMETER_GROUPS):
            raise ValueError(f"Unknown parameter groups {sorted(groups - set(PARAMETER_GROUPS))}")
        if self.stage == 1 and groups != {'adapters'}:
            raise ValueError("Stage 1 trains the adapters only")
        if self.stage == 2 and ('adapters' in groups or 'trunk' not in groups):
            raise ValueError("Stage 2 keeps the adapters frozen and trains the trunk")
        if self.stage == 3 and not any(self.task_mix.get(t, 0) > 0 for t in AUDIO_OUTPUT_TASKS):
            raise ValueError("Stage 3 needs audio-output tasks in its mix")
        lr_min, lr_max = self.lr_range
        if not 0 < lr_min <= lr_max:
            raise ValueError(f"lr_range must satisfy 0 < min <= max, got {self.lr_range}")
        if self.optimizer not in ('sgd', 'adamw'):
            raise ValueError(f"optimizer must be 'sgd' or 'adamw', got {self.optimizer!r}")
        if self.lr_policy not in LR_POLICIES:
            raise ValueError(f"lr_policy must be one of {LR_POLICIES}, got {self.lr_policy!r}")
        for name in ('steps', 'batch_size'):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.warmup_steps < 0:
            raise ValueError("warmup_steps must be >= 0")

    def peak_lr(self, group: str) -> float:
        """Adapters always peak at the range maximum; other groups follow lr_policy"""
        lr_min, lr_max = self.lr_range
        if group == 'adapters' or self.lr_policy == 'max':
            return lr_max
        return math.sqrt(lr_min * lr_max)

    def to_dict(self) -> Dict:
        data = asdict(self)
        data['task_mix'] = {k.value: v for k, v in self.task_mix.items()}
        data['trainable_groups'] = list(self.trainable_groups)
        data['lr_range'] = list(self.lr_range)
        return data

    @classmethod
    def from_dict(cls, data: Dict) -> 'StageConfig':
        return cls(**data)


def default_stage_configs(scale: str = 'desk', steps: Optional[int] = None,
                          seed: int = 0) -> List[StageConfig]:
    """
    Stage configs for a scale

    Args:
        scale: 'full' (warmup 1,500, batch 192, SGD) or 'desk' (warmup 50, batch 16,
            AdamW with every group peaking at the range maximum)
        steps: Optional step budget override
        seed: Base seed; stage n uses seed + n

    Returns:
        Three StageConfig values
    """
    if scale not in SCALES:
        raise ValueError(f"Unknown scale {scale!r}; expected one of {SCALES}")
    if scale == 'full':
        warmup, batch, optimizer, policy = 1_500, 192, 'sgd', 'geometric'
    else:
        warmup, batch, optimizer, policy = 50, 16, 'adamw', 'max'
    configs = []
    for stage in (1, 2, 3):
        configs.append(StageConfig(
            stage=stage,
            trainable_groups=STAGE_GROUPS[stage],
            task_mix={task: 1.0 for task in STAGE_TASKS[stage]},
            lr_range=STAGE_LR_RANGES[stage],
            warmup_steps=warmup,
            batch_size=batch,
            steps=steps or 2_000,
            optimizer=optimizer,
            lr_policy=policy,
            seed=seed + stage,
        ))
    return configs


def warmup_cosine(step: int, warmup_steps: int, total_steps: int, lr_max: float, lr_min: float) -> float:
    """Linear warmup to lr_max, then cosine decay to lr_min at total_steps"""
    if step < warmup_steps:
        return lr_max * (step + 1) / warmup_steps
    span = max(total_steps - warmup_steps, 1)
    frac = min(max((step - warmup_steps) / span, 0.0), 1.0)
    return lr_min + (lr_max - lr_min) * (1 + math.cos(frac * math.pi)) / 2


@dataclass
class RunRecord:
    stage: int
    configs: List[Dict] = field(default_factory=list)
    losses: List[float] = field(default_factory=list)
    lrs: List[float] = field(default_factory=list)
    eval_metrics: Dict = field(default_factory=dict)
    lineage: List[str] = field(default_factory=list)
    checkpoint: Optional[str] = None
    status: str = 'running'
    wall_clock_seconds: float = 0.0

    def to_dict(self) -> Dict:
        return asdict(self)

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, 'w') as f:
            json.dump(self.to_dict(), f, indent=2)
        curve = pd.DataFrame({'step': range(len(self.losses)), 'loss': self.losses,
                              'lr': self.lrs[:len(self.losses)]})
        curve.to_csv(path.with_suffix('.csv'), index=False)
        return path

    @classmethod
    def load(cls, path) -> 'RunRecord':
        with open(path, 'r') as f:
            return cls(**json.load(f))


# Objectives

def sample_prefix(model: OmniTransformer, inputs: InputBundle, task: TaskKind) -> EffectiveInputSequence:
    width = model.config.encoder_width
    vision = stub_vision_encode(inputs.vision_seed, width) if inputs.vision_seed is not None else None
    audio = None
    if inputs.audio_frames is not None:
        audio = stub_audio_encode(inputs.audio_frames, width, model.layout.audio_layer_size)
    return model.build_prefix(vision=vision, audio=audio, text=inputs.text, task=task)


def batch_objective(model: OmniTransformer, samples: Sequence[Sample]) -> Tuple[torch.Tensor, int]:
    """
    Summed loss and counted tokens for a batch of samples

    Response samples share one padded forward pass; interrupt samples share
    another through the status head.
    """
    responses, interrupts = [], []
    for sample in samples:
        if sample.task == TaskKind.INTERRUPT:
            interrupts.append((assemble_frames(model, sample.inputs.audio_frames), sample.status))
        else:
            responses.append((sample_prefix(model, sample.inputs, sample.task), apply_delay(sample.target)))
    total = torch.zeros(())
    tokens = 0
    if responses:
        joint = batch_loss(model, responses)
        total = total + joint.total
        tokens += joint.n_tokens
    if interrupts:
        total = total + batch_status_loss(model, interrupts)
        tokens += sum(len(labels) for _, labels in interrupts)
    return total, tokens


def parameter_digests(model: OmniTransformer, groups: Sequence[str]) -> Dict[str, str]:
    digests = {}
    for name, param in model.named_parameters():
        if model.group_of(name) in groups:
            digests[name] = hashlib.sha256(param.detach().cpu().numpy().tobytes()).hexdigest()
    return digests


def build_optimizer(model: OmniTransformer, config: StageConfig) -> Tuple[torch.optim.Optimizer, LambdaLR]:
    param_groups = []
    lambdas = []
    lr_min = config.lr_range[0]
    for group, named in model.parameter_groups().items():
        params = [p for _, p in named if p.requires_grad]
        if not params:
            continue
        peak = config.peak_lr(group)
        param_groups.append({'params': params, 'lr': peak, 'name': group})
        lambdas.append(lambda step, peak=peak: warmup_cosine(
            step, config.warmup_steps, config.steps, peak, min(lr_min, peak)) / peak)
    if config.optimizer == 'adamw':
        optimizer = torch.optim.AdamW(param_groups, weight_decay=config.weight_decay)
    else:
        optimizer = torch.optim.SGD(param_groups, momentum=config.momentum)
    return optimizer, LambdaLR(optimizer, lambdas)


def run_stage(config: StageConfig, model: OmniTransformer, datasets: Optional[Sequence[Sample]] = None,
              out_dir: Optional[str] = None, lineage: Sequence[str] = (),
              parent_stage: Optional[int] = None, quiet: bool = True,
              eval_samples: Optional[Sequence[Sample]] = None) -> Tuple[OmniTransformer, RunRecord]:
    """
    Train one stage

    Args:
        config: Stage config
        model: Model, updated in place
        datasets: Training samples (generated from the config's task mix when omitted)
        out_dir: Where to write the checkpoint and run record
        lineage: Checkpoints this run descends from, oldest first
        parent_stage: Stage of the initializing checkpoint
        quiet: Disable the progress bar
        eval_samples: Optional samples to evaluate after training

    Returns:
        (model, RunRecord)
    """
    if config.stage > 1 and parent_stage != config.stage - 1:
        raise StageError(f"Stage {config.stage} must start from a stage {config.stage - 1} checkpoint, "
                         f"got {parent_stage}")
    if config.stage == 1 and parent_stage is not None:
        raise StageError("Stage 1 starts from untrained weights")
    present = {g for g, named in model.parameter_groups().items() if named}
    if not set(config.trainable_groups) <= present:
        raise StageError(f"Model lacks parameter groups {sorted(set(config.trainable_groups) - present)}")

    torch.manual_seed(config.seed)
    if datasets is None:
        datasets = task_mix_samples(config.task_mix, config.dataset_size, config.seed, model.layout)
    if not datasets:
        raise StageError("Stage has no training samples")

    record = RunRecord(stage=config.stage, configs=[config.to_dict()], lineage=list(lineage))
    frozen = [g for g in PARAMETER_GROUPS if g not in config.trainable_groups]
    before = parameter_digests(model, frozen)
    model.train()
    model.set_trainable(config.trainable_groups)
    optimizer, scheduler = build_optimizer(model, config)
    rng = np.random.default_rng(config.seed)
    started = time.time()
    out_path = Path(out_dir) if out_dir else None

    progress = tqdm(range(config.steps), desc=f"stage {config.stage}", disable=quiet)
    for _ in progress:
        batch = rng.integers(0, len(datasets), size=config.batch_size)
        optimizer.zero_grad()
        total, tokens = batch_objective(model, [datasets[int(index)] for index in batch])
        objective = total / max(tokens, 1)
        value = float(objective.detach())
        record.lrs.append(float(optimizer.param_groups[0]['lr']))
        if not math.isfinite(value):
            record.status = 'nan'
            record.wall_clock_seconds = time.time() - started
            if out_path:
                record.save(out_path / f"stage{config.stage}_record.json")
            raise StageError(f"Stage {config.stage} loss became {value} at step {len(record.losses)}")
        record.losses.append(value)
        objective.backward()
        if config.optimizer == 'sgd' and config.weight_decay:
            with torch.no_grad():
                for group in optimizer.param_groups:
                    for param in group['params']:
                        param.mul_(1 - group['lr'] * config.weight_decay)
        optimizer.step()
        scheduler.step()
        progress.set_postfix(loss=f"{value:.4f}")

    model.set_trainable(PARAMETER_GROUPS)
    model.eval()
    if parameter_digests(model, frozen) != before:
        raise StageError(f"Frozen groups {frozen} changed during stage {config.stage}")

    if eval_samples:
        record.eval_metrics = evaluate(model, eval_samples)
    record.status = 'completed'
    record.wall_clock_seconds = time.time() - started
    if out_path:
        checkpoint = save_checkpoint(out_path / f"stage{config.stage}.omck", model,
                                     stage=config.stage, lineage=lineage)
        record.checkpoint = str(checkpoint)
        record.save(out_path / f"stage{config.stage}_record.json")
    logger.info("Stage %d finished: loss %.4f -> %.4f in %.1fs", config.stage,
                record.losses[0], record.losses[-1], record.wall_clock_seconds)
    return model, record


def run_pipeline(configs: Sequence[StageConfig], model: OmniTransformer, out_dir: str,
                 quiet: bool = True, eval_samples: Optional[Sequence[Sample]] = None) -> List[RunRecord]:
    """Run stages in order, each starting from the previous stage's checkpoint and scored on eval_samples"""
    records = []
    lineage: List[str] = []
    parent = None
    for config in configs:
        model, record = run_stage(config, model, out_dir=out_dir, lineage=lineage,
                                  parent_stage=parent, quiet=quiet, eval_samples=eval_samples)
        records.append(record)
        lineage = lineage + [record.checkpoint]
        parent = config.stage
    return records


# Evaluation

def evaluate(model: OmniTransformer, samples: Sequence[Sample],
             sampling: Optional[SamplingConfig] = None) -> Dict:
    """
    Teacher-forced next-token accuracy and per-task sequence exact match

    Args:
        model: Model
        samples: Samples with closed-form targets
        sampling: Decoding settings (greedy by default)

    Returns:
        {'next_token_accuracy', 'sequence_exact_match': {task: rate}, 'samples'}
    """
    if not samples:
        raise EvaluationError("No samples to evaluate")
    sampling = sampling or SamplingConfig()
    model.eval()
    rows = []
    detector = None
    with torch.no_grad():
        for sample in samples:
            if sample.target.layout != model.layout:
                raise EvaluationError("Dataset layout does not match the checkpoint layout")
            if sample.task == TaskKind.INTERRUPT:
                detector = detector or LearnedDetector(model)
                stream = InterruptSample([StreamFrame(tuple(f), i) for i, f in enumerate(sample.inputs.audio_frames)],
                                         sample.status)
                statuses = detect_statuses(detector, stream)
                hits = int(sum(int(a == b) for a, b in zip(statuses, sample.status)))
                rows.append({'task': sample.task.value, 'correct': hits, 'cells': len(statuses),
                             'exact': statuses == list(sample.status)})
                continue
            prefix = sample_prefix(model, sample.inputs, sample.task)
            delayed = apply_delay(sample.target)
            correct, cells = _next_token_hits(model, prefix, delayed)
            limits = GenerationLimits(max_steps=delayed.length + 4)
            result = generate(model, prefix, limits, sampling, text_only=not sample.task.emits_audio)
            rows.append({'task': sample.task.value, 'correct': correct, 'cells': cells,
                         'exact': result.grid == sample.target})
    table = pd.DataFrame(rows)
    return {
        'next_token_accuracy': float(table['correct'].sum() / max(table['cells'].sum(), 1)),
        'sequence_exact_match': {task: float(rate) for task, rate in table.groupby('task')['exact'].mean().items()},
        'samples': len(table),
    }


def _next_token_hits(model: OmniTransformer, prefix: EffectiveInputSequence, delayed) -> Tuple[int, int]:
    layout = model.layout
    mask = mask_targets(delayed)
    logits = forward(model, teacher_forced_steps(model, prefix, delayed))
    start = len(prefix) - 1
    correct = 0
    for k, row in enumerate(logits):
        predicted = row[start:start + delayed.length].argmax(dim=-1).numpy() + layout.layer_offset(k)
        correct += int(((predicted == delayed.rows[k]) & mask[k]).sum())
    return correct, int(mask.sum())


def runs_dir() -> Path:
    return Path(os.getenv('OMNI_RUNS_DIR', 'runs'))
