"""
Checkpoint Module
Saves and restores model weights with a JSON header (config, layout,
parameter-group manifest, stage lineage) followed by f32 tensors
"""
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

import numpy as np
import torch

from layered_vocab import layout_hash
from omni_model import ModelConfig, OmniTransformer

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b'OMCK'


class CheckpointError(ValueError):
    """Raised for unreadable or inconsistent checkpoint files"""


@dataclass
class Checkpoint:
    model: OmniTransformer
    stage: Optional[int] = None
    lineage: List[str] = field(default_factory=list)
    header: Dict = field(default_factory=dict)

    @property
    def manifest(self) -> List[Dict]:
        return self.header.get('manifest', [])


def build_manifest(model: OmniTransformer) -> List[Dict]:
    manifest = []
    offset = 0
    for name, tensor in model.state_dict().items():
        count = tensor.numel()
        manifest.append({
            'name': name,
            'group': model.group_of(name),
            'shape': list(tensor.shape),
            'offset': offset,
            'count': count,
        })
        offset += count
    return manifest


def save_checkpoint(path: Union[str, Path], model: OmniTransformer, stage: Optional[int] = None,
                    lineage: Sequence[str] = ()) -> Path:
    """
    Write a checkpoint file

    Args:
        path: Output file
        model: Model to save
        stage: Training stage that produced the weights
        lineage: Checkpoints this one descends from, oldest first

    Returns:
        The written path
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    manifest = build_manifest(model)
    header = {
        'model_config': model.config.to_dict(),
        'layout': model.layout.to_dict(),
        'layout_hash': layout_hash(model.layout),
        'stage': stage,
        'lineage': list(lineage),
        'manifest': manifest,
    }
    header_bytes = json.dumps(header, sort_keys=True).encode('utf-8')
    state = model.state_dict()
    with open(path, 'wb') as f:
        f.write(CHECKPOINT_MAGIC)
        np.array([len(header_bytes)], dtype='<u4').tofile(f)
        f.write(header_bytes)
        for entry in manifest:
            state[entry['name']].detach().cpu().numpy().astype('<f4').tofile(f)
    logger.info("Saved checkpoint %s (stage %s, %d tensors)", path, stage, len(manifest))
    return path


def read_header(path: Union[str, Path]) -> Dict:
    with open(path, 'rb') as f:
        return _read_header(f, path)


def _read_header(f, path) -> Dict:
    if f.read(4) != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    size = np.fromfile(f, dtype='<u4', count=1)
    if size.size != 1:
        raise CheckpointError(f"{path}: truncated header")
    raw = f.read(int(size[0]))
    if len(raw) != int(size[0]):
        raise CheckpointError(f"{path}: truncated header")
    try:
        return json.loads(raw.decode('utf-8'))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: unreadable header ({e})") from e


def load_checkpoint(path: Union[str, Path]) -> Checkpoint:
    """
    Read a checkpoint file into a fresh model

    Args:
        path: Checkpoint file

    Returns:
        Checkpoint with the restored model
    """
    with open(path, 'rb') as f:
        header = _read_header(f, path)
        config = ModelConfig.from_dict(header['model_config'])
        if layout_hash(config.layout) != int(header['layout_hash']):
            raise CheckpointError(f"{path}: layout hash does not match the stored layout")
        model = OmniTransformer(config)
        expected = model.state_dict()
        state = {}
        for entry in header['manifest']:
            name = entry['name']
            if name not in expected:
                raise CheckpointError(f"{path}: unexpected tensor {name}")
            data = np.fromfile(f, dtype='<f4', count=entry['count'])
            if data.size != entry['count']:
                raise CheckpointError(f"{path}: truncated payload at {name}")
            if list(expected[name].shape) != entry['shape']:
                raise CheckpointError(
                    f"{path}: {name} has shape {entry['shape']}, model expects {list(expected[name].shape)}"
                )
            state[name] = torch.from_numpy(data.astype(np.float32).reshape(entry['shape']))
        missing = set(expected) - set(state)
        if missing:
            raise CheckpointError(f"{path}: missing tensors {sorted(missing)}")
    model.load_state_dict(state)
    return Checkpoint(model, header.get('stage'), list(header.get('lineage', [])), header)
