"""
Omni Command Line
Generates synthetic data, trains the three stages, runs generation and
duplex sessions, evaluates and inspects checkpoints
"""
import argparse
import json
import logging
import os
import sys
from typing import List, Optional

import torch
from dotenv import load_dotenv

from checkpoints import load_checkpoint, read_header
from duplex_engine import (
    STATUS_NAMES,
    DuplexEngine,
    ExactMatchDetector,
    GenerationRequest,
    LearnedDetector,
    ScriptedSource,
    StopPhraseGenerator,
    build_interrupt_dataset,
    load_interrupt_dataset,
    run_duplex_session,
    save_interrupt_dataset,
)
from layered_vocab import TaskKind, desk_layout, full_layout, pad_ids
from multimodal_assembly import load_features
from omni_model import GenerationLimits, ModelConfig, OmniTransformer, SamplingConfig, generate
from synthetic_tasks import InputBundle, SyntheticTask, TaskVocabulary, gen_task_data, save_dataset
from training_pipeline import default_stage_configs, evaluate, run_stage, runs_dir, sample_prefix

load_dotenv()

logger = logging.getLogger('omni')

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_RUNTIME = 2


class UsageError(Exception):
    pass


class OmniArgumentParser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise UsageError(message)


def default_seed() -> int:
    return int(os.getenv('OMNI_SEED', '0'))


def layout_for(scale: str):
    return full_layout() if scale == 'full' else desk_layout()


def banner(title: str):
    print("=" * 80)
    print(title)
    print("=" * 80)


# Subcommands

def cmd_data_gen(args) -> int:
    layout = layout_for(args.scale)
    task = SyntheticTask(TaskKind(args.task), args.seed, args.size, TaskVocabulary(), args.frame_rate)
    if task.kind == TaskKind.INTERRUPT:
        # interrupt streams keep their marker spans for duplex sessions
        streams = build_interrupt_dataset(task.seed, task.size, task.frame_rate) if task.size else []
        count = save_interrupt_dataset(args.out, streams)
    else:
        count = save_dataset(args.out, task, gen_task_data(task, layout), layout)
    print(f"✓ Wrote {count} {task.kind.value} samples to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    config = default_stage_configs(args.scale, steps=args.steps, seed=args.seed)[args.stage - 1]
    if args.optimizer:
        config.optimizer = args.optimizer
    banner(f"TRAINING STAGE {args.stage} ({args.scale} scale)")
    print(f"Trainable groups: {', '.join(config.trainable_groups)}")
    print(f"Tasks: {', '.join(t.value for t in config.task_mix)}")

    lineage: List[str] = []
    parent_stage = None
    if args.init:
        print(f"\nStep 1: Loading {args.init}...")
        checkpoint = load_checkpoint(args.init)
        model = checkpoint.model
        parent_stage = checkpoint.stage
        lineage = checkpoint.lineage + [str(args.init)]
    else:
        print("\nStep 1: Building a fresh model...")
        model = OmniTransformer(ModelConfig(layout=layout_for(args.scale)))

    print(f"Step 2: Training {config.steps} steps...")
    _, record = run_stage(config, model, out_dir=args.out, lineage=lineage,
                          parent_stage=parent_stage, quiet=args.quiet)
    print(f"\n✓ Loss {record.losses[0]:.4f} -> {record.losses[-1]:.4f}")
    print(f"✓ Checkpoint: {record.checkpoint}")
    return EXIT_OK


def _read_prefix_line(path: str) -> dict:
    with open(path, 'r') as f:
        for line in f:
            if line.strip():
                return json.loads(line)
    raise ValueError(f"{path} holds no prefix line")


def cmd_generate(args) -> int:
    model = load_checkpoint(args.checkpoint).model
    request = _read_prefix_line(args.prefix)
    inputs = InputBundle.from_dict(request)
    task = TaskKind(request['task']) if 'task' in request else None
    if args.features:
        features = load_features(args.features)
        prefix = model.build_prefix(
            vision=features if features.modality == 'vision' else None,
            audio=features if features.modality == 'audio' else None,
            text=inputs.text, task=task,
        )
    else:
        prefix = sample_prefix(model, inputs, task)
    sampling = SamplingConfig(args.temperature, args.top_k, 1.0, args.seed)
    text_only = args.text_only or (task is not None and not task.emits_audio)
    result = generate(model, prefix, GenerationLimits(args.max_steps), sampling, text_only=text_only,
                      on_column=(lambda c: print(json.dumps(c.tolist()))) if args.stream else None)
    print(json.dumps({'grid': result.grid.to_lists(), 'steps': result.steps, 'truncated': result.truncated}))
    return EXIT_OK


def cmd_duplex(args) -> int:
    streams = load_interrupt_dataset(args.stream)
    model = load_checkpoint(args.checkpoint).model if args.checkpoint else None
    if model is None and not args.stub:
        raise UsageError("duplex needs --checkpoint unless --stub is given")
    detector = ExactMatchDetector(StopPhraseGenerator(args.code_count)) if args.stub else LearnedDetector(model)
    engine = DuplexEngine(detector, model)
    layout = model.layout if model is not None else desk_layout()

    banner("DUPLEX SESSIONS")
    for index, stream in enumerate(streams):
        engine.reset(stream)
        if model is not None:
            query = model.build_prefix(text=[1, 2, 3], task=TaskKind.TEXT_QA_AUDIO_OUT)
            request = GenerationRequest(query, GenerationLimits(len(stream.frames) + 1))
        else:
            request = ScriptedSource([pad_ids(layout)] * (len(stream.frames) + 1))
        transcript = run_duplex_session(engine, iter(stream.frames), request)
        statuses = ' '.join(STATUS_NAMES[s] for s in transcript.status_log)
        print(f"\nStream {index}: {len(transcript.columns)} columns emitted")
        print(f"  Status: {statuses}")
        if transcript.interrupted:
            marker_end = stream.marker_span[1] if stream.marker_span else None
            print(f"  ⚠️  Stopped at step {transcript.stop_step} (stop phrase ended at {marker_end})")
        else:
            print("  ✓ No interruption")
    return EXIT_OK


def cmd_eval(args) -> int:
    model = load_checkpoint(args.checkpoint).model
    task = SyntheticTask(TaskKind(args.task), args.seed, args.size)
    metrics = evaluate(model, gen_task_data(task, model.layout))
    print(json.dumps(metrics, indent=2, sort_keys=True))
    return EXIT_OK


def cmd_inspect(args) -> int:
    header = read_header(args.checkpoint)
    banner(f"CHECKPOINT {args.checkpoint}")
    print(f"Stage: {header.get('stage')}")
    print(f"Lineage: {' -> '.join(header.get('lineage') or []) or '(none)'}")
    print("\nModel config:")
    print(json.dumps(header['model_config'], indent=2, sort_keys=True))
    print("\nParameter groups:")
    counts = {}
    for entry in header['manifest']:
        counts[entry['group']] = counts.get(entry['group'], 0) + entry['count']
    for group, count in sorted(counts.items()):
        print(f"  {group:<12} {count:>12,}")
    print("\nTensors:")
    for entry in header['manifest']:
        print(f"  {entry['name']:<48} {entry['group']:<12} {entry['shape']}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    seed = default_seed()
    parser = OmniArgumentParser(
        prog='omni',
        description='Multimodal streaming model toolkit',
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog='''
Examples:
  python omni.py data-gen --task asr --size 100 --out asr.jsonl
  python omni.py train --stage 1 --scale desk --out runs/ck1
  python omni.py train --stage 2 --scale desk --init runs/ck1/stage1.omck --out runs/ck2
  python omni.py eval --checkpoint runs/ck3/stage3.omck --task asr --seed 9
  python omni.py duplex --stream stop.jsonl --stub
  python omni.py inspect --checkpoint runs/ck1/stage1.omck
        '''
    )
    sub = parser.add_subparsers(dest='command', required=True, parser_class=OmniArgumentParser)
    tasks = [t.value for t in TaskKind]
    defaults = argparse.ArgumentDefaultsHelpFormatter

    p = sub.add_parser('data-gen', help='Generate a synthetic task dataset', formatter_class=defaults)
    p.add_argument('--task', required=True, choices=tasks)
    p.add_argument('--size', type=int, default=100)
    p.add_argument('--seed', type=int, default=seed)
    p.add_argument('--scale', choices=['desk', 'full'], default='desk')
    p.add_argument('--frame-rate', type=int, default=12)
    p.add_argument('--out', required=True)
    p.set_defaults(handler=cmd_data_gen)

    p = sub.add_parser('train', help='Run one training stage', formatter_class=defaults)
    p.add_argument('--stage', type=int, required=True, choices=[1, 2, 3])
    p.add_argument('--scale', choices=['desk', 'full'], default='desk')
    p.add_argument('--out', default=str(runs_dir()))
    p.add_argument('--init', default=None, help='Checkpoint of the previous stage')
    p.add_argument('--steps', type=int, default=None)
    p.add_argument('--optimizer', choices=['sgd', 'adamw'], default=None,
                   help='Defaults to adamw at desk scale, sgd at full scale')
    p.add_argument('--seed', type=int, default=seed)
    p.add_argument('--quiet', action='store_true')
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser('generate', help='Generate from a checkpoint', formatter_class=defaults)
    p.add_argument('--checkpoint', required=True)
    p.add_argument('--prefix', required=True, help='JSONL line with vision_seed/audio_frames/text/task')
    p.add_argument('--features', default=None, help='Binary feature file replacing the stub encoder')
    p.add_argument('--max-steps', type=int, default=64)
    p.add_argument('--temperature', type=float, default=0.0)
    p.add_argument('--top-k', type=int, default=None)
    p.add_argument('--seed', type=int, default=seed)
    p.add_argument('--text-only', action='store_true')
    p.add_argument('--stream', action='store_true', help='Print each column as it is emitted')
    p.set_defaults(handler=cmd_generate)

    p = sub.add_parser('duplex', help='Run duplex sessions over interrupt streams', formatter_class=defaults)
    p.add_argument('--stream', required=True)
    p.add_argument('--checkpoint', default=None)
    p.add_argument('--stub', action='store_true', help='Use the exact-match stop phrase detector')
    p.add_argument('--code-count', type=int, default=64)
    p.set_defaults(handler=cmd_duplex)

    p = sub.add_parser('eval', help='Evaluate a checkpoint on a synthetic task', formatter_class=defaults)
    p.add_argument('--checkpoint', required=True)
    p.add_argument('--task', required=True, choices=tasks)
    p.add_argument('--seed', type=int, default=seed)
    p.add_argument('--size', type=int, default=50)
    p.set_defaults(handler=cmd_eval)

    p = sub.add_parser('inspect', help='Print checkpoint config and parameter groups', formatter_class=defaults)
    p.add_argument('--checkpoint', required=True)
    p.set_defaults(handler=cmd_inspect)
    return parser


def cli_main(argv: Optional[List[str]] = None) -> int:
    """
    Run one subcommand

    Returns:
        0 on success, 1 on usage errors, 2 on runtime failures
    """
    logging.basicConfig(level=os.getenv('OMNI_LOG_LEVEL', 'INFO').upper(),
                        format='%(asctime)s %(name)s %(levelname)s %(message)s')
    torch.set_num_threads(int(os.getenv('OMNI_THREADS', '1')))
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError:
        return EXIT_USAGE
    except SystemExit as e:
        return EXIT_OK if e.code in (0, None) else EXIT_USAGE
    try:
        return args.handler(args)
    except UsageError as e:
        print(f"omni: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except KeyboardInterrupt:
        print("\n\nStopped by user.", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as e:
        print(f"\n❌ {type(e).__name__}: {e}", file=sys.stderr)
        logger.debug("Command failed", exc_info=True)
        return EXIT_RUNTIME


def main():
    sys.exit(cli_main())


if __name__ == "__main__":
    main()
