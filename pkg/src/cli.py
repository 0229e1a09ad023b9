"""Command-line surface: one subcommand per pipeline stage"""

import argparse
import logging
import traceback
from pathlib import Path
from typing import List, Optional

from rich.console import Console
from rich.logging import RichHandler
from rich.markup import escape
from rich.progress import Progress, SpinnerColumn, TextColumn

from . import __version__
from .config import load_settings
from .errors import IssError
from .pipeline import META_STAGES, STAGES, StageRunner

console = Console(stderr=True)

STAGE_HELP = {
    'ingest': "Tokenize the corpus and task splits, build the vocabulary",
    'index': "Build the BM25 index over the ingested corpus",
    'retrieve': "Retrieve the BM25 candidate pool for the task queries",
    'warmup': "Jointly train the tiny model on the task to get the scoring snapshot",
    'score': "Score every (candidate, anchor) pair by gradient matching",
    'select': "Select the influential subset and equal-size baselines",
    'pretrain': "Pretrain on the selected subset",
    'finetune': "Finetune the pretrained model and score the test split",
    'evaluate': "Run the multi-seed comparison and write the report",
    'analyze': "Compare task-influential word frequencies across subsets",
    'pipeline': "Run every stage in order with one aggregate manifest",
    'gen-synth': "Write the planted synthetic benchmark into <out>/data",
}


def setup_logging(verbose: bool) -> None:
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format="%(message)s",
        handlers=[RichHandler(console=console, show_time=False, show_path=verbose)],
        force=True,
    )


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", "-c", type=Path, help="Run configuration (KEY=VALUE file)")
    common.add_argument("--seed", "-s", type=int, default=0, help="Root seed for every stage")
    common.add_argument("--out", "-o", type=Path, default=Path("runs/default"), help="Output directory")
    common.add_argument("--workers", "-w", type=int, default=1, help="Worker threads for retrieval and scoring")
    common.add_argument("--verbose", "-v", action="store_true", help="Verbose output")

    parser = argparse.ArgumentParser(
        prog="iss",
        description="Influential Subset Selection - pick the pretraining documents that help a downstream task",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  iss gen-synth --out runs/demo
  iss pipeline --out runs/demo --seed 1
  iss select --config iss.env --out runs/demo
        """
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    commands = parser.add_subparsers(dest="stage", metavar="STAGE", required=True)
    for stage in (*STAGES, *META_STAGES):
        commands.add_parser(stage, parents=[common], help=STAGE_HELP[stage])
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    setup_logging(args.verbose)

    try:
        settings = load_settings(args.config)
        with Progress(
            SpinnerColumn(),
            TextColumn("[progress.description]{task.description}"),
            console=console,
            transient=True,
        ) as progress:
            task = progress.add_task(f"Running {args.stage}...", total=None)
            runner = StageRunner(
                settings, args.out, seed=args.seed, workers=args.workers,
                on_stage=lambda stage: progress.update(task, description=f"Running {stage}..."),
            )
            manifest = runner.run(args.stage)

        console.print(f"[green]✓[/green] {args.stage} finished: {escape(str(runner.paths.manifest(args.stage)))}")
        if manifest.flops:
            console.print(f"  training compute: {manifest.flops:.3g} FLOPs")
        return 0

    except IssError as e:
        console.print(f"[red]Error:[/red] {escape(str(e))}")
        return e.exit_code
    except Exception as e:
        console.print(f"[red]Unexpected error:[/red] {escape(str(e))}")
        if args.verbose:
            console.print(escape(traceback.format_exc()))
        return 1
