import argparse

from apps.experiments.pipeline import run_train
from apps.training.builders import MODEL_KINDS, SINGLE_DECODER, ZIPPER

from ._base import ExperimentCommand


class Command(ExperimentCommand):
    help = "Fine-tune a Zipper model or the single-decoder baseline on the paired ASR/TTS mixture."

    def add_arguments(self, parser):
        super().add_arguments(parser)
        self.add_from_argument(parser)
        parser.add_argument("--kind", choices=MODEL_KINDS, default=ZIPPER)
        parser.add_argument("--baseline", action="store_true", help=f"Shorthand for --kind {SINGLE_DECODER}.")
        parser.add_argument("--freeze-a", action=argparse.BooleanOptionalAction, default=None)
        parser.add_argument("--freeze-b", action=argparse.BooleanOptionalAction, default=None)
        parser.add_argument("--resume", action="store_true", help="Continue from model.ckpt in the output directory.")
        parser.add_argument("--lr-search", action="store_true", help="Pick the learning rate from the config grid first.")
        parser.add_argument("--plot", action="store_true", help="Also write the loss curve.")

    def run(self, options):
        path, trainer = run_train(
            self.experiment(options),
            kind=SINGLE_DECODER if options["baseline"] else options["kind"],
            tower_paths=self.towers(options),
            freeze_a=options["freeze_a"],
            freeze_b=options["freeze_b"],
            resume=options["resume"],
            search_lr=options["lr_search"],
            plot=options["plot"],
        )
        last = f", last loss {trainer.losses[-1]:.4f}" if trainer.losses else ""
        self.stdout.write(f"{path} at step {trainer.step}{last}")
