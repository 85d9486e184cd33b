from pathlib import Path

from apps.experiments.pipeline import MODEL_FILE, run_eval

from ._base import ExperimentCommand


class Command(ExperimentCommand):
    help = "Word error rates of a checkpoint, the gold-token oracle, or a Wilcoxon comparison of two checkpoints."

    def add_arguments(self, parser):
        super().add_arguments(parser)
        parser.add_argument("--checkpoint", help="Model checkpoint (default: model.ckpt in the output directory).")
        parser.add_argument("--oracle", action="store_true", help="Score the TTS pipeline on gold speech tokens.")
        parser.add_argument("--compare", metavar="CHECKPOINT", help="Second checkpoint for the signed-rank test.")
        parser.add_argument("--plot", action="store_true")

    def run(self, options):
        experiment = self.experiment(options)
        checkpoint = options["checkpoint"]
        if checkpoint is None and (not options["oracle"] or options["compare"]):
            checkpoint = Path(experiment.output_dir) / MODEL_FILE
        frame = run_eval(experiment, checkpoint, options["oracle"], options["compare"], options["plot"])
        for row in frame.itertuples(index=False):
            self.stdout.write(f"{row.model} {row.task} {row.split}: WER {row.wer:.4f} over {row.sentences} sentences")
