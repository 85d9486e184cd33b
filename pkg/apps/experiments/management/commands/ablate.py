from apps.evalkit.sweeps import ABLATIONS
from apps.experiments.pipeline import run_ablate

from ._base import ExperimentCommand


class Command(ExperimentCommand):
    help = "Input-projection and cross-layer-count ablations of the Zipper model."

    def add_arguments(self, parser):
        parser.add_argument("ablation", choices=ABLATIONS)
        super().add_arguments(parser)
        self.add_from_argument(parser)

    def run(self, options):
        frame = run_ablate(self.experiment(options), options["ablation"], self.towers(options))
        self.stdout.write(frame.to_string(index=False))
