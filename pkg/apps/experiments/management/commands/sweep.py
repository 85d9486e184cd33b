from apps.experiments.pipeline import run_sweep

from ._base import ExperimentCommand


class Command(ExperimentCommand):
    help = "Data-fraction sweep: one fine-tune and evaluation per (fraction, kind, seed) cell."

    def add_arguments(self, parser):
        super().add_arguments(parser)
        self.add_from_argument(parser)
        parser.add_argument("--run", help="Run name the stored cells are grouped under (default: random).")
        parser.add_argument("--plot", action="store_true")

    def run(self, options):
        frame = run_sweep(self.experiment(options), self.towers(options), options["run"], options["plot"])
        self.stdout.write(frame.to_string(index=False))
