import logging

from django.core.management.base import BaseCommand, CommandError

from apps.experiments.checkpoint import tower_paths
from apps.experiments.config import load_config
from apps.training.trainer import LrSearchError

logger = logging.getLogger(__name__)

# ConfigError, CheckpointError, EvaluationError, SequenceError and ShapeError
# are ValueErrors; TrainingDivergedError is a FloatingPointError
HANDLED_ERRORS = (ValueError, FloatingPointError, LrSearchError, OSError)


class ExperimentCommand(BaseCommand):
    """Shared ``--config/--seed/--out`` handling; subclasses implement ``run``."""

    def add_arguments(self, parser):
        parser.add_argument("--config", help="Experiment config (JSON). Defaults apply when omitted.")
        parser.add_argument("--seed", type=int, help="Override the top-level seed.")
        parser.add_argument("--out", help="Override the output directory.")

    def add_from_argument(self, parser):
        parser.add_argument(
            "--from", dest="towers", nargs="+", metavar="CHECKPOINT",
            help="Pre-trained tower checkpoints; each one names its tower.",
        )

    def experiment(self, options):
        experiment = load_config(options.get("config"))
        if options.get("seed") is not None:
            experiment = experiment.with_seed(options["seed"])
        if options.get("out"):
            experiment = experiment.with_output_dir(options["out"])
        return experiment

    def towers(self, options):
        return tower_paths(options.get("towers"))

    def handle(self, *args, **options):
        try:
            self.run(options)
        except HANDLED_ERRORS as e:
            logger.info(f"{self.__module__.rsplit('.', 1)[-1]} failed: {str(e)}")
            raise CommandError(str(e)) from e

    def run(self, options):
        raise NotImplementedError
