from apps.experiments.pipeline import run_pretrain

from ._base import ExperimentCommand


class Command(ExperimentCommand):
    help = "Pre-train the speech tower (and optionally the text tower) on unpaired data."

    def run(self, options):
        for modality, path in run_pretrain(self.experiment(options)).items():
            self.stdout.write(f"tower {modality.value}: {path}")
