from django.core.management.base import BaseCommand, CommandError

from apps.experiments.pipeline import describe_generation, run_generate
from apps.inference.generation import GREEDY, TEMPERATURE, DecodePlan

from ._base import HANDLED_ERRORS


class Command(BaseCommand):
    help = "Continue a text or speech prompt with one generated segment per planned modality."

    def add_arguments(self, parser):
        parser.add_argument("checkpoint")
        parser.add_argument("prompt", help="Prompt sentence; encoded as speech with --prompt-modality speech.")
        parser.add_argument("--prompt-modality", choices=("text", "speech"), default="speech")
        parser.add_argument("--plan", default="text", help='Comma separated modalities, e.g. "text" or "text,speech".')
        parser.add_argument("--max-tokens", type=int, default=128)
        parser.add_argument("--sampling", choices=(GREEDY, TEMPERATURE), default=GREEDY)
        parser.add_argument("--temperature", type=float, default=1.0)
        parser.add_argument("--seed", type=int, default=0, help="Sampling seed.")

    def handle(self, *args, **options):
        try:
            plan = DecodePlan.parse(
                options["plan"],
                max_tokens=options["max_tokens"],
                sampling=options["sampling"],
                temperature=options["temperature"],
                seed=options["seed"],
            )
            modality = "A" if options["prompt_modality"] == "text" else "B"
            result, codebook = run_generate(options["checkpoint"], options["prompt"], modality, plan)
        except HANDLED_ERRORS as e:
            raise CommandError(str(e)) from e
        for line in describe_generation(result, codebook):
            self.stdout.write(line)
