import math
import uuid

from django.db import models
from django.utils import timezone

from .sweeps import SweepRow


def _finite_or_none(value):
    return value if math.isfinite(value) else None


def _or_inf(value):
    return math.inf if value is None else value


class SweepCell(models.Model):

    id = models.UUIDField(primary_key=True, default=uuid.uuid4, editable=False)
    run = models.CharField(max_length=64)

    fraction = models.FloatField()
    kind = models.CharField(max_length=32)
    freeze_a = models.BooleanField(default=False)
    freeze_b = models.BooleanField(default=False)
    seed = models.PositiveIntegerField()

    # null when the cell diverged
    clean_wer = models.FloatField(blank=True, null=True)
    other_wer = models.FloatField(blank=True, null=True)
    tts_wer = models.FloatField(blank=True, null=True)
    diverged = models.BooleanField(default=False)

    created_at = models.DateTimeField(default=timezone.now)

    class Meta:
        ordering = ("fraction", "kind", "seed")
        constraints = [
            models.UniqueConstraint(fields=["run", "fraction", "kind", "seed"], name="unique_sweep_cell"),
        ]

    def __str__(self):
        return f"{self.run}: {self.kind} fraction={self.fraction} seed={self.seed}"

    @classmethod
    def store(cls, run, row):
        cell, _ = cls.objects.update_or_create(
            run=run,
            fraction=row.fraction,
            kind=row.kind,
            seed=row.seed,
            defaults={
                "freeze_a": row.freeze_a,
                "freeze_b": row.freeze_b,
                "clean_wer": _finite_or_none(row.clean_wer),
                "other_wer": _finite_or_none(row.other_wer),
                "tts_wer": _finite_or_none(row.tts_wer),
                "diverged": row.diverged,
            },
        )
        return cell

    def to_row(self):
        return SweepRow(
            fraction=self.fraction,
            kind=self.kind,
            freeze_a=self.freeze_a,
            freeze_b=self.freeze_b,
            seed=self.seed,
            clean_wer=_or_inf(self.clean_wer),
            other_wer=_or_inf(self.other_wer),
            tts_wer=_or_inf(self.tts_wer),
            diverged=self.diverged,
        )
