# Generated by Django 4.2.16 on 2026-10-16 10:12

from django.db import migrations, models
import django.utils.timezone
import uuid


class Migration(migrations.Migration):

    initial = True

    dependencies = [
    ]

    operations = [
        migrations.CreateModel(
            name='SweepCell',
            fields=[
                ('id', models.UUIDField(default=uuid.uuid4, editable=False, primary_key=True, serialize=False)),
                ('run', models.CharField(max_length=64)),
                ('fraction', models.FloatField()),
                ('kind', models.CharField(max_length=32)),
                ('freeze_a', models.BooleanField(default=False)),
                ('freeze_b', models.BooleanField(default=False)),
                ('seed', models.PositiveIntegerField()),
                ('clean_wer', models.FloatField(blank=True, null=True)),
                ('other_wer', models.FloatField(blank=True, null=True)),
                ('tts_wer', models.FloatField(blank=True, null=True)),
                ('diverged', models.BooleanField(default=False)),
                ('created_at', models.DateTimeField(default=django.utils.timezone.now)),
            ],
            options={
                'ordering': ('fraction', 'kind', 'seed'),
            },
        ),
        migrations.AddConstraint(
            model_name='sweepcell',
            constraint=models.UniqueConstraint(fields=('run', 'fraction', 'kind', 'seed'), name='unique_sweep_cell'),
        ),
    ]
