import logging
import math

from celery import shared_task

from apps.experiments.checkpoint import load_tower_states
from apps.experiments.config import load_config_dict

from .models import SweepCell
from .sweeps import SweepResult, SweepRow, run_cell, sweep_cells

logger = logging.getLogger(__name__)


@shared_task
def run_sweep_cell(run, config, fraction, kind, seed, tower_paths=None):
    """
    Fine-tune and evaluate one sweep cell and store it as a SweepCell row. A
    failing cell is stored as diverged.
    """
    try:
        experiment = load_config_dict(config)
        row = run_cell(experiment, fraction, kind, seed, load_tower_states(tower_paths))
    except Exception as e:
        logger.info(f"Error running sweep cell {kind} fraction={fraction} seed={seed}: {str(e)}")
        row = SweepRow(fraction, kind, False, False, seed, math.inf, math.inf, math.inf, True)
    cell = SweepCell.store(run, row)
    return str(cell.id)


def collect_sweep(run):
    return SweepResult([cell.to_row() for cell in SweepCell.objects.filter(run=run)])


def dispatch_sweep(run, experiment, fractions, kinds, seeds, tower_paths=None):
    """
    Queue every cell and wait for all of them. In eager mode the cells run
    in-process one after another.
    """
    config = experiment.to_dict()
    pending = [run_sweep_cell.delay(run, config, f, k, s, tower_paths) for f, k, s in sweep_cells(fractions, kinds, seeds)]
    logger.info(f"Dispatched {len(pending)} sweep cells for run {run}")
    for result in pending:
        result.get()
    return collect_sweep(run)
