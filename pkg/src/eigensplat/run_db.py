"""
Ledger of training runs kept next to the metrics CSV in each output directory.
"""
import datetime
import logging
import math
from pathlib import Path
from typing import Optional

import peewee


logger = logging.getLogger('eigensplat')

db = peewee.SqliteDatabase(None)


class BaseModel(peewee.Model):

    class Meta:
        database = db


class Run(BaseModel):

    name = peewee.TextField()
    feature = peewee.TextField()
    seed = peewee.IntegerField()
    h_photo = peewee.FloatField()
    k = peewee.IntegerField()
    max_iterations = peewee.IntegerField()
    target_psnr = peewee.FloatField(null=True)
    stop_reason = peewee.TextField()
    stopped_at = peewee.IntegerField()
    target_reached = peewee.BooleanField(null=True)
    final_psnr = peewee.FloatField(null=True)
    final_ssim = peewee.FloatField(null=True)
    final_count = peewee.IntegerField()
    chamfer_all = peewee.FloatField(null=True)
    chamfer_masked = peewee.FloatField(null=True)
    test_psnr = peewee.FloatField(null=True)
    created = peewee.DateTimeField(default=datetime.datetime.now)


class MetricsRow(BaseModel):

    run = peewee.ForeignKeyField(Run, backref='metrics', on_delete='CASCADE')
    iteration = peewee.IntegerField()
    total = peewee.FloatField(null=True)
    photo = peewee.FloatField(null=True)
    geo = peewee.FloatField(null=True)
    psnr = peewee.FloatField(null=True)
    ssim = peewee.FloatField(null=True)
    count = peewee.IntegerField()
    chamfer_all = peewee.FloatField(null=True)
    chamfer_masked = peewee.FloatField(null=True)


def _finite(value: Optional[float]) -> Optional[float]:
    if value is None or not math.isfinite(value):
        return None
    return float(value)


def open_ledger(path: Path):
    """
    Bind the models to the SQLite file at `path`, creating tables on first use.
    """
    if not db.is_closed():
        db.close()
    db.init(str(path), pragmas={
        'journal_mode': 'wal',
        'cache_size': -1024 * 64})
    db.connect()
    db.create_tables([Run, MetricsRow])
    logger.debug(f'Opened run ledger {path}')


def close_ledger():
    if not db.is_closed():
        db.close()


def record_run(
        path: Path,
        name: str,
        run: dict,
        metrics: list[dict]
) -> int:
    """
    Store one finished run and its metrics trace.
    :param path: ledger file
    :param name: run label, usually the output directory name
    :param run: Run field values
    :param metrics: rows keyed like the metrics CSV columns
    :return: id of the new Run row
    """
    open_ledger(path)
    try:
        with db.atomic():
            fields = {key: (_finite(value) if isinstance(value, float) else value) for key, value in run.items()}
            row = Run.create(name=name, **fields)
            rows = [
                {
                    'run': row.id,
                    'iteration': int(record['iter']),
                    'total': _finite(record['total']),
                    'photo': _finite(record['photo']),
                    'geo': _finite(record['geo']),
                    'psnr': _finite(record['psnr']),
                    'ssim': _finite(record['ssim']),
                    'count': int(record['count']),
                    'chamfer_all': _finite(record['chamfer_all']),
                    'chamfer_masked': _finite(record['chamfer_masked']),
                }
                for record in metrics
            ]
            if rows:
                MetricsRow.insert_many(rows).execute()
        logger.info(f'Recorded run {name} in {path}')
        return row.id
    finally:
        close_ledger()


def load_runs(path: Path) -> list[dict]:
    """
    Every run in the ledger as plain dicts, oldest first.
    """
    open_ledger(path)
    try:
        return list(Run.select().order_by(Run.id).dicts())
    finally:
        close_ledger()


def load_metrics(path: Path, run_id: int) -> list[dict]:
    open_ledger(path)
    try:
        query = MetricsRow.select().where(MetricsRow.run == run_id).order_by(MetricsRow.iteration)
        return list(query.dicts())
    finally:
        close_ledger()
