"""Open and close run ledger records around CLI workflows."""

import logging
from datetime import datetime, timezone
from typing import List, Optional

from sqlalchemy.exc import SQLAlchemyError
from sqlalchemy.orm import Session as DBSession

from app.models.run import RunRecord

logger = logging.getLogger("volterrisk")

STATUS_BY_EXIT = {0: "success", 2: "verdict_failure"}


def start_run(db: DBSession, command: str, config_hash: str, seed: int, output_dir: Optional[str]) -> RunRecord:
    run = RunRecord(
        command=command,
        config_hash=config_hash,
        seed=seed,
        status="running",
        started_at=datetime.now(timezone.utc),
        output_dir=output_dir,
    )
    db.add(run)
    db.commit()
    db.refresh(run)
    return run


def finish_run(db: DBSession, run: RunRecord, exit_code: int, error_message: Optional[str] = None) -> RunRecord:
    run.finished_at = datetime.now(timezone.utc)
    started = run.started_at
    if started is not None:
        if started.tzinfo is None:
            started = started.replace(tzinfo=timezone.utc)
        run.duration_seconds = (run.finished_at - started).total_seconds()
    run.exit_code = exit_code
    run.status = STATUS_BY_EXIT.get(exit_code, "error")
    run.error_message = error_message
    db.commit()
    return run


def recent_runs(db: DBSession, limit: int = 20, command: Optional[str] = None) -> List[RunRecord]:
    query = db.query(RunRecord)
    if command:
        query = query.filter(RunRecord.command == command)
    return query.order_by(RunRecord.started_at.desc(), RunRecord.id.desc()).limit(limit).all()


class RunLedger:
    """Best-effort recorder: database failures are logged, never raised."""

    def __init__(self, enabled: bool, url: Optional[str] = None):
        self.enabled = enabled
        self.url = url
        self._db: Optional[DBSession] = None
        self._run: Optional[RunRecord] = None

    def start(self, command: str, config_hash: str, seed: int, output_dir: Optional[str]) -> None:
        if not self.enabled:
            return
        from app.database import init_db, session_factory

        try:
            init_db(self.url)
            self._db = session_factory(self.url)()
            self._run = start_run(self._db, command, config_hash, seed, output_dir)
        except (SQLAlchemyError, OSError) as e:
            logger.warning(f"Run history disabled for this run: {e}")
            self.close()

    def finish(self, exit_code: int, error_message: Optional[str] = None) -> None:
        if self._db is None or self._run is None:
            return
        try:
            finish_run(self._db, self._run, exit_code, error_message)
        except (SQLAlchemyError, OSError) as e:
            logger.warning(f"Could not record run result: {e}")
        finally:
            self.close()

    def close(self) -> None:
        if self._db is not None:
            self._db.close()
        self._db = None
