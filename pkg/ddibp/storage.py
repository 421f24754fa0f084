"""
SQLite run registry.
Keeps one row per CLI run: subcommand, config hash, seed, status, output directory and summary.
"""

import json
import logging
import uuid
from datetime import datetime
from pathlib import Path
from typing import Any, Dict, List, Optional

from sqlalchemy import Column, DateTime, Integer, String, Text, create_engine
from sqlalchemy.orm import Session, declarative_base, sessionmaker


logger = logging.getLogger(__name__)

Base = declarative_base()


class RunRecord(Base):
    """Database model for run history."""

    __tablename__ = "run_history"

    id = Column(String, primary_key=True, index=True)
    subcommand = Column(String, nullable=False)
    config_hash = Column(String, nullable=False, index=True)
    seed = Column(Integer, nullable=False)
    status = Column(String, default="running")
    output_dir = Column(Text, nullable=False)
    summary = Column(Text, default="{}")
    started = Column(DateTime, default=datetime.utcnow)
    finished = Column(DateTime, nullable=True)

    def to_dict(self) -> Dict[str, Any]:
        """Convert record to dictionary."""
        return {
            "id": self.id,
            "subcommand": self.subcommand,
            "config_hash": self.config_hash,
            "seed": self.seed,
            "status": self.status,
            "output_dir": self.output_dir,
            "summary": json.loads(self.summary or "{}"),
            "started": self.started,
            "finished": self.finished,
        }


class RunStorage:
    """Run history storage using SQLAlchemy."""

    def __init__(self, database_url: str = "sqlite:///./db/runs.db"):
        """
        Initialize storage.

        Args:
            database_url: SQLAlchemy database URL
        """
        self.database_url = database_url

        if database_url.startswith("sqlite:///"):
            db_path = database_url.replace("sqlite:///", "")
            if db_path and db_path != ":memory:":
                Path(db_path).parent.mkdir(parents=True, exist_ok=True)

        self.engine = create_engine(
            database_url,
            connect_args={"check_same_thread": False} if "sqlite" in database_url else {}
        )
        self.SessionLocal = sessionmaker(autocommit=False, autoflush=False, bind=self.engine)

        Base.metadata.create_all(bind=self.engine)
        logger.info(f"Initialized RunStorage with database: {database_url}")

    def get_session(self) -> Session:
        return self.SessionLocal()

    def start_run(self, subcommand: str, config_hash: str, seed: int, output_dir: Path) -> str:
        """
        Register a run as started.

        Returns:
            New run id
        """
        run_id = uuid.uuid4().hex
        session = self.get_session()
        try:
            session.add(RunRecord(
                id=run_id,
                subcommand=subcommand,
                config_hash=config_hash,
                seed=seed,
                status="running",
                output_dir=str(output_dir),
                started=datetime.utcnow(),
            ))
            session.commit()
            logger.info(f"Registered run {run_id} ({subcommand})")
            return run_id
        except Exception as e:
            session.rollback()
            logger.error(f"Error registering run: {e}")
            raise
        finally:
            session.close()

    def finish_run(self, run_id: str, status: str, summary: Optional[Dict[str, Any]] = None) -> None:
        """Record the final status and a JSON summary of a run."""
        session = self.get_session()
        try:
            record = session.get(RunRecord, run_id)
            if record is None:
                logger.warning(f"Run record not found with ID: {run_id}")
                return
            record.status = status
            record.summary = json.dumps(summary or {}, default=str, sort_keys=True)
            record.finished = datetime.utcnow()
            session.commit()
        except Exception as e:
            session.rollback()
            logger.error(f"Error updating run record: {e}")
            raise
        finally:
            session.close()

    def get_run(self, run_id: str) -> Optional[RunRecord]:
        session = self.get_session()
        try:
            return session.get(RunRecord, run_id)
        finally:
            session.close()

    def find_by_hash(self, config_hash: str) -> List[RunRecord]:
        """All runs sharing a configuration, oldest first."""
        session = self.get_session()
        try:
            return (session.query(RunRecord)
                    .filter(RunRecord.config_hash == config_hash)
                    .order_by(RunRecord.started)
                    .all())
        finally:
            session.close()

    def count_records(self) -> int:
        session = self.get_session()
        try:
            return session.query(RunRecord).count()
        finally:
            session.close()
