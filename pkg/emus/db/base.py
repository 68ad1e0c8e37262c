from sqlmodel import SQLModel, Session, create_engine
from typing import Generator, Optional
import logging

logger = logging.getLogger(__name__)


def default_ledger_url() -> str:
    """``settings.database_url``, else a SQLite file in the runs directory"""
    from emus.config import settings

    return settings.database_url or f"sqlite:///{settings.runs_dir / 'ledger.sqlite'}"


class Database:
    """Run ledger: one engine, short-lived sessions"""

    def __init__(self, database_url: Optional[str] = None):
        self.database_url = database_url or default_ledger_url()
        is_sqlite = self.database_url.startswith("sqlite")
        self.engine = create_engine(
            self.database_url,
            connect_args={"check_same_thread": False} if is_sqlite else {},
            echo=False,
            pool_pre_ping=True,
        )
        logger.info(f"Run ledger at: {self.database_url}")

    def init_db(self):
        """Create the ExperimentRun and ReplicateSummary tables if missing"""
        try:
            SQLModel.metadata.create_all(self.engine)
        except Exception as e:
            logger.error(f"Could not create ledger tables at {self.database_url}: {e}")
            raise
        logger.info("Ledger tables ready")

    def session(self) -> Session:
        return Session(self.engine)

    def get_session(self) -> Generator[Session, None, None]:
        with self.session() as session:
            yield session


_db: Optional[Database] = None


def get_db() -> Database:
    """Lazily created global ledger (tables created on first use)"""
    global _db
    if _db is None:
        # register table metadata before create_all
        from emus.db import schema  # noqa: F401
        _db = Database()
        _db.init_db()
    return _db
