"""SQLAlchemy engine, session, and base model configuration for the run ledger."""

from pathlib import Path
from typing import Dict, Optional

from sqlalchemy import create_engine, event
from sqlalchemy.engine import Engine
from sqlalchemy.orm import DeclarativeBase, sessionmaker

from app.config import settings


_engines: Dict[str, Engine] = {}


def _set_sqlite_pragmas(dbapi_connection, connection_record):
    """Enable WAL mode, foreign keys, and busy timeout for SQLite."""
    cursor = dbapi_connection.cursor()
    cursor.execute("PRAGMA journal_mode=WAL")
    cursor.execute("PRAGMA foreign_keys=ON")
    cursor.execute("PRAGMA busy_timeout=5000")
    cursor.close()


def get_engine(url: Optional[str] = None) -> Engine:
    """One engine per URL, created on first use."""
    url = url or settings.database_url
    if url not in _engines:
        if url.startswith("sqlite:///"):
            Path(url[len("sqlite:///"):]).parent.mkdir(parents=True, exist_ok=True)
        engine = create_engine(url, connect_args={"check_same_thread": False}, echo=settings.debug)
        if url.startswith("sqlite"):
            event.listen(engine, "connect", _set_sqlite_pragmas)
        _engines[url] = engine
    return _engines[url]


def session_factory(url: Optional[str] = None) -> sessionmaker:
    return sessionmaker(bind=get_engine(url), autocommit=False, autoflush=False)


def init_db(url: Optional[str] = None) -> Engine:
    import app.models  # noqa: F401 (registers models with Base.metadata)

    engine = get_engine(url)
    Base.metadata.create_all(bind=engine)
    return engine


class Base(DeclarativeBase):
    pass
