"""SQLite storage for the run registry.

Each run directory holds one ``runs.db``; a registry is opened by path and
its schema is created on first use.
"""

from __future__ import annotations

import logging
from pathlib import Path

from sqlalchemy import Engine, create_engine, event
from sqlalchemy.orm import DeclarativeBase, sessionmaker

logger = logging.getLogger(__name__)


class Base(DeclarativeBase):
    pass


def _enable_foreign_keys(dbapi_connection, _record) -> None:
    cursor = dbapi_connection.cursor()
    cursor.execute("PRAGMA foreign_keys=ON")
    cursor.close()


def registry_engine(path: str | Path | None = None) -> Engine:
    """Engine for the registry at ``path``; ``None`` gives a private in-memory one."""
    if path is None:
        url = "sqlite://"
    else:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        url = f"sqlite:///{path}"
    engine = create_engine(url, echo=False)
    event.listen(engine, "connect", _enable_foreign_keys)
    Base.metadata.create_all(engine)
    logger.debug("registry opened at %s", url)
    return engine


def open_registry(path: str | Path | None = None) -> sessionmaker:
    return sessionmaker(bind=registry_engine(path), autoflush=True, expire_on_commit=False)
