"""SQLAlchemy ORM models."""

from app.models.run import RunRecord

__all__ = [
    "RunRecord",
]
