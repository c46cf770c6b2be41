"""Run ledger model: one row per CLI workflow invocation."""

from datetime import datetime
from typing import Optional

from sqlalchemy import DateTime, Float, Integer, String, Text
from sqlalchemy.orm import Mapped, mapped_column

from app.database import Base


class RunRecord(Base):
    __tablename__ = "runs"

    id: Mapped[int] = mapped_column(Integer, primary_key=True, autoincrement=True)
    command: Mapped[str] = mapped_column(String(20), nullable=False, index=True)
    config_hash: Mapped[str] = mapped_column(String(64), nullable=False, index=True)
    seed: Mapped[int] = mapped_column(Integer, nullable=False)
    status: Mapped[str] = mapped_column(
        String(16), nullable=False, index=True
    )  # running | success | verdict_failure | error
    exit_code: Mapped[Optional[int]] = mapped_column(Integer, nullable=True)
    started_at: Mapped[datetime] = mapped_column(DateTime, nullable=False, index=True)
    finished_at: Mapped[Optional[datetime]] = mapped_column(DateTime, nullable=True)
    duration_seconds: Mapped[Optional[float]] = mapped_column(Float, nullable=True)
    output_dir: Mapped[Optional[str]] = mapped_column(Text, nullable=True)
    error_message: Mapped[Optional[str]] = mapped_column(Text, nullable=True)

    def __repr__(self) -> str:
        return f"<RunRecord {self.command} {self.status} {self.started_at}>"

    @property
    def duration_display(self) -> str:
        """Wall time as ms below one second, else seconds or m:ss."""
        if self.duration_seconds is None:
            return "running" if self.status == "running" else "-"
        elapsed = self.duration_seconds
        if elapsed < 1.0:
            return f"{elapsed * 1000:.0f}ms"
        if elapsed < 120.0:
            return f"{elapsed:.2f}s"
        m, s = divmod(int(round(elapsed)), 60)
        return f"{m}m{s:02d}s"

    @property
    def short_hash(self) -> str:
        return self.config_hash[:12]
