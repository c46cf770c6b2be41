import yaml
from click.testing import CliRunner

from app.config import settings
from app.database import init_db, session_factory
from app.models.run import RunRecord
from app.services.run_history import RunLedger, recent_runs
from volterrisk import EXIT_OK, cli


def _unusable_url(tmp_path):
    blocker = tmp_path / "blocker"
    blocker.write_text("not a directory", encoding="utf-8")
    return f"sqlite:///{blocker / 'nested' / 'history.db'}"


def test_ledger_records_a_run(tmp_path):
    url = f"sqlite:///{tmp_path / 'ledger.db'}"
    ledger = RunLedger(True, url)
    ledger.start("kernel", "ab" * 32, 7, str(tmp_path))
    ledger.finish(2)

    init_db(url)
    db = session_factory(url)()
    try:
        (run,) = recent_runs(db)
        assert run.status == "verdict_failure"
        assert run.exit_code == 2
        assert run.short_hash == "ab" * 6
        assert run.duration_seconds is not None
    finally:
        db.close()


def test_disabled_ledger_writes_nothing(tmp_path):
    ledger = RunLedger(False, f"sqlite:///{tmp_path / 'off.db'}")
    ledger.start("kernel", "0" * 64, 1, None)
    ledger.finish(0)
    assert not (tmp_path / "off.db").exists()


def test_unwritable_database_location_is_tolerated(tmp_path):
    ledger = RunLedger(True, _unusable_url(tmp_path))
    ledger.start("solve", "0" * 64, 1, None)
    ledger.finish(0)


def test_workflow_succeeds_without_history(tmp_path, monkeypatch):
    monkeypatch.setattr(settings, "database_url", _unusable_url(tmp_path))
    path = tmp_path / "kernel.yaml"
    path.write_text(yaml.safe_dump({
        "schema_version": 1,
        "grid": {"T": 1.0, "N": 8},
        "kernel": {"alpha_expr": "0.5"},
    }), encoding="utf-8")
    result = CliRunner().invoke(cli, ["kernel", str(path), "--out", str(tmp_path / "out")])
    assert result.exit_code == EXIT_OK, result.output
    assert (tmp_path / "out" / "kernel.csv").exists()


def test_duration_display():
    assert RunRecord(status="running").duration_display == "running"
    assert RunRecord(status="success", duration_seconds=0.25).duration_display == "250ms"
    assert RunRecord(status="success", duration_seconds=3.5).duration_display == "3.50s"
    assert RunRecord(status="success", duration_seconds=185.0).duration_display == "3m05s"
