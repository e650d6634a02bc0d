from sqlalchemy import select

from registry.database import open_registry, registry_engine
from registry.models import CheckpointRecord, Run, RunStatus
from registry.runs import (
    finish_run,
    get_run,
    latest_checkpoint,
    record_checkpoint,
    record_progress,
    register_run,
)


def _session():
    return open_registry()()


def test_register_record_and_finish_a_run():
    with _session() as session:
        run = register_run(session, "abc123def456", "model: {}\n", "tiny", seed=0, total_steps=20)
        assert run.status == RunStatus.RUNNING
        assert run.last_step == 0

        record_progress(session, run, 10, 0.75)
        record_checkpoint(session, run, 10, "runs/x/step_00000010.mpdt", 0.75)
        record_checkpoint(session, run, 20, "runs/x/step_00000020.mpdt", 0.5)
        finish_run(session, run)

        stored = get_run(session, "abc123def456")
        assert stored.status == RunStatus.COMPLETED
        assert stored.last_step == 10
        assert stored.last_loss == 0.75
        assert [c.step for c in stored.checkpoints] == [10, 20]
        assert latest_checkpoint(session, "abc123def456").path.endswith("step_00000020.mpdt")


def test_failed_run_keeps_its_error_and_reopens_on_resume():
    with _session() as session:
        run = register_run(session, "feedfacecafe", "", "tiny", seed=1, total_steps=5)
        finish_run(session, run, error="mpdit: error[non_finite]: non-finite values produced by mul at step 3")
        assert get_run(session, "feedfacecafe").status == RunStatus.FAILED

        again = register_run(session, "feedfacecafe", "", "tiny", seed=1, total_steps=5)
        assert again.id == run.id
        assert again.status == RunStatus.RUNNING
        assert again.error is None
        assert len(session.execute(select(Run)).scalars().all()) == 1


def test_latest_checkpoint_of_unknown_or_empty_run_is_none():
    with _session() as session:
        assert latest_checkpoint(session, "000000000000") is None
        register_run(session, "111111111111", "", "tiny", seed=0, total_steps=1)
        assert latest_checkpoint(session, "111111111111") is None
        assert session.execute(select(CheckpointRecord)).scalars().all() == []


def test_file_backed_registry_persists_between_sessions(tmp_path):
    factory = open_registry(tmp_path / "nested" / "runs.db")
    with factory() as session:
        register_run(session, "0123456789ab", "", "gradcheck", seed=0, total_steps=3)
    with factory() as session:
        assert get_run(session, "0123456789ab").model_name == "gradcheck"
    assert (tmp_path / "nested" / "runs.db").exists()


def test_foreign_keys_are_enforced():
    engine = registry_engine()
    with engine.connect() as conn:
        assert conn.exec_driver_sql("PRAGMA foreign_keys").scalar() == 1
