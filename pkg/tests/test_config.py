from pathlib import Path

import pytest

from metaevo.config import ConfigError, GuardConfig


@pytest.mark.config
def test_defaults() -> None:
    config = GuardConfig()
    assert config.max_processes == 350
    assert config.overflow_kill_fraction == 0.75
    assert config.clone_check_probability == pytest.approx(1 / 59)
    assert config.corpse_age_limit == 30.0
    assert config.process_age_limit == 100.0
    assert config.keep_last_process


@pytest.mark.config
def test_from_text() -> None:
    config = GuardConfig.from_text(
        """
        # guard settings
        max_processes = 20
        clone_check_probability = 1/2   # a fraction
        keep_last_process = no
        quantum = 500
        """
    )
    assert config.max_processes == 20
    assert config.clone_check_probability == 0.5
    assert not config.keep_last_process
    assert config.quantum == 500
    assert config.instruction_budget == GuardConfig().instruction_budget


@pytest.mark.config
@pytest.mark.parametrize(
    "text, line",
    [
        ("max_processes", 1),
        ("\nunknown = 3", 2),
        ("max_processes = lots", 1),
        ("max_processes = 2.5", 1),
        ("keep_last_process = maybe", 1),
        ("clone_check_probability = 1/0", 1),
        ("max_processes = 4\nquantum = -1", 2),
        ("# header\n\noverflow_kill_fraction = 1.5", 3),
        ("ms_per_tick = 0", 1),
    ],
)
def test_from_text_errors(text: str, line: int) -> None:
    with pytest.raises(ConfigError) as info:
        GuardConfig.from_text(text)
    assert f"line {line}" in str(info.value)


@pytest.mark.config
def test_invariants() -> None:
    with pytest.raises(ConfigError):
        GuardConfig(overflow_kill_fraction=1.5)
    with pytest.raises(ConfigError):
        GuardConfig(max_processes=0)
    with pytest.raises(ConfigError):
        GuardConfig.from_text("quantum = -1")


@pytest.mark.config
def test_text_round_trip(tmp_path: Path) -> None:
    config = GuardConfig(max_processes=12, clone_check_probability=1 / 7, keep_last_process=False)
    path = tmp_path / "guards.cfg"
    path.write_text(config.to_text())
    assert GuardConfig.from_file(path) == config
    assert config.with_overrides(quantum=9).quantum == 9


@pytest.mark.config
def test_missing_file(tmp_path: Path) -> None:
    with pytest.raises(ConfigError):
        GuardConfig.from_file(tmp_path / "nope.cfg")
