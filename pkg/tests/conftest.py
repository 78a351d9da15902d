import pytest

from dvschain.gridcase import apply_grouping, load_case, load_grouping
from dvschain.ledger import load_network_config
from dvschain.scenario import DATA_DIR, cmd_init, cmd_simulate, load_scenario


@pytest.fixture(scope="session")
def case30():
    return load_case(DATA_DIR / "case30.json")


@pytest.fixture(scope="session")
def groups30(case30):
    return {g.id: g for g in apply_grouping(case30, load_grouping(DATA_DIR / "grouping30.json"))}


@pytest.fixture(scope="session")
def network_configs():
    return {n: load_network_config(DATA_DIR / f"{n}.json") for n in ("noshard", "shard2", "shard3")}


def run_scenario(name, **overrides):
    world = cmd_init(load_scenario(f"{name}.json", **overrides))
    return world, cmd_simulate(world)


@pytest.fixture(scope="session")
def local_run():
    return run_scenario("local")


@pytest.fixture(scope="session")
def escalation_run():
    return run_scenario("escalation")


@pytest.fixture(scope="session")
def base_run():
    return run_scenario("base")


# acceptance outcomes, filled by test_acceptance and echoed at the end of the run
ACCEPTANCE: dict[int, str] = {}


def record_acceptance(number: int, title: str, ok: bool, detail: str) -> None:
    line = f"AC-{number:02d} {'PASS' if ok else 'FAIL'}  {title}: {detail}"
    ACCEPTANCE[number] = line
    print(line)
    assert ok, line


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for number in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[number])
