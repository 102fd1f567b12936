import pytest

ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def record(criterion: int, ok: bool, detail: str) -> None:
    """Remember the outcome of an acceptance criterion for the summary."""
    ACCEPTANCE[criterion] = (bool(ok), detail)


@pytest.fixture
def acceptance():
    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")


@pytest.fixture(scope="session")
def default_run():
    """Default benchmark (seed 0) and a model trained with the default config."""
    from joem.data import SceneSpec, default_split, gen_semantic_table, make_benchmark
    from joem.model import TrainConfig, train

    table = gen_semantic_table(12, 16, 0)
    split = default_split()
    train_set, test_set = make_benchmark(SceneSpec(seed=0), table, split, 200, 50)
    result = train(TrainConfig(seed=0), train_set, table, split)
    return {"table": table, "split": split, "train": train_set, "test": test_set,
            "params": result.params, "history": result.history}
