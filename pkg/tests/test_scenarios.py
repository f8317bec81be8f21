from pathlib import Path

import pytest

from metacat.scenario import AssertionFailed, Scenario, ScenarioMalformed, run_scenario

SCENARIOS = sorted((Path(__file__).parent.parent / "scenarios").glob("*.scn"))


@pytest.mark.parametrize("path", SCENARIOS, ids=lambda p: p.stem)
@pytest.mark.parametrize("seed", [1, 17])
def test_scenario_passes(path, seed):
    result = run_scenario(Scenario.load(path), seed)
    assert result.checks, "a scenario without checks proves nothing"
    assert result.passed, "\n".join(f"line {c.lineno}: {c.text}\n{c.detail}" for c in result.failures)


def test_empty_script():
    result = run_scenario("", 0)
    assert result.trace == [] and result.checks == [] and result.passed


def test_comments_and_quotes():
    text = 'NODE M  # a node\nCLIENT M CREATEDIR /a s:STRING\nCHECK ok M ADDENTRY /a/x "has # inside"\n'
    result = run_scenario(text, 0)
    assert result.passed and len(result.checks) == 1


@pytest.mark.parametrize("text", [
    "FLY M", "NODE M\nNODE M", "CLIENT X PING", "NODE M\nCHECK levitating M",
    "NODE M\nADVANCE soon", "SET warp 9", "NODE M\nNODE S\nSUBSCRIBE S s1 M",
    "NODE M\nMAP /a M SIDEWAYS", "NODE M\nCHECK rows M x FIND /",
])
def test_malformed(text):
    with pytest.raises(ScenarioMalformed):
        Scenario.parse(text)


def test_failed_check_carries_a_diff():
    text = """
NODE M
NODE S
SUBSCRIBE S s1 M /a
CLIENT M CREATEDIR /a n:INT
CLIENT M ADDENTRY /a/x 1
CHECK same M S FIND /a
CHECK err M 404 GETATTR /a/x
"""
    result = run_scenario(text, 0)
    assert [c.ok for c in result.checks] == [False, False]
    assert "x" in result.failures[0].detail
    with pytest.raises(AssertionFailed):
        run_scenario(text, 0, raise_on_failure=True)


def test_trace_is_deterministic():
    text = (SCENARIOS[0].parent / "partition.scn").read_text()
    assert run_scenario(text, 7).trace_text() == run_scenario(text, 7).trace_text()


def test_overlapping_map_lines_rejected():
    with pytest.raises(ScenarioMalformed, match="overlapping"):
        Scenario.parse("NODE A\nNODE B\nMAP /a A PHYSICAL\nMAP /a/b B VIRTUAL")
