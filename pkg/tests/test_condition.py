import random

import pytest
from hypothesis import given, settings, strategies as st

from metacat import condition as C
from metacat.errors import BadCondition

from oracles import random_cond, ref_eval, render

ATTRS = {"n": "INT", "f": "FLOAT", "s": "STRING"}


def value_maps():
    return st.fixed_dictionaries({
        "n": st.none() | st.integers(-3, 13),
        "f": st.none() | st.floats(-2, 12, allow_nan=False),
        "s": st.none() | st.sampled_from(["alpha", "beta", "bat", "x", "", "tea", "a%b", "it's"]),
    })


@settings(max_examples=400, deadline=None)
@given(st.integers(0, 2**32), value_maps())
def test_parser_and_evaluator_agree_with_reference(seed, values):
    ast = random_cond(random.Random(seed), ATTRS, depth=3)
    parsed = C.parse(render(ast))
    C.check(parsed, ATTRS)
    assert C.evaluate(parsed, values) == ref_eval(ast, values)


@pytest.mark.parametrize("text, values, expect", [
    ("n > 3", {"n": 4}, True),
    ("n > 3", {"n": None}, False),
    ("NOT n > 3", {"n": None}, True),
    ("n > 3", {}, False),
    ("s = 'it''s'", {"s": "it's"}, True),
    ("s like 'a%'", {"s": "abc"}, True),
    ("s LIKE '%c'", {"s": "abd"}, False),
    ("s like 'a_c'", {"s": "abc"}, False),
    ("s like '%'", {"s": ""}, True),
    ("n = 3", {"n": "3"}, False),
    ("n >= 1e1", {"n": 10}, True),
    ("n > -2 and n < 2", {"n": 0}, True),
    ("n = 1 or n = 2 and n = 3", {"n": 1}, True),
    ("(n = 1 or n = 2) and n = 3", {"n": 1}, False),
    ("", {}, True),
    ("   ", {}, True),
])
def test_examples(text, values, expect):
    assert C.evaluate(C.parse(text), values) is expect


@pytest.mark.parametrize("bad", [
    "n >", "n 3", "> 3", "(n = 1", "n = 1)", "n = 'x", "n like 3", "n = 1 n = 2", "n ~ 3", "and",
])
def test_parse_errors(bad):
    with pytest.raises(BadCondition):
        C.parse(bad)


def test_check_rejects_ill_typed_terms():
    with pytest.raises(BadCondition):
        C.check(C.parse("z = 1"), ATTRS)
    with pytest.raises(BadCondition):
        C.check(C.parse("n like 'a'"), ATTRS)
    with pytest.raises(BadCondition):
        C.check(C.parse("s = 3"), ATTRS)
    C.check(C.parse("f < 2 and n != 1"), ATTRS)


def test_attributes():
    assert C.attributes(C.parse("n = 1 or not (s = 'a' and f > 0)")) == {"n", "s", "f"}
    assert C.attributes(C.TRUE) == set()
