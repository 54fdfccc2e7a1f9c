import pytest
from hypothesis import given
import hypothesis.strategies as st

from cyclewatch.errors import InvalidFilter
from cyclewatch.mqttwire import topic_matches


@pytest.mark.parametrize("flt, topic, expected", [
    ("flatform/+/energy", "flatform/cell07/energy", True),
    ("flatform/#", "flatform", True),
    ("flatform/+", "flatform/a/b", False),
    # examples from the MQTT 3.1.1 wildcard section
    ("sport/tennis/player1/#", "sport/tennis/player1", True),
    ("sport/tennis/player1/#", "sport/tennis/player1/ranking", True),
    ("sport/tennis/player1/#", "sport/tennis/player1/score/wimbledon", True),
    ("sport/#", "sport", True),
    ("#", "anything/at/all", True),
    ("sport/tennis/+", "sport/tennis/player1", True),
    ("sport/tennis/+", "sport/tennis/player1/ranking", False),
    ("sport/+", "sport", False),
    ("sport/+", "sport/", True),
    ("+/+", "/finance", True),
    ("/+", "/finance", True),
    ("+", "/finance", False),
    ("a/b", "a/b", True),
    ("a/b", "a/c", False),
])
def test_topic_matches(flt, topic, expected):
    assert topic_matches(flt, topic) is expected


@pytest.mark.parametrize("flt", ["sport/tennis#", "sport/#/ranking", "sport+", "a/b+/c", ""])
def test_invalid_filters(flt):
    with pytest.raises(InvalidFilter):
        topic_matches(flt, "sport")


level = st.text(alphabet="abc", min_size=0, max_size=3)


@given(st.lists(level, min_size=1, max_size=5))
def test_exact_topic_matches_itself_and_hash(levels):
    topic = "/".join(levels)
    assert topic_matches(topic, topic) if topic else True
    assert topic_matches("#", topic)


@given(st.lists(level, min_size=1, max_size=5), st.integers(0, 4))
def test_plus_replaces_any_single_level(levels, i):
    i %= len(levels)
    flt = "/".join("+" if j == i else lv for j, lv in enumerate(levels))
    assert topic_matches(flt, "/".join(levels))
