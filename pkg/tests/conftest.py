import pytest

from dsp.linearize import from_linear
from dsp.tree import Form, SemanticTree, intent, ref, slot

REMINDER_DECOUPLED = (
    "[IN:CREATE_REMINDER [SL:PERSON_REMINDED me ] [SL:TODO [IN:CREATE_CALL "
    "[SL:METHOD call ] [SL:CONTACT John ] ] ] ]"
)
REMINDER_UTTERANCE = ["Please", "remind", "me", "to", "call", "John"]


@pytest.fixture
def reminder_comp():
    return SemanticTree(
        intent(
            "CREATE_REMINDER",
            "Please",
            "remind",
            slot("PERSON_REMINDED", "me"),
            "to",
            slot("TODO", intent("CREATE_CALL", slot("METHOD", "call"), slot("CONTACT", "John"))),
        ),
        Form.COMPOSITIONAL,
    )


@pytest.fixture
def reminder_dec():
    return SemanticTree(
        intent(
            "CREATE_REMINDER",
            slot("PERSON_REMINDED", "me"),
            slot("TODO", intent("CREATE_CALL", slot("METHOD", "call"), slot("CONTACT", "John"))),
        )
    )


@pytest.fixture
def weather_turns():
    """Three-turn weather/traffic/events session trees."""
    a = SemanticTree(intent("GET_WEATHER", slot("LOCATION", "San", "Francisco")))
    b = SemanticTree(intent("GET_TRAFFIC", slot("LOCATION", ref("EXPLICIT", ["San", "Francisco"], ["there"]))))
    c = SemanticTree(intent("GET_EVENT", slot("LOCATION", ref("IMPLICIT", ["San", "Francisco"]))))
    return a, b, c


@pytest.fixture
def restaurant_turns():
    a = from_linear("[IN:FIND_RESTAURANT [SL:AREA south ] [SL:FOOD moroccan ] ]")
    b = from_linear("[IN:FIND_RESTAURANT [SL:AREA south ] [SL:FOOD modern european ] ]")
    return a, b


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in RESULTS:
            terminalreporter.write_line(line)
