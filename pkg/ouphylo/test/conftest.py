import logging

import pytest

from ..core.newick import parse_newick
from ..core.symmetric_tree import SymmetricTreeSpec, build_symmetric_tree
from ..core.tool_functions import LOGGER


@pytest.fixture(autouse=True)
def package_logger():
    """The CLI replaces the handlers of the package logger; put them back."""
    handlers, level, propagate = list(LOGGER.handlers), LOGGER.level, LOGGER.propagate
    yield LOGGER
    LOGGER.handlers = handlers
    LOGGER.setLevel(level)
    LOGGER.propagate = propagate


@pytest.fixture
def cherry():
    return parse_newick("(A:1,B:1);")


@pytest.fixture
def three_tip_tree():
    return parse_newick("((A:1,B:1):1,C:2);")


@pytest.fixture
def four_tip_spec():
    return SymmetricTreeSpec((2, 2), (2.0, 1.0))


@pytest.fixture
def four_tip_tree(four_tip_spec):
    return build_symmetric_tree(four_tip_spec)


@pytest.fixture
def warnings_logged(caplog):
    caplog.set_level(logging.WARNING, logger=LOGGER.name)
    return caplog
