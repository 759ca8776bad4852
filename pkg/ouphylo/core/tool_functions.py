import logging
import os
import re
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import TYPE_CHECKING, Callable, Iterable, List, Mapping, Sequence, TypeVar, Union

import numpy as np
import pandas as pd
from scipy import linalg

from ..utils.exceptions import InputError, MissingTipError, SingularModelError

if TYPE_CHECKING:
    from .tree_objects import Tree

PACKAGE_NAME = "ouphylo"
WORKERS_ENV = "OUPHYLO_WORKERS"
CSV_FLOAT_FORMAT = "%.17g"

LOGGER = logging.getLogger(PACKAGE_NAME)

TipData = Union[np.ndarray, pd.Series, pd.DataFrame, Mapping[str, float], Sequence[float]]

T = TypeVar("T")
R = TypeVar("R")


def log_warning(message: str, details: str = "") -> None:
    LOGGER.warning(message, extra={"details": details})


def tip_values(tree: "Tree", data: TipData) -> np.ndarray:
    """Returns data as an array ordered like tree.tip_labels.

    Arrays and plain sequences are taken to be in tip order already;
    labelled containers are reordered and must hold a value for every tip."""
    labels = tree.tip_labels
    if isinstance(data, pd.DataFrame):
        missing = [label for label in labels if label not in data.columns]
        if missing:
            raise MissingTipError(missing[0])
        return data.loc[:, list(labels)].to_numpy(dtype=float)
    if not isinstance(data, (Mapping, pd.Series)):
        values = np.asarray(data, dtype=float)
        if values.shape[-1] != len(labels):
            raise InputError(
                f"Expected {len(labels)} tip values per row, got shape {values.shape}"
            )
        return values
    values = []
    for label in labels:
        try:
            values.append(float(data[label]))
        except KeyError:
            raise MissingTipError(label) from None
    return np.array(values)


def cholesky_factor(matrix: np.ndarray, what: str = "covariance matrix") -> np.ndarray:
    """Lower Cholesky factor; failure names the offending leading minor."""
    try:
        return linalg.cholesky(matrix, lower=True, check_finite=True)
    except linalg.LinAlgError as error:
        found = re.search(r"(\d+)", str(error))
        minor = int(found.group(1)) if found else None
        raise SingularModelError(f"The {what} is not positive definite", minor) from error
    except ValueError as error:
        raise SingularModelError(f"The {what} contains non-finite entries") from error


def worker_count() -> int:
    value = os.environ.get(WORKERS_ENV, "1")
    try:
        return max(1, int(value))
    except ValueError:
        log_warning(f"Ignoring {WORKERS_ENV}={value!r}", details="expected an integer")
        return 1


def ordered_map(func: Callable[[T], R], tasks: Iterable[T], workers: int = 1) -> List[R]:
    """Maps func over tasks, returning results in task order for any worker count."""
    tasks = list(tasks)
    if workers <= 1 or len(tasks) <= 1:
        return [func(task) for task in tasks]
    with ThreadPoolExecutor(max_workers=workers) as executor:
        return list(executor.map(func, tasks))


def write_frame(frame: pd.DataFrame, path: Union[str, Path]) -> Path:
    """Writes a table as CSV with full float precision."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False, float_format=CSV_FLOAT_FORMAT, lineterminator="\n")
    LOGGER.debug("Wrote %d rows to %s", len(frame), path)
    return path


def square_frame(matrix: np.ndarray, labels: Iterable[str]) -> pd.DataFrame:
    """Square matrix as a frame whose header row holds the tip labels."""
    labels = list(labels)
    return pd.DataFrame(matrix, columns=labels)
