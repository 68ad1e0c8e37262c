from emus.db.base import Database, get_db
from emus.db.schema import ExperimentRun, ReplicateSummary
from emus.db import crud

__all__ = [
    "Database",
    "get_db",
    "ExperimentRun",
    "ReplicateSummary",
    "crud",
]
