"""Goal inference for a communicating principal-assistant team.

The team is modelled as one group agent that picks a goal, plans jointly,
and (through the principal) states an instruction. Inverting that model
gives a posterior over goals from an instruction and the observed actions.
"""

from __future__ import annotations

from importlib import resources
from pathlib import Path

__version__ = "0.1.0"


def data_path(*parts: str) -> Path:
    """Path to a bundled data file, e.g. ``data_path("maps", "fig1.map")``."""
    return Path(str(resources.files("teamgoals").joinpath("data", *parts)))
