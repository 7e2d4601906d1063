"""
Stage Router - Routes subcommands to pipeline stages
Handles dispatch, error categorisation and response formatting
"""

import logging
import re
from typing import Any, Callable, Dict, List

from core.errors import VerifScopeError
from core.pipeline import PIPELINE_ORDER, STAGE_DIRS, Pipeline

STAGE_DESCRIPTIONS = {
    "gen-data": "Generate the synthetic CountDown corpus",
    "train": "Train the toy model on the corpus",
    "capture": "Generate on held-out prompts and store activation traces",
    "probe": "Train one linear probe per layer",
    "lens": "LogitLens distributions at t_valid or t_invalid",
    "glu-select": "Select GLU_Valid and GLU_Invalid vectors",
    "heads": "Detect previous-token heads",
    "score-heads": "Rank heads with weights-only scores",
    "search-subset": "Search the smallest head subset that disables verification",
    "intervene": "Run the intervention plans and random baselines",
    "steer": "Steer markers with the probe directions",
    "transfer": "Transfer the probe to a rotated twin model",
    "report": "Collect stage summaries into one report",
    "pipeline": "Run " + " -> ".join(PIPELINE_ORDER),
}

SUBCOMMANDS: List[str] = list(STAGE_DIRS) + ["pipeline"]


class StageRouter:
    """
    Routes subcommands to the pipeline.
    Every route returns a response dictionary; failures carry "error",
    "category" and "exit_code" instead of raising.
    """

    def __init__(self, pipeline: Pipeline):
        """
        Initialize the Stage Router

        Args:
            pipeline: Pipeline whose stages are routed to
        """
        self.pipeline = pipeline
        self.logger = logging.getLogger("VerifScope.StageRouter")
        self.stage_registry: Dict[str, Dict[str, Any]] = {}
        for name in SUBCOMMANDS:
            self.register_stage(name, pipeline.stage(name), STAGE_DESCRIPTIONS[name])

    def register_stage(self, name: str, handler: Callable[[], Dict[str, Any]], description: str = "") -> None:
        pattern = "^" + re.escape(name) + "$"
        self.stage_registry[pattern] = {"name": name, "handler": handler, "description": description}
        self.logger.debug(f"Registered stage: {name}")

    def route(self, command: str) -> Dict[str, Any]:
        """
        Run the stage named by `command`

        Returns:
            The stage's response dictionary, or an error response
        """
        for pattern, info in self.stage_registry.items():
            if not re.match(pattern, command):
                continue
            self.logger.info(f"Running stage {info['name']}")
            try:
                return info["handler"]()
            except VerifScopeError as e:
                self.logger.error(f"{info['name']} failed ({e.category}): {e}")
                return {"error": str(e), "category": e.category, "exit_code": e.exit_code, "success": False}
            except Exception as e:
                self.logger.exception(f"Unexpected error in stage {info['name']}")
                return {"error": f"Unexpected error: {e}", "category": "internal", "exit_code": 1, "success": False}
        return {
            "error": f"Unknown subcommand {command!r}; choose from {', '.join(SUBCOMMANDS)}",
            "category": "config",
            "exit_code": 2,
            "success": False,
        }

    def help(self) -> List[str]:
        return [f"{info['name']:<14} {info['description']}" for info in self.stage_registry.values()]
