"""
Command Line Interface - Argument surface and output of the VerifScope runner
Runs one subcommand per invocation and prints its summary line
"""

import argparse
import logging
import sys
from typing import Any, Dict, List, Optional, TextIO

from core.stage_router import STAGE_DESCRIPTIONS, SUBCOMMANDS, StageRouter

LOG_LEVELS = ["DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"]


def build_parser() -> argparse.ArgumentParser:
    """Global flags followed by exactly one subcommand"""
    parser = argparse.ArgumentParser(
        prog="verifscope",
        description="VerifScope - interpretability workbench for self-verification in a toy reasoning model",
    )
    parser.add_argument("--config", "-c", help="Path to a JSON or YAML configuration file", default=None)
    parser.add_argument("--seed", type=int, default=None, help="Override the top-level SEED")
    parser.add_argument("--out", default=None, help="Override OUT_DIR, the artifact directory")
    parser.add_argument(
        "--log-level", "-l",
        help="Logging level (defaults to LOG_LEVEL of the config)",
        choices=LOG_LEVELS,
        default=None,
    )
    parser.add_argument("--force", action="store_true", help="Let report combine artifacts from different configs")

    sub = parser.add_subparsers(dest="command", metavar="SUBCOMMAND")
    sub.required = True
    for name in SUBCOMMANDS:
        sub.add_parser(name, help=STAGE_DESCRIPTIONS[name])
    return parser


def parse_arguments(argv: Optional[List[str]] = None) -> argparse.Namespace:
    return build_parser().parse_args(argv)


class CommandLineInterface:
    """
    Runs subcommands through the stage router and reports their outcome.
    """

    def __init__(self, router: StageRouter, out: TextIO = sys.stdout, err: TextIO = sys.stderr):
        """
        Initialize the command line interface

        Args:
            router: Router of the configured pipeline
            out: Stream for summary lines
            err: Stream for error lines
        """
        self.router = router
        self.out = out
        self.err = err
        self.logger = logging.getLogger("VerifScope.CommandLineInterface")

    def run(self, command: str) -> int:
        """
        Run one subcommand

        Returns:
            Process exit code
        """
        response = self.router.route(command)
        self._display_response(response)
        return 0 if response.get("success") else int(response.get("exit_code", 1))

    def _display_response(self, response: Dict[str, Any]) -> None:
        if "error" in response:
            print(f"Error [{response.get('category', 'error')}]: {response['error']}", file=self.err)
            return
        for line in response.get("lines", []):
            print(line, file=self.out)
        print(response["summary"], file=self.out)
