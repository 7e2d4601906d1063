"""
VerifScope - Main Entry Point
Loads the run configuration and runs one pipeline subcommand
"""

import os
import sys
import logging
import time

from config.config_manager import ConfigManager
from core.errors import ConfigError
from core.pipeline import Pipeline
from core.stage_router import StageRouter
from interfaces.cli import CommandLineInterface, parse_arguments


def setup_logging(log_level):
    """Set up logging configuration"""
    numeric_level = getattr(logging, str(log_level).upper(), None)
    if not isinstance(numeric_level, int):
        raise ConfigError(f"Invalid log level: {log_level}")

    # Create logs directory if it doesn't exist
    os.makedirs("logs", exist_ok=True)

    # Generate log filename with timestamp
    timestamp = time.strftime("%Y%m%d-%H%M%S")
    log_file = f"logs/verifscope-{timestamp}.log"

    logging.basicConfig(
        level=numeric_level,
        format="%(asctime)s - %(name)s - %(levelname)s - %(message)s",
        handlers=[
            logging.FileHandler(log_file),
            logging.StreamHandler(sys.stdout)
        ]
    )

    # Create a symlink to the latest log
    latest_log = "logs/latest.log"
    try:
        if os.path.lexists(latest_log):
            os.remove(latest_log)
        os.symlink(os.path.basename(log_file), latest_log)
    except Exception as e:
        logging.warning(f"Could not create symlink to latest log: {str(e)}")


def load_config(args) -> ConfigManager:
    """Configuration with the command-line overrides applied"""
    config = ConfigManager(config_path=args.config)
    if args.seed is not None:
        config.set("SEED", args.seed)
    if args.out is not None:
        config.set("OUT_DIR", args.out)
    if args.log_level is not None:
        config.set("LOG_LEVEL", args.log_level)
    return config


def main(argv=None) -> int:
    """Main entry point"""
    args = parse_arguments(argv)

    try:
        config = load_config(args)
        setup_logging(config.get("LOG_LEVEL", "INFO"))
    except ConfigError as e:
        print(f"Error [{e.category}]: {e}", file=sys.stderr)
        return e.exit_code

    pipeline = Pipeline(config, force=args.force)
    interface = CommandLineInterface(StageRouter(pipeline))
    return interface.run(args.command)


if __name__ == "__main__":
    sys.exit(main())
