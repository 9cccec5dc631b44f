import argparse
import json
import sys

from configs import get_app_settings, get_runtime_settings
from src.exceptions import ConfigurationError, DamageMonitorError, RunLockError, StageError
from src.logging.logger import LEVELS, ProjectLogger, get_logger
from src.pipeline.commands import COMMANDS, run_command
from src.schemas.run import RunConfig

logger = get_logger(__name__)

EXIT_STAGE_FAILED = 1
EXIT_BAD_CONFIG = 2
EXIT_LOCKED = 3


def build_parser() -> argparse.ArgumentParser:
    app = get_app_settings()
    parser = argparse.ArgumentParser(prog=app.app_name, description=app.app_description)
    parser.add_argument("--version", action="version", version=f"%(prog)s {app.app_version}")
    commands = parser.add_subparsers(dest="command", required=True)
    for name, command in COMMANDS.items():
        sub = commands.add_parser(name, help=(command.__doc__ or name).strip().splitlines()[0])
        sub.add_argument("--config", required=True, help="Run configuration (YAML)")
        sub.add_argument("--resume", action="store_true", help="Skip stages whose manifest entry is still fresh")
        sub.add_argument("--seed-override", type=int, default=None, help="Derive every seed of the run from N")
        sub.add_argument("--jobs", type=int, default=None, help="Worker threads for parallel stages")
        sub.add_argument("--log-level", choices=LEVELS, type=str.upper, default=None, help="Console log level")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    project_logger = ProjectLogger()
    if args.log_level:
        project_logger.set_level(args.log_level)

    try:
        config = RunConfig.from_yaml(args.config)
        if args.seed_override is not None:
            config = config.with_seed_override(args.seed_override)
        if args.jobs is not None:
            if args.jobs < 1:
                raise ConfigurationError(f"--jobs must be at least 1, got {args.jobs}")
            get_runtime_settings().jobs = args.jobs
        project_logger.log_run_header(args.command, args.config, config.output_dir, config.config_hash())
        response = run_command(args.command, config, resume=args.resume)
    except ConfigurationError as e:
        logger.error(f"Configuration error: {e}")
        return EXIT_BAD_CONFIG
    except RunLockError as e:
        logger.error(str(e))
        return EXIT_LOCKED
    except StageError as e:
        logger.error(f"Stage '{e.stage}' failed: {e.cause}")
        return EXIT_BAD_CONFIG if isinstance(e.cause, ConfigurationError) else EXIT_STAGE_FAILED
    except DamageMonitorError as e:
        logger.error(f"Run failed: {e}")
        return EXIT_STAGE_FAILED

    print(json.dumps(response, indent=2))
    return 0


if __name__ == "__main__":
    sys.exit(main())
