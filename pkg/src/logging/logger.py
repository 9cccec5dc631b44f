import logging
import os
import sys
from logging.handlers import RotatingFileHandler
from typing import Optional

from configs import get_app_settings, get_logging_settings, get_runtime_settings

LEVELS = ("DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL")


class ProjectLogger:
    """
    Singleton owner of the `damage-monitor` logger tree.

    Console output goes to stdout; `DAMAGE_LOG_FILE` adds a rotating file that
    always records DEBUG, whatever the console level.
    """
    _instance = None
    _initialized = False

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __init__(self):
        if not self._initialized:
            self._configure()
            ProjectLogger._initialized = True

    def _configure(self):
        self.settings = get_logging_settings()
        self.root_name = get_app_settings().app_name

        self.logger = logging.getLogger(self.root_name)
        self.logger.setLevel(logging.DEBUG)
        self.logger.propagate = False
        self.logger.handlers.clear()

        self.formatter = logging.Formatter(fmt=self.settings.log_format, datefmt=self.settings.log_datefmt)
        self.console = logging.StreamHandler(sys.stdout)
        self.console.setFormatter(self.formatter)
        self.console.setLevel(self.settings.log_level)
        self.logger.addHandler(self.console)

        if self.settings.log_file:
            self._add_file_handler(self.settings.log_file)

    def _add_file_handler(self, path: str):
        directory = os.path.dirname(path)
        if directory:
            os.makedirs(directory, exist_ok=True)
        handler = RotatingFileHandler(
            path,
            maxBytes=self.settings.max_log_file_size,
            backupCount=self.settings.backup_log_count,
            encoding="utf-8"
        )
        handler.setFormatter(self.formatter)
        handler.setLevel(logging.DEBUG)
        self.logger.addHandler(handler)

    def get_logger(self, name: Optional[str] = None) -> logging.Logger:
        if name:
            return self.logger.getChild(name)
        return self.logger

    def set_level(self, level: str):
        """Console level only; the log file keeps DEBUG"""
        level = level.upper()
        if level not in LEVELS:
            raise ValueError(f"Unknown log level: {level}")
        self.console.setLevel(level)

    def log_run_header(self, command: str, config_path: str, output_dir: str, config_hash: str):
        runtime = get_runtime_settings()
        app = get_app_settings()
        self.logger.info("=" * 60)
        self.logger.info(f"{app.app_name} {app.app_version}: {command}")
        self.logger.info(f"Config: {config_path} (hash {config_hash})")
        self.logger.info(f"Output: {output_dir}")
        self.logger.info(f"Jobs: {runtime.jobs} | Python {sys.version.split()[0]} | PID {os.getpid()}")
        self.logger.info("=" * 60)


def get_logger(module_name: Optional[str] = None) -> logging.Logger:
    """
    Logger for a module, named after its last dotted component

    Usage:
        logger = get_logger(__name__)
    """
    project_logger = ProjectLogger()
    if module_name:
        return project_logger.get_logger(module_name.rsplit(".", 1)[-1])
    return project_logger.get_logger()
