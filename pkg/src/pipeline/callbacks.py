from typing import Any, Dict, Optional

from src.logging.logger import get_logger

logger = get_logger(__name__)


def before_stage(stage: str, city_id: Optional[str], args: Dict[str, Any]) -> None:
    """Log before a stage runs"""
    logger.info(
        f"[BEFORE] Stage: {stage} | "
        f"City: {city_id or '-'} | "
        f"Args: {args}"
    )


def after_stage(stage: str, city_id: Optional[str], response: Dict[str, Any]) -> None:
    """Log after a stage ran, skipped or failed"""
    status = response.get("status", "unknown")
    log = logger.error if status == "error" else logger.info
    log(
        f"[AFTER] status: {status} Stage: {stage} | "
        f"City: {city_id or '-'} | "
        f"Message: {response.get('message', '')} | "
        f"Artifacts: {len(response.get('artifacts', []))}"
    )
