"""
Process settings

Read from the environment (and a local .env file if there is one).
"""
import os
from pathlib import Path

from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict

load_dotenv()


class Settings(BaseModel):
    """Environment-driven defaults for the CLI."""

    model_config = ConfigDict(frozen=True)

    scenario_dir: Path = Path("scenarios")
    output_dir: Path = Path("runs")
    log_level: str = "WARNING"

    @classmethod
    def from_env(cls) -> "Settings":
        return cls(
            scenario_dir=Path(os.getenv("CHUNKWISE_SCENARIO_DIR", "scenarios")),
            output_dir=Path(os.getenv("CHUNKWISE_OUTPUT_DIR", "runs")),
            log_level=os.getenv("CHUNKWISE_LOG_LEVEL", "WARNING").upper(),
        )

    def resolve_scenario(self, path: str) -> Path:
        """
        Resolve a --scenario argument.

        Existing paths win; otherwise the name is looked up in scenario_dir,
        with ".yaml" appended when no suffix is given.
        """
        candidate = Path(path)
        if candidate.exists():
            return candidate
        in_dir = self.scenario_dir / candidate
        if not in_dir.suffix:
            in_dir = in_dir.with_suffix(".yaml")
        return in_dir if in_dir.exists() else candidate


settings = Settings.from_env()
