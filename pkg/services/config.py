"""
Runtime Settings

Environment-driven settings for the CLI and library defaults.
Values come from the process environment, optionally seeded from a
.env file next to the package.
"""

import os
from pathlib import Path
from typing import Optional

from dotenv import load_dotenv
from pydantic import BaseModel, Field

env_path = Path(__file__).parent.parent / '.env'
load_dotenv(dotenv_path=env_path)


class Settings(BaseModel):
    """Process-wide defaults; CLI flags override them per command"""
    log_level: str = Field(default="INFO")
    seed: int = Field(default=0, ge=0)
    corpus_dir: Optional[str] = None

    @classmethod
    def from_env(cls) -> "Settings":
        return cls(
            log_level=os.getenv("BILEVEL_LOG_LEVEL", "INFO").upper(),
            seed=int(os.getenv("BILEVEL_SEED", "0")),
            corpus_dir=os.getenv("BILEVEL_CORPUS_DIR") or None,
        )


def get_settings() -> Settings:
    return Settings.from_env()
