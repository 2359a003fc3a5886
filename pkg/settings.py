import os
from pathlib import Path
from typing import Optional
from dotenv import load_dotenv
from pydantic import BaseModel, Field


load_dotenv()


class Settings(BaseModel):
    """Process-wide settings read from the environment (.env supported)"""
    data_dir: Optional[Path] = None
    log_level: str = "INFO"
    host: str = "127.0.0.1"
    port: int = Field(8765, ge=1, le=65535)
    poll_seconds: float = Field(0.2, gt=0)

    @classmethod
    def from_env(cls) -> "Settings":
        data_dir = os.getenv("FEDILC_DATA_DIR")
        return cls(
            data_dir=Path(data_dir) if data_dir else None,
            log_level=os.getenv("FEDILC_LOG_LEVEL", "INFO"),
            host=os.getenv("FEDILC_HOST", "127.0.0.1"),
            port=int(os.getenv("FEDILC_PORT", "8765")),
            poll_seconds=float(os.getenv("FEDILC_POLL_SECONDS", "0.2")),
        )
