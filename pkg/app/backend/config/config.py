import logging
from enum import Enum
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Tuple, Union

from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, ValidationError
from pydantic_settings import BaseSettings

from model.models import ExperimentConfig
from utils.errors import ConfigurationError

# Load environment variables from .env file
load_dotenv(override=True)

logger = logging.getLogger(__name__)

# Project root directory (the repository root)
PROJECT_ROOT = Path(__file__).parent.parent.parent.parent.resolve()

NULL_LITERALS = {"none", "null", "~"}


def resolve_project_path(path_str: Union[str, Path]) -> Path:
    """
    Resolve relative paths to absolute paths based on project root.

    Args:
        path_str: Path string (relative or absolute)

    Returns:
        Absolute Path object

    Examples:
        ./runs/grid -> <project root>/runs/grid
        /absolute/path -> /absolute/path (unchanged)
    """
    path = Path(path_str)
    if path.is_absolute():
        return path
    return (PROJECT_ROOT / path).resolve()


class Settings(BaseSettings):
    """Process settings loaded from environment variables or .env file"""

    LOG_LEVEL: str = "INFO"
    DEFAULT_DTYPE: str = "float32"
    DEVICE: str = "cpu"
    OUTPUT_ROOT: str = "./runs"
    DATA_ROOT: Optional[str] = None
    TIME_ZONE: str = "UTC"
    NUM_THREADS: Optional[int] = None
    CODE_VERSION: str = "0.1.0"

    def get_output_root(self) -> Path:
        """Get absolute path to the run output root"""
        return resolve_project_path(self.OUTPUT_ROOT)

    def get_data_root(self) -> Optional[Path]:
        return resolve_project_path(self.DATA_ROOT) if self.DATA_ROOT else None

    model_config = ConfigDict(
        env_file=".env",
        case_sensitive=True,
        extra="ignore",
    )


def _parse_value(raw: str) -> Optional[str]:
    value = raw.strip()
    if len(value) >= 2 and value[0] == value[-1] and value[0] in "'\"":
        return value[1:-1]
    if value.lower() in NULL_LITERALS:
        return None
    return value


def _set_dotted(tree: Dict[str, Any], key: str, value: Any) -> None:
    parts = [p.strip() for p in key.split(".")]
    if not all(parts):
        raise ConfigurationError("empty key segment", field=key)
    node = tree
    for part in parts[:-1]:
        child = node.setdefault(part, {})
        if not isinstance(child, dict):
            raise ConfigurationError("key is both a value and a section", field=key)
        node = child
    if isinstance(node.get(parts[-1]), dict):
        raise ConfigurationError("key is both a value and a section", field=key)
    node[parts[-1]] = value


def parse_key_values(lines: Iterable[str], source: str = "<config>") -> Dict[str, Any]:
    """Parse ``key = value`` lines with dotted keys into a nested dict."""
    tree: Dict[str, Any] = {}
    for lineno, line in enumerate(lines, start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigurationError(f"{source}:{lineno}: expected 'key = value', got '{stripped}'")
        key, raw = stripped.split("=", 1)
        _set_dotted(tree, key.strip(), _parse_value(raw))
    return tree


def parse_overrides(overrides: Iterable[str]) -> List[Tuple[str, str]]:
    pairs = []
    for item in overrides or []:
        if "=" not in item:
            raise ConfigurationError(f"override must be key=value, got '{item}'")
        key, value = item.split("=", 1)
        pairs.append((key.strip(), value))
    return pairs


def _validation_to_config_error(err: ValidationError) -> ConfigurationError:
    first = err.errors()[0]
    field = ".".join(str(p) for p in first.get("loc", ())) or None
    messages = "; ".join(
        f"{'.'.join(str(p) for p in e.get('loc', ()))}: {e.get('msg')}" for e in err.errors()
    )
    return ConfigurationError(messages, field=field)


def _merge(tree: Dict[str, Any], other: Dict[str, Any]) -> None:
    for key, value in other.items():
        if isinstance(value, dict) and isinstance(tree.get(key), dict):
            _merge(tree[key], value)
        else:
            tree[key] = value


def build_experiment_config(tree: Dict[str, Any]) -> ExperimentConfig:
    try:
        return ExperimentConfig.model_validate(tree)
    except ValidationError as err:
        raise _validation_to_config_error(err) from err


def load_experiment_config(
    path: Optional[Union[str, Path]] = None,
    overrides: Optional[Iterable[str]] = None,
    defaults: Optional[Dict[str, Any]] = None,
) -> ExperimentConfig:
    """
    Load an experiment config file and apply ``key=value`` overrides.

    Args:
        path: Config file in dotted ``key = value`` format; None starts from defaults
        overrides: Values of repeated ``--set`` flags
        defaults: Dotted keys applied before the file (process-level settings)

    Returns:
        Validated ExperimentConfig

    Raises:
        ConfigurationError: on syntax errors or field-level validation failures
        FileNotFoundError: if ``path`` does not exist
    """
    tree: Dict[str, Any] = {}
    for key, value in (defaults or {}).items():
        _set_dotted(tree, key, value)
    if path is not None:
        path = Path(path)
        with open(path, "r", encoding="utf-8") as file:
            _merge(tree, parse_key_values(file, source=str(path)))
        logger.info(f"Loaded experiment config from {path}")
    for key, value in parse_overrides(overrides or []):
        _set_dotted(tree, key, _parse_value(value))
        logger.debug(f"override {key} = {value}")
    return build_experiment_config(tree)


def _flatten(prefix: str, value: Any, out: List[Tuple[str, Any]]) -> None:
    if isinstance(value, dict):
        for key, child in value.items():
            _flatten(f"{prefix}.{key}" if prefix else key, child, out)
    else:
        out.append((prefix, value))


def _format_value(value: Any) -> str:
    if value is None:
        return "none"
    if isinstance(value, Enum):
        return str(value.value)
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def flatten_config(cfg: BaseModel) -> List[Tuple[str, str]]:
    out: List[Tuple[str, Any]] = []
    _flatten("", cfg.model_dump(mode="python"), out)
    return [(key, _format_value(value)) for key, value in out]


def dump_experiment_config(cfg: ExperimentConfig, header: Optional[Dict[str, Any]] = None) -> str:
    """Render a config in the same format ``load_experiment_config`` reads."""
    lines = []
    for key, value in (header or {}).items():
        lines.append(f"# {key}: {value}")
    for key, value in flatten_config(cfg):
        lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"
