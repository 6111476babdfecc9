import json
from collections.abc import Iterable, Iterator
from configparser import ConfigParser
from importlib.metadata import PackageNotFoundError, version
from pathlib import Path
from typing import Any

_MASK64 = (1 << 64) - 1


def get_app_version() -> str:
    """
    Retrieves the current version of the application.

    Attempts to fetch the version metadata for the 'tri_scheduler' package.
    The version is written into every run manifest so a campaign can be
    traced back to the code that produced it.

    Returns:
        str: The version string (e.g., '0.1.0') if the package is installed,
            otherwise returns 'development-build'.
    """
    try:
        return version('tri_scheduler')
    except PackageNotFoundError:
        return 'development-build'


def get_root_dir() -> Path:
    """The `src` package directory; bundled resources are found relative to it."""
    return Path(__file__).resolve().parents[1]


def _get_ini_filepath() -> Path:
    root_dir = get_root_dir()
    ini_filepath = Path(root_dir / 'configuration' / 'config.ini')
    return ini_filepath


def load_ini(path: str | Path | None = None) -> ConfigParser:
    """
    Loads and parses a configuration INI file.

    The bundled defaults in 'configuration/config.ini' are always read
    first; a user file given by `path` is layered on top, so it only needs
    to name the keys it changes.

    Args:
        path (str | Path | None): Optional user configuration file.

    Returns:
        ConfigParser: A populated configuration object.

    Raises:
        FileNotFoundError: If `path` is given but does not exist.
    """
    config_data = ConfigParser()
    config_data.read(str(_get_ini_filepath()))
    if path is not None:
        user_path = Path(path)
        if not user_path.is_file():
            raise FileNotFoundError(f'Configuration file not found: {user_path}')
        config_data.read(str(user_path))
    return config_data


def get_float_tuple(
    config_data: ConfigParser, section: str, option: str
) -> tuple[float, ...]:
    """Reads a comma separated list of floats, e.g. `0.5, 0.6, 0.4`."""
    raw = config_data.get(section, option)
    return tuple(float(part) for part in raw.split(',') if part.strip())


def get_str_tuple(
    config_data: ConfigParser, section: str, option: str
) -> tuple[str, ...]:
    raw = config_data.get(section, option, fallback='')
    return tuple(part.strip() for part in raw.split(',') if part.strip())


def seed_words(*values: int) -> list[int]:
    """
    Maps arbitrary Python ints onto the non-negative words numpy seeding
    accepts, so negative seeds stay valid and distinct.
    """
    return [int(v) & _MASK64 for v in values]


def write_jsonl(filepath: str | Path, records: Iterable[dict[str, Any]]) -> Path:
    """
    Writes records as line-delimited JSON with sorted keys.

    Sorted keys and a fixed separator keep the bytes identical across
    re-runs of the same seeded campaign.
    """
    filepath = Path(filepath)
    filepath.parent.mkdir(parents=True, exist_ok=True)
    with open(filepath, 'w', encoding='utf-8', newline='\n') as f:
        for record in records:
            f.write(json.dumps(record, sort_keys=True, separators=(',', ':')))
            f.write('\n')
    return filepath


def read_jsonl(filepath: str | Path) -> Iterator[dict[str, Any]]:
    with open(filepath, 'r', encoding='utf-8') as f:
        for line in f:
            line = line.strip()
            if line:
                yield json.loads(line)


def write_json(filepath: str | Path, data: Any) -> Path:
    filepath = Path(filepath)
    filepath.parent.mkdir(parents=True, exist_ok=True)
    with open(filepath, 'w', encoding='utf-8', newline='\n') as f:
        json.dump(data, f, sort_keys=True, indent=2)
        f.write('\n')
    return filepath


def select_save_file(default_dir: str | None = None) -> str:
    """
    Open a file dialog to pick where a figure is saved.

    Returns:
        str: The chosen path. If the dialog is cancelled, an empty string
             is returned.
    """
    from PySide6.QtWidgets import QFileDialog

    if not default_dir:
        default_dir = ''
    filepath, _ = QFileDialog.getSaveFileName(
        parent=None,
        caption='Save Plot',
        dir=default_dir,
        filter='PNG Files (*.png);;PDF Files (*.pdf);;All Files (*)',
    )
    return filepath


if __name__ == '__main__':
    # --- How to get the data in the ini file ---
    config_data = load_ini()
    print(config_data.get('Scheduler', 'tau_succ'))
    print(get_float_tuple(config_data, 'World', 'workspace_max'))
