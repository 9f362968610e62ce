from pathlib import Path

PACKAGE_PATH = Path(__file__).parent.parent.resolve()
CONF_PATH = PACKAGE_PATH / "conf"
DEFAULT_SETTINGS = CONF_PATH / "default_settings.yaml"
