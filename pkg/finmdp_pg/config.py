from __future__ import annotations

import json
import os


class Config:
    """
    Settings read from a JSON file once at import time.

    Args:
        file_path (str): Path of the JSON document.

    Raises:
        FileNotFoundError: If the file does not exist.
        ValueError: If the file is not a JSON object.
    """

    def __init__(self, file_path):
        self.file_path = file_path
        self.config_data = self._load_config()

    def _load_config(self):
        try:
            with open(self.file_path, "r") as file:
                config_data = json.load(file)
        except FileNotFoundError:
            raise FileNotFoundError(f"Config file not found at path: {self.file_path}")
        except json.JSONDecodeError:
            raise ValueError(f"Invalid JSON format in config file: {self.file_path}")
        if not isinstance(config_data, dict):
            raise ValueError(f"Config file {self.file_path} must hold a JSON object")
        return config_data

    def get(self, key):
        """
        Raises:
            KeyError: If `key` is not set.
        """
        return self.config_data[key]

    def get_or(self, key, default):
        return self.config_data.get(key, default)

    def override(self, **properties):
        """
        Replace properties in memory. A value of None removes the key, so passing
        back the returned mapping restores the previous state.

        Returns:
            dict: The previous values of the overridden keys (None when unset).
        """
        previous = {key: self.config_data.get(key) for key in properties}
        for key, value in properties.items():
            if value is None:
                self.config_data.pop(key, None)
            else:
                self.config_data[key] = value
        return previous

    def get_all_properties(self):
        return self.config_data


config = Config(
    os.environ.get(
        "FINMDP_PG_CONFIG",
        os.path.join(os.path.dirname(os.path.dirname(__file__)), "config", "config.json"),
    ),
)
