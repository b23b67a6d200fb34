from __future__ import annotations

import json
import os

import numpy as np
import pandas as pd

from finmdp_pg.logger import logger


def _to_builtin(value):
    """json.dump fallback for numpy scalars and arrays found in summaries and schedules."""
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, np.ndarray):
        return value.tolist()
    raise TypeError(f"Object of type {type(value).__name__} is not JSON serializable")


class Data:
    @staticmethod
    def frame_to_csv(df, csv_file):
        """
        Write a training log frame to CSV.

        Floats use pandas' shortest repr, which `csv_to_frame` reads back bit for bit.

        Parameters:
        - df (pd.DataFrame): Frame to write, written without its index.
        - csv_file (str): Output path.

        Raises:
        - TypeError: If `df` is not a DataFrame.
        - FileNotFoundError: If the target directory does not exist.
        - PermissionError: If the file cannot be written.
        """
        if not isinstance(df, pd.DataFrame):
            raise TypeError(f"Expected a DataFrame, got {type(df).__name__}")

        try:
            df.to_csv(csv_file, index=False, lineterminator="\n")
        except (FileNotFoundError, PermissionError) as e:
            raise type(e)(f"Cannot write log CSV {csv_file}: {e}")
        logger.info(f"{len(df)} rows written to {csv_file}")

    @staticmethod
    def csv_to_frame(csv_file, dtype=None):
        """
        Read a CSV written by `frame_to_csv`. Empty cells come back as NaN.

        Parameters:
        - csv_file (str): Path to the CSV file.
        - dtype (dict, optional): Column dtypes forwarded to pandas.

        Raises:
        - ValueError: If the path is empty.
        - FileNotFoundError: If the file does not exist.
        """
        if not csv_file:
            raise ValueError("CSV file path is empty")
        if not os.path.isfile(csv_file):
            raise FileNotFoundError(f"Log CSV not found: {csv_file}")
        return pd.read_csv(csv_file, dtype=dtype, float_precision="round_trip")

    @staticmethod
    def dict_to_json(data_dict, json_file):
        """
        Write a model, checkpoint, summary or comparison document.

        Raises:
        - TypeError: If `data_dict` is not a dictionary or holds non-serialisable values.
        - ValueError: If `data_dict` is empty.
        """
        if not isinstance(data_dict, dict):
            raise TypeError(f"Expected a dictionary, got {type(data_dict).__name__}")
        if not data_dict:
            raise ValueError("Refusing to write an empty document")

        with open(json_file, "w") as file:
            json.dump(data_dict, file, indent=2, default=_to_builtin)
        logger.info(f"Document written to {json_file}")

    @staticmethod
    def json_to_dict(json_file):
        """
        Read a JSON document.

        Raises:
        - FileNotFoundError: If the file does not exist.
        - ValueError: If the file is not valid JSON.
        """
        try:
            with open(json_file, "r") as file:
                return json.load(file)
        except FileNotFoundError:
            raise FileNotFoundError(f"JSON file not found at path: {json_file}")
        except json.JSONDecodeError as e:
            raise ValueError(f"Invalid JSON in {json_file}: {e}")

    @staticmethod
    def create_folders(folder_paths):
        """
        Create output folders, keeping existing ones.

        Raises:
        - TypeError: If `folder_paths` is not a list.
        - ValueError: If the list is empty.
        """
        if not isinstance(folder_paths, list):
            raise TypeError(f"Expected a list of folders, got {type(folder_paths).__name__}")
        if not folder_paths:
            raise ValueError("No output folder given")

        for folder_path in folder_paths:
            os.makedirs(folder_path, exist_ok=True)
            logger.debug(f"Output folder ready: {folder_path}")
