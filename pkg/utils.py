"""Utitlies Module."""

import os
import json
import logging
from concurrent import futures

import numpy as np

SCENARIOS_FILE_PATH = os.path.join(
    os.path.dirname(os.path.abspath(__file__)), "resources", "scenarios.json"
)

logging.basicConfig(
    level=logging.INFO, format=("%(asctime)s - %(name)s - %(levelname)s - %(message)s")
)
logger = logging.getLogger(__name__)


def get_configs(config_name, strict=False, default_value=None):
    """
    Retrieves the value of a configuration from the environment variables.

    Args:
        config_name (str): The name of the configuration to retrieve.
        strict (bool): If True, raises an error if the configuration
            is not found. Default is False.
        default_value (str): The default value to return if the configuration
            is not found and strict is False. Default is None.

    Returns:
        str: The value of the configuration, or default_value if not found and
            strict is False.

    Raises:
        KeyError: If the configuration is not found and strict is True.
        ValueError: If the configuration value is empty and strict is True.
    """
    try:
        value = (
            os.environ[config_name]
            if strict
            else os.environ.get(config_name) or default_value
        )
        if strict and (value is None or value.strip() == ""):
            raise ValueError(f"Configuration '{config_name}' is missing or empty.")
        return value
    except KeyError as error:
        logger.error(
            "Configuration '%s' not found in environment variables: %s",
            config_name,
            error,
        )
        raise
    except ValueError as error:
        logger.error("Configuration '%s' is empty: %s", config_name, error)
        raise


def get_int_config(config_name, default_value):
    """
    Retrieves an integer configuration from the environment variables.

    Args:
        config_name (str): The name of the configuration to retrieve.
        default_value (int): Value used when the variable is unset.

    Returns:
        int: The parsed configuration value.

    Raises:
        ValueError: If the variable is set but is not an integer.
    """
    raw = get_configs(config_name, default_value=str(default_value))
    try:
        return int(raw)
    except ValueError:
        logger.error("Configuration '%s' must be an integer, got '%s'.", config_name, raw)
        raise


def load_json_file(file_path):
    """
    Load data from a JSON file.

    Args:
        file_path (str): The path to the JSON file.

    Returns:
        dict or list: The decoded JSON document.

    Raises:
        FileNotFoundError: If the file does not exist.
        json.JSONDecodeError: If the file is not valid JSON.
    """
    try:
        with open(file_path, "r", encoding="utf-8") as file:
            return json.load(file)
    except FileNotFoundError:
        logger.error("Error: File '%s' not found.", file_path)
        raise
    except json.JSONDecodeError as e:
        logger.error("Error decoding JSON from '%s': %s", file_path, e)
        raise


def get_scenario_details_by_name(name, file_path=SCENARIOS_FILE_PATH):
    """
    Get the scenario details corresponding to the given name.

    Args:
        name (str): The scenario name to look up.
        file_path (str): Path of the scenarios resource file.

    Returns:
        tuple: A tuple containing (scenario_details, error_message).
            - scenario_details (dict): Details of the scenario if found.
            - error_message (str): Error message if scenario is not found,
                otherwise None.
    """
    scenario_details = load_json_file(file_path)

    for scenario in scenario_details:
        if scenario.get("name") == name:
            return scenario, None

    available_scenarios = ", ".join(
        f"'{scenario['name']}'" for scenario in scenario_details
    )
    error_message = (
        f"No scenario found with name '{name}'. "
        f"Available scenarios: {available_scenarios}"
    )

    return None, error_message


def spawn_rng(master_seed, *keys):
    """
    Create an independent generator for a (master_seed, keys...) substream.

    The same keys always yield the same stream regardless of the order in
    which substreams are requested, so replicate results do not depend on
    worker scheduling.

    Args:
        master_seed (int): The experiment master seed.
        *keys (int): Substream coordinates, e.g. replicate index, purpose tag.

    Returns:
        numpy.random.Generator: The seeded generator.
    """
    return np.random.default_rng(np.random.SeedSequence([int(master_seed), *map(int, keys)]))


def parallel_map(func, items, max_workers=1):
    """
    Apply ``func`` to every item, optionally on a process pool.

    Results are returned in input order so that downstream aggregation is
    identical for any worker count.

    Args:
        func (callable): A picklable top-level function.
        items (iterable): Arguments, one per call.
        max_workers (int): Number of worker processes; 1 runs inline.

    Returns:
        list: ``[func(item) for item in items]``.
    """
    items = list(items)
    if max_workers <= 1 or len(items) <= 1:
        return [func(item) for item in items]

    num_cpu_cores = os.cpu_count()
    logger.info("Logical CPU cores available: %s", num_cpu_cores)
    logger.info("Dispatching %s tasks to %s workers", len(items), max_workers)

    with futures.ProcessPoolExecutor(max_workers=max_workers) as executor:
        return list(executor.map(func, items, chunksize=max(1, len(items) // (4 * max_workers))))
