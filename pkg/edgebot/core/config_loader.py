"""
YAML run configuration loader

A run file names a scenario (a preset plus overrides) and optional sections for
the robot, edge scheduler, planner, estimator, solver and experiment.
"""
import copy
from pathlib import Path
from typing import Any, Dict, Optional

import yaml

from edgebot.core.logging import app_logger
from edgebot.models.schemas import (
    DetectorConfig,
    ExperimentConfig,
    FalsePositiveConfig,
    ImuNoiseModel,
    KeyframeModel,
    PlannerGains,
    RobotConfig,
    RttNoiseModel,
    ScenarioConfig,
    SchedulerConfig,
    SolverConfig,
)


class RunConfig:
    """Run-specific configuration loaded from YAML"""

    REQUIRED_SECTIONS = ("scenario",)

    def __init__(self, config_file: Optional[str] = None, data: Optional[Dict[str, Any]] = None):
        """
        Load configuration from a YAML file or an already parsed mapping

        Args:
            config_file: Path to YAML configuration file
            data: Parsed configuration (used when no file is given)
        """
        self.config_file = config_file
        if config_file is not None:
            self.config = self._load_config()
        else:
            self.config = copy.deepcopy(data or {})
        self._validate_config()

    @classmethod
    def from_preset(cls, preset: str, seed: int = 0, **sections) -> "RunConfig":
        """Minimal config for a named scenario preset"""
        data: Dict[str, Any] = {"scenario": {"preset": preset}, "seed": seed}
        data.update(sections)
        return cls(data=data)

    def _load_config(self) -> Dict[str, Any]:
        config_path = Path(self.config_file)

        if not config_path.exists():
            raise FileNotFoundError(f"Configuration file not found: {self.config_file}")

        with open(config_path, "r") as f:
            config = yaml.safe_load(f) or {}

        if not isinstance(config, dict):
            raise ValueError(f"Configuration root must be a mapping: {self.config_file}")

        app_logger.info(f"Loaded configuration from: {self.config_file}")
        return config

    def _validate_config(self):
        for section in self.REQUIRED_SECTIONS:
            if section not in self.config:
                raise ValueError(f"Missing required configuration section: {section}")

        scenario = self.config["scenario"] or {}
        if "preset" not in scenario and not {"area", "waypoints"} <= set(scenario):
            raise ValueError("scenario needs either 'preset' or both 'area' and 'waypoints'")

        experiment = self.config.get("experiment")
        if experiment is not None and "seeds" not in experiment:
            raise ValueError("Missing required field: experiment.seeds")

    # ------------------------------------------------------------------
    # Typed accessors
    # ------------------------------------------------------------------

    @property
    def name(self) -> str:
        return self.get("run.name") or self.get("scenario.preset") or "custom"

    @property
    def seed(self) -> int:
        return int(self.config.get("seed", 0))

    @property
    def output_dir(self) -> Path:
        from edgebot.core.config import settings

        return Path(self.get("run.output_dir") or Path(settings.output_dir) / self.name)

    def scenario_config(self, seed: Optional[int] = None) -> ScenarioConfig:
        """
        Build the ScenarioConfig: preset values first, explicit keys override

        Args:
            seed: Overrides the file's seed when given

        Returns:
            ScenarioConfig
        """
        # Imported here: the simulator imports this package's logging at import time
        from edgebot.services.simulator import PRESETS
        from edgebot.core.errors import ScenarioError

        section = self.config["scenario"] or {}
        values: Dict[str, Any] = {}
        preset = section.get("preset")
        if preset is not None:
            if preset not in PRESETS:
                raise ScenarioError(f"unknown scenario preset '{preset}'")
            values.update(copy.deepcopy(PRESETS[preset]))
            if "waypoints" in section and "start_heading" not in section:
                values.pop("start_heading", None)

        for key in ("area", "waypoints", "speed", "aps", "start_heading"):
            if key in section:
                values[key] = section[key]
        rates = section.get("rates") or {}
        if "imu" in rates:
            values["imu_rate"] = rates["imu"]
        if "rtt" in rates:
            values["rtt_rate"] = rates["rtt"]
        if "name" in section:
            values["name"] = section["name"]

        values["imu_noise"] = ImuNoiseModel(**(self.get("noise.imu") or {}))
        values["rtt_noise"] = RttNoiseModel(**(self.get("noise.rtt") or {}))
        values["seed"] = self.seed if seed is None else seed
        return ScenarioConfig(**values)

    @property
    def robot(self) -> RobotConfig:
        return RobotConfig(**(self.config.get("robot") or {}))

    @property
    def scheduler(self) -> SchedulerConfig:
        return SchedulerConfig(**(self.config.get("scheduler") or {}))

    @property
    def planner(self) -> PlannerGains:
        return PlannerGains(**(self.config.get("planner") or {}))

    @property
    def keyframes(self) -> KeyframeModel:
        return KeyframeModel(**(self.config.get("keyframes") or {}))

    @property
    def detector(self) -> DetectorConfig:
        return DetectorConfig(**(self.config.get("detector") or {}))

    @property
    def solver(self) -> SolverConfig:
        return SolverConfig(**(self.config.get("solver") or {}))

    @property
    def false_positives(self) -> FalsePositiveConfig:
        return FalsePositiveConfig(**(self.get("experiment.false_positives") or {}))

    def experiment(self, output_dir: Optional[str] = None) -> ExperimentConfig:
        """
        Build the ExperimentConfig for `edgebot eval`

        Raises:
            ValueError: if the file has no experiment section
        """
        section = self.config.get("experiment")
        if section is None:
            raise ValueError("Missing required configuration section: experiment")

        values: Dict[str, Any] = dict(
            scenario=self.scenario_config(),
            seeds=list(section["seeds"]),
            methods=list(section.get("methods", ["pdr", "traditional", "robust"])),
            output_dir=str(output_dir or self.output_dir),
            false_positives=self.false_positives,
            detector=self.detector,
            keyframes=self.keyframes,
        )
        if "workers" in section:
            values["workers"] = section["workers"]
        # Without an explicit solver section the experiment default (GNC on) applies
        if "solver" in self.config:
            values["solver"] = self.solver
        return ExperimentConfig(**values)

    def get(self, key: str, default: Any = None) -> Any:
        """
        Get configuration value by dot-notation key

        Args:
            key: Configuration key (e.g., 'noise.rtt.range_sigma')
            default: Default value if key not found

        Returns:
            Configuration value
        """
        value: Any = self.config
        for k in key.split("."):
            if isinstance(value, dict) and k in value:
                value = value[k]
            else:
                return default
        return value

    def ensure_directories(self, output_dir: Optional[Path] = None) -> Path:
        """Create the output directory if it doesn't exist"""
        directory = Path(output_dir) if output_dir is not None else self.output_dir
        directory.mkdir(parents=True, exist_ok=True)
        app_logger.info(f"Ensured directory exists: {directory}")
        return directory


# Global run config (set when main.py loads)
run_config: Optional[RunConfig] = None


def load_run_config(config_file: str) -> RunConfig:
    """
    Load run configuration from YAML file

    Args:
        config_file: Path to YAML configuration file

    Returns:
        RunConfig object
    """
    global run_config
    run_config = RunConfig(config_file)
    return run_config


def get_run_config() -> RunConfig:
    """
    Get the current run configuration

    Raises:
        RuntimeError: If configuration hasn't been loaded yet
    """
    if run_config is None:
        raise RuntimeError("Run configuration not loaded. Call load_run_config() first.")
    return run_config
