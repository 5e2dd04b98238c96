"""
Pydantic models for configuration sections, session counters and reports
"""
from typing import Dict, List, Literal, Optional, Tuple

from pydantic import BaseModel, Field, model_validator


Point = Tuple[float, float]
Method = Literal["pdr", "traditional", "robust"]


class ImuNoiseModel(BaseModel):
    """Corruption applied to per-tick odometry increments"""
    gyro_bias: float = Field(default=0.005, description="Constant gyro bias (rad/s)")
    gyro_sigma: float = Field(default=0.002, ge=0, description="Gyro white noise (rad/sqrt(s))")
    odom_scale_err: float = Field(default=0.01, description="Multiplicative step-length error")
    odom_sigma: float = Field(default=0.01, ge=0, description="Step white noise (m/sqrt(s))")

    @classmethod
    def noiseless(cls) -> "ImuNoiseModel":
        return cls(gyro_bias=0.0, gyro_sigma=0.0, odom_scale_err=0.0, odom_sigma=0.0)


class RttNoiseModel(BaseModel):
    """Corruption applied to WiFi RTT ranges"""
    range_sigma: float = Field(default=0.3, ge=0, description="Gaussian range noise (m)")
    multipath_prob: float = Field(default=0.1, ge=0, le=1)
    multipath_bias_mean: float = Field(default=1.5, gt=0, description="Mean of exponential positive bias (m)")
    dropout_prob: float = Field(default=0.05, ge=0, le=1)

    @classmethod
    def noiseless(cls) -> "RttNoiseModel":
        return cls(range_sigma=0.0, multipath_prob=0.0, multipath_bias_mean=1.0, dropout_prob=0.0)


class ScenarioConfig(BaseModel):
    """Environment, path and sensor setup for one run"""
    name: str = "custom"
    area: Point = Field(..., description="(width, height) in meters")
    waypoints: List[Point]
    speed: float = Field(default=1.0, gt=0, description="m/s")
    imu_rate: int = Field(default=100, gt=0, description="Hz")
    rtt_rate: int = Field(default=5, gt=0, description="Hz")
    aps: List[Point] = Field(default_factory=list)
    start_heading: Optional[float] = Field(
        default=None, description="Initial heading (rad); defaults to the first leg direction"
    )
    imu_noise: ImuNoiseModel = Field(default_factory=ImuNoiseModel)
    rtt_noise: RttNoiseModel = Field(default_factory=RttNoiseModel)
    seed: int = Field(default=0, ge=0)


class KeyframeModel(BaseModel):
    """Diagonal odometry covariance model for composed keyframe edges"""
    trans_var_per_m: float = Field(default=1e-4, ge=0)
    rot_var_per_rad: float = Field(default=1e-4, ge=0)
    rot_var_per_s: float = Field(default=1e-5, ge=0)
    var_floor: float = Field(default=1e-4, gt=0)


class DetectorConfig(BaseModel):
    """RTT-fingerprint loop-closure gate"""
    min_aps_for_match: int = Field(default=3, ge=1)
    min_separation: int = Field(default=50, ge=1, description="Keyframes between i and j")
    match_threshold: float = Field(default=0.8, gt=0, description="RMS range difference (m)")
    sigma_lc: float = Field(default=0.5, gt=0)
    suppression_window: int = Field(default=10, ge=0)


class SolverConfig(BaseModel):
    """Levenberg-Marquardt and robust kernel parameters"""
    max_iters: int = Field(default=50, ge=1)
    lambda_init: float = Field(default=1e-4, gt=0)
    lambda_max: float = Field(default=1e8, gt=0)
    rel_tol: float = Field(default=1e-8, gt=0)
    phi: float = Field(default=1.0, gt=0)
    robust: bool = True
    gnc_phi_start: Optional[float] = Field(
        default=None, gt=0, description="Anneal phi from this value down to `phi` when set"
    )
    gnc_steps: int = Field(default=4, ge=1)
    gnc_stage_iters: int = Field(
        default=10, ge=1, description="Iteration cap for each annealing stage before the target phi"
    )
    odom_chi2_gate: float = Field(
        default=9.0, gt=0, description="Mean odometry chi2 per edge above which a solution is distrusted"
    )
    dense_threshold: int = Field(default=300, ge=0, description="Below this node count use dense solves")


class SolveStats(BaseModel):
    """Outcome of one optimize call"""
    initial_chi2: float
    final_chi2: float
    iterations: int
    weights: List[float] = Field(default_factory=list, description="Final per-loop-edge robust weights")
    chi2_history: List[float] = Field(default_factory=list)
    converged: bool = False
    final_lambda: float = 0.0
    annealed: bool = Field(default=False, description="Poses come from the annealed start rather than the direct one")


class SchedulerConfig(BaseModel):
    keyframe_on_rtt_epoch: bool = True
    solve_every_k: int = Field(default=5, ge=1)
    command_period_ms: int = Field(default=500, ge=1)


class PlannerGains(BaseModel):
    k_v: float = Field(default=0.8, ge=0)
    k_omega: float = Field(default=1.5, ge=0)
    v_max: float = Field(default=1.4, ge=0)
    omega_max: float = Field(default=1.5, ge=0)
    capture_radius: float = Field(default=0.3, gt=0)


class RobotConfig(BaseModel):
    tx_capacity: Optional[int] = Field(default=64, ge=1, description="None means unbounded")
    imu_batch: int = Field(default=20, ge=1)
    heartbeat_period_ms: int = Field(default=1000, ge=1)
    closed_loop: bool = False
    closed_loop_duration_s: Optional[float] = Field(default=None, gt=0)


class FalsePositiveConfig(BaseModel):
    """Clustered false loop closures injected for the baseline comparison"""
    count: int = Field(default=3, ge=0, description="Number of falsely clustered place pairs")
    min_offset: float = Field(default=5.0, gt=0, description="Minimum true distance between the pair (m)")
    visit_radius: float = Field(default=0.3, gt=0)
    max_edges_per_cluster: int = Field(default=40, ge=1)


class SessionStats(BaseModel):
    """Robot-side counters for one session"""
    generated_imu: int = 0
    generated_rtt: int = 0
    generated_heartbeat: int = 0
    sent_imu: int = 0
    sent_rtt: int = 0
    sent_heartbeat: int = 0
    dropped_imu: int = 0
    dropped_rtt: int = 0
    dropped_heartbeat: int = 0
    commands_received: int = 0
    duration_us: int = 0
    aborted: bool = False
    error: Optional[str] = None

    @property
    def sent(self) -> int:
        return self.sent_imu + self.sent_rtt + self.sent_heartbeat


class EdgeSummary(BaseModel):
    """Edge-side counters and estimator state for one session"""
    frames_received: int = 0
    duplicates: int = 0
    seq_gaps: int = 0
    missing_frames: int = 0
    decode_errors: int = 0
    odometry_samples: int = 0
    imu_gap_us: int = 0
    ranges: int = 0
    heartbeats: int = 0
    keyframes: int = 0
    loop_edges: int = 0
    solves: int = 0
    last_chi2: Optional[float] = None
    commands_sent: int = 0
    latency_ms_mean: Optional[float] = None
    latency_ms_max: Optional[float] = None


class MetricsReport(BaseModel):
    """Trajectory metrics for one (method, seed)"""
    method: str
    seed: int
    rmse: float = Field(..., ge=0)
    p90: float = Field(..., ge=0)
    endpoint: float = Field(..., ge=0)
    cdf: List[Tuple[float, float]] = Field(default_factory=list)
    path_length: float = Field(..., ge=0)
    samples: int = 0
    solve: Optional[SolveStats] = None
    loop_edges: int = 0
    injected_edges: int = 0
    injected_weight_mean: Optional[float] = None
    error: Optional[str] = None

    @model_validator(mode="after")
    def _cdf_monotone(self):
        fractions = [f for _, f in self.cdf]
        if any(b < a for a, b in zip(fractions, fractions[1:])):
            raise ValueError("cdf fractions must be non-decreasing")
        if fractions and abs(fractions[-1] - 1.0) > 1e-12:
            raise ValueError("cdf must end at 1")
        return self


class ExperimentConfig(BaseModel):
    """Seeds x methods comparison on one scenario"""
    scenario: ScenarioConfig
    seeds: List[int] = Field(..., min_length=1)
    methods: List[Method] = Field(..., min_length=1)
    output_dir: str = "./runs/experiment"
    false_positives: FalsePositiveConfig = Field(default_factory=FalsePositiveConfig)
    detector: DetectorConfig = Field(default_factory=DetectorConfig)
    keyframes: KeyframeModel = Field(default_factory=KeyframeModel)
    solver: SolverConfig = Field(default_factory=lambda: SolverConfig(gnc_phi_start=1000.0))
    workers: int = Field(default=1, ge=0, description="Seed worker processes; 0 starts one per CPU")


class ExperimentReport(BaseModel):
    """All per-run reports plus per-method aggregates"""
    scenario: str
    reports: List[MetricsReport] = Field(default_factory=list)
    aggregates: Dict[str, Dict[str, float]] = Field(default_factory=dict)
    failures: List[str] = Field(default_factory=list)
    output_dir: Optional[str] = None
